"""Event-by-event arc corner detection on the reference timestamp map."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from numba import njit

from .geometry import EVENT_DTYPE, Event
from .surface import StreamOrderError, TimestampMap, _ingest_one

# Pixel circles of radius 3 (16 px) and 4 (20 px), listed clockwise.
CIRCLE3 = np.array([
    (0, 3), (1, 3), (2, 2), (3, 1), (3, 0), (3, -1), (2, -2), (1, -3),
    (0, -3), (-1, -3), (-2, -2), (-3, -1), (-3, 0), (-3, 1), (-2, 2), (-1, 3),
], dtype=np.int64)
CIRCLE4 = np.array([
    (0, 4), (1, 4), (2, 3), (3, 2), (4, 1), (4, 0), (4, -1), (3, -2), (2, -3), (1, -4),
    (0, -4), (-1, -4), (-2, -3), (-3, -2), (-4, -1), (-4, 0), (-4, 1), (-3, 2), (-2, 3), (-1, 4),
], dtype=np.int64)
ARC_RANGE3 = (3, 6)
ARC_RANGE4 = (4, 8)
BORDER = 4

CORNER_DTYPE = np.dtype([("t", "<i8"), ("x", "<i4"), ("y", "<i4"), ("p", "i1")])


class Corner(NamedTuple):
    x: int
    y: int
    t: int
    polarity: int


def valid_arc_lengths(values) -> list[int]:
    """Lengths of the proper arcs whose every value beats every value outside them.

    Such arcs are nested around the newest element, so greedy growth toward the
    newer neighbour passes through all of them; the arc of length ``k`` is valid
    exactly when its minimum exceeds the ``k``-th largest value overall.
    """
    v = list(values)
    n = len(v)
    ranked = sorted(v, reverse=True)
    start = max(range(n), key=lambda i: (v[i], -i))
    lo = hi = start
    lowest = v[start]
    out = []
    for k in range(1, n):
        if lowest > ranked[k]:
            out.append(k)
        cw, ccw = v[(hi + 1) % n], v[(lo - 1) % n]
        if cw >= ccw:
            hi += 1
            lowest = min(lowest, cw)
        else:
            lo -= 1
            lowest = min(lowest, ccw)
    return out


def arc_accepts(lengths, n: int, lo: int, hi: int) -> bool:
    """Decide from the valid arc lengths of an ``n``-pixel circle.

    The inner arc is the longest valid arc covering at most half the circle and the
    outer arc the shortest covering at least half. The test passes if the inner arc, or
    the complement of the outer arc, has length in ``[lo, hi]``.
    """
    inner = max((k for k in lengths if 2 * k <= n), default=0)
    outer = min((k for k in lengths if 2 * k >= n), default=0)
    return (inner > 0 and lo <= inner <= hi) or (outer > 0 and lo <= n - outer <= hi)


def is_corner_patch(patch) -> bool:
    """Corner test on a 9x9 reference-timestamp neighbourhood centred on the event."""
    patch = np.asarray(patch)
    for circle, (lo, hi) in ((CIRCLE3, ARC_RANGE3), (CIRCLE4, ARC_RANGE4)):
        vals = [patch[BORDER + dy, BORDER + dx] for dx, dy in circle]
        if arc_accepts(valid_arc_lengths(vals), len(circle), lo, hi):
            return True
    return False


def detect(tmap: TimestampMap, e: Event) -> bool:
    """Arc test for an event already ingested into ``tmap``."""
    x, y = int(e.x), int(e.y)
    if x < BORDER or y < BORDER or x >= tmap.width - BORDER or y >= tmap.height - BORDER:
        return False
    return is_corner_patch(tmap.t_ref[y - BORDER:y + BORDER + 1, x - BORDER:x + BORDER + 1])


# ---------------------------------------------------------------------------
# compiled path used by the pipeline


@njit(cache=True)
def _arc_test(t_ref, x, y, circle, lo_len, hi_len, buf, ranked):
    n = circle.shape[0]
    start = 0
    for i in range(n):
        v = t_ref[y + circle[i, 1], x + circle[i, 0]]
        buf[i] = v
        ranked[i] = v
        if v > buf[start]:
            start = i
    ranked[:n].sort()  # ascending; k-th largest is ranked[n - 1 - k]
    lo = start
    hi = start
    lowest = buf[start]
    inner = 0  # longest valid arc up to a half circle
    outer = 0  # shortest valid arc from a half circle on
    for k in range(1, n):
        if lowest > ranked[n - 1 - k]:
            if 2 * k <= n:
                inner = k
            if 2 * k >= n and outer == 0:
                outer = k
        cw = buf[(hi + 1) % n]
        ccw = buf[(lo - 1) % n]
        if cw >= ccw:
            hi += 1
            if cw < lowest:
                lowest = cw
        else:
            lo -= 1
            if ccw < lowest:
                lowest = ccw
    if inner > 0 and lo_len <= inner <= hi_len:
        return True
    return outer > 0 and lo_len <= n - outer <= hi_len


@njit(cache=True)
def _is_corner(t_ref, x, y, c3, c4, buf, ranked):
    H, W = t_ref.shape
    if x < 4 or y < 4 or x >= W - 4 or y >= H - 4:
        return False
    if _arc_test(t_ref, x, y, c3, 3, 6, buf, ranked):
        return True
    return _arc_test(t_ref, x, y, c4, 4, 8, buf, ranked)


@njit(cache=True)
def _ingest_detect_kernel(t_last, t_ref, last_pol, ts, xs, ys, ps, kappa, c3, c4, flags):
    """Ingest events in order, flagging corners. Returns (dropped, first bad index or -1)."""
    H, W = t_last.shape
    buf = np.empty(20, dtype=np.int64)
    ranked = np.empty(20, dtype=np.int64)
    dropped = 0
    for i in range(ts.shape[0]):
        x = xs[i]
        y = ys[i]
        flags[i] = False
        if x < 0 or y < 0 or x >= W or y >= H:
            dropped += 1
            continue
        if ts[i] < t_last[y, x]:
            return dropped, i
        _ingest_one(t_last, t_ref, last_pol, x, y, ts[i], ps[i], kappa)
        # events swallowed by the refractory rule carry no new structure
        if t_ref[y, x] == ts[i]:
            flags[i] = _is_corner(t_ref, x, y, c3, c4, buf, ranked)
    return dropped, -1


@njit(cache=True)
def _patch_kernel(patches, c3, c4, out):
    buf = np.empty(20, dtype=np.int64)
    ranked = np.empty(20, dtype=np.int64)
    for i in range(patches.shape[0]):
        out[i] = _is_corner(patches[i], 4, 4, c3, c4, buf, ranked)


def corner_flags_for_patches(patches: np.ndarray) -> np.ndarray:
    """Compiled corner test over a stack of 9x9 patches."""
    patches = np.ascontiguousarray(patches, dtype=np.int64)
    out = np.zeros(len(patches), dtype=np.bool_)
    _patch_kernel(patches, CIRCLE3, CIRCLE4, out)
    return out


def ingest_and_detect(tmap: TimestampMap, events: np.ndarray) -> np.ndarray:
    """Ingest a time-ordered event array into ``tmap`` and return the detected corners."""
    if len(events) == 0:
        return np.zeros(0, dtype=CORNER_DTYPE)
    ev = np.asarray(events, dtype=EVENT_DTYPE)
    flags = np.zeros(len(ev), dtype=np.bool_)
    dropped, bad = _ingest_detect_kernel(tmap.t_last, tmap.t_ref, tmap.last_polarity,
                                         ev["t"], ev["x"], ev["y"], ev["p"], tmap.kappa,
                                         CIRCLE3, CIRCLE4, flags)
    if bad >= 0:
        e = ev[bad]
        raise StreamOrderError(f"event #{bad} at t={e['t']} older than pixel "
                               f"({e['x']}, {e['y']}) t_last={tmap.t_last[e['y'], e['x']]}")
    if dropped:
        tmap._drop(int(dropped), "batch")
    tmap.latest = max(tmap.latest, int(ev["t"].max()))
    hits = ev[flags]
    out = np.zeros(len(hits), dtype=CORNER_DTYPE)
    for name in ("t", "x", "y", "p"):
        out[name] = hits[name]
    return out


def recency_filter(corners, t: int, window: int):
    """Corners with timestamp in ``[t - window, t]``, newest first.

    Accepts a ``CORNER_DTYPE`` array or a list of ``Corner``; returns the same kind.
    Ties are ordered by x then y so the output is deterministic.
    """
    if isinstance(corners, np.ndarray):
        keep = corners[(corners["t"] >= t - window) & (corners["t"] <= t)]
        order = np.lexsort((keep["y"], keep["x"], -keep["t"]))
        return keep[order]
    keep = [c for c in corners if t - window <= c.t <= t]
    return sorted(keep, key=lambda c: (-c.t, c.x, c.y))


def adaptive_window(times: np.ndarray, n_events: int, lo: int = 1_000, hi: int = 20_000) -> int:
    """Time spanned by the last ``n_events`` timestamps, clamped to ``[lo, hi]`` µs."""
    if len(times) < 2 or n_events < 2:
        return hi
    k = min(n_events, len(times))
    span = int(times[-1] - times[-k])
    return int(min(max(span, lo), hi))
