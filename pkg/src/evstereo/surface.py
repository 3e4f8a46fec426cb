"""Per-pixel timestamp maps with the refractory reference rule, and decayed time surfaces."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geometry import EVENT_DTYPE, Event, RectificationMap, _camera_index

log = logging.getLogger(__name__)

NEVER = -1  # timestamps are non-negative microseconds
DEFAULT_DELTA_US = 30_000
DEFAULT_KAPPA_US = 50_000


class StreamOrderError(ValueError):
    """An event or query time went backwards."""


@njit(cache=True, inline="always")
def _ingest_one(t_last, t_ref, last_pol, x, y, t, p, kappa):
    prev = t_last[y, x]
    if prev == NEVER or t > prev + kappa or p != last_pol[y, x]:
        t_ref[y, x] = t
    t_last[y, x] = t
    last_pol[y, x] = p


@njit(cache=True)
def _ingest_kernel(t_last, t_ref, last_pol, ts, xs, ys, ps, kappa):
    """Returns (dropped, index of first ordering violation or -1)."""
    H, W = t_last.shape
    dropped = 0
    for i in range(ts.shape[0]):
        x = xs[i]
        y = ys[i]
        if x < 0 or y < 0 or x >= W or y >= H:
            dropped += 1
            continue
        if ts[i] < t_last[y, x]:
            return dropped, i
        _ingest_one(t_last, t_ref, last_pol, x, y, ts[i], ps[i], kappa)
    return dropped, -1


class TimestampMap:
    """Latest (``t_last``) and refractory reference (``t_ref``) timestamps per pixel.

    ``t_ref`` only moves when the pixel has been silent for longer than
    ``kappa`` or the polarity flips, which suppresses burst duplicates.
    """

    def __init__(self, width: int, height: int, kappa: int = DEFAULT_KAPPA_US):
        self.width = int(width)
        self.height = int(height)
        self.kappa = int(kappa)
        self.t_last = np.full((height, width), NEVER, dtype=np.int64)
        self.t_ref = np.full((height, width), NEVER, dtype=np.int64)
        self.last_polarity = np.zeros((height, width), dtype=np.int8)
        self.latest = NEVER
        self.dropped = 0

    def copy(self) -> "TimestampMap":
        m = TimestampMap(self.width, self.height, self.kappa)
        m.t_last[:] = self.t_last
        m.t_ref[:] = self.t_ref
        m.last_polarity[:] = self.last_polarity
        m.latest = self.latest
        m.dropped = self.dropped
        return m

    def same_state(self, other: "TimestampMap") -> bool:
        return (np.array_equal(self.t_last, other.t_last)
                and np.array_equal(self.t_ref, other.t_ref)
                and np.array_equal(self.last_polarity, other.last_polarity))

    def _drop(self, n, what):
        self.dropped += n
        log.warning("dropped %d out-of-bounds event(s) (%s); %d total", n, what, self.dropped)

    def ingest(self, e: Event) -> "TimestampMap":
        x, y, t, p = int(e.x), int(e.y), int(e.t), int(e.polarity)
        if not (0 <= x < self.width and 0 <= y < self.height):
            self._drop(1, f"x={x} y={y}")
            return self
        if t < self.t_last[y, x]:
            raise StreamOrderError(
                f"event at t={t} older than pixel ({x}, {y}) t_last={self.t_last[y, x]}")
        prev = self.t_last[y, x]
        if prev == NEVER or t > prev + self.kappa or p != self.last_polarity[y, x]:
            self.t_ref[y, x] = t
        self.t_last[y, x] = t
        self.last_polarity[y, x] = p
        self.latest = max(self.latest, t)
        return self

    def ingest_array(self, events: np.ndarray) -> "TimestampMap":
        """Ingest a time-ordered structured event array (``EVENT_DTYPE``)."""
        if len(events) == 0:
            return self
        ev = np.asarray(events, dtype=EVENT_DTYPE)
        dropped, bad = _ingest_kernel(self.t_last, self.t_ref, self.last_polarity,
                                      ev["t"], ev["x"], ev["y"], ev["p"], self.kappa)
        if bad >= 0:
            e = ev[bad]
            raise StreamOrderError(
                f"event #{bad} at t={e['t']} older than pixel ({e['x']}, {e['y']}) "
                f"t_last={self.t_last[e['y'], e['x']]}")
        if dropped:
            self._drop(int(dropped), "batch")
        self.latest = max(self.latest, int(ev["t"].max()))
        return self


def ingest(tmap: TimestampMap, e: Event) -> TimestampMap:
    return tmap.ingest(e)


@dataclass(frozen=True, eq=False)
class TimeSurface:
    values: np.ndarray
    stamp: int
    delta: float
    camera: int = 0
    rectified: bool = False

    @property
    def shape(self):
        return self.values.shape

    def to_pgm_bytes(self) -> bytes:
        """Binary greyscale PGM with ``round(255 * tau)`` per pixel."""
        img = np.rint(255.0 * self.values).astype(np.uint8)
        H, W = img.shape
        return b"P5\n%d %d\n255\n" % (W, H) + img.tobytes()


def decay(t_last: np.ndarray, t: int, delta: float) -> np.ndarray:
    fired = t_last != NEVER
    out = np.zeros(t_last.shape)
    out[fired] = np.exp(-(t - t_last[fired]) / float(delta))
    return out


def render(tmap: TimestampMap, t: int, delta: float = DEFAULT_DELTA_US, camera=0) -> TimeSurface:
    """Exponential-decay time surface at query time ``t``; silent pixels are 0."""
    if t < tmap.latest:
        raise StreamOrderError(f"render at t={t} precedes latest event t={tmap.latest}")
    values = decay(tmap.t_last, int(t), delta)
    values.flags.writeable = False
    return TimeSurface(values, int(t), float(delta), _camera_index(camera), False)


def splat(values: np.ndarray, map_x: np.ndarray, map_y: np.ndarray) -> np.ndarray:
    """Forward-warp ``values`` with bilinear splatting, normalised by splatted weight."""
    H, W = values.shape
    x = map_x.ravel()
    y = map_y.ravel()
    v = values.ravel()
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    ax = x - x0
    ay = y - y0
    acc = np.zeros(H * W)
    wsum = np.zeros(H * W)
    for dx, dy, w in ((0, 0, (1 - ax) * (1 - ay)), (1, 0, ax * (1 - ay)),
                      (0, 1, (1 - ax) * ay), (1, 1, ax * ay)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H) & (w > 0)
        idx = yi[ok] * W + xi[ok]
        acc += np.bincount(idx, weights=w[ok] * v[ok], minlength=H * W)
        wsum += np.bincount(idx, weights=w[ok], minlength=H * W)
    out = np.zeros(H * W)
    hit = wsum > 0
    out[hit] = acc[hit] / wsum[hit]
    return np.clip(out, 0.0, 1.0).reshape(H, W)


def render_rectified(tmap: TimestampMap, t: int, delta: float, rmap: RectificationMap,
                     camera=0) -> TimeSurface:
    raw = render(tmap, t, delta, camera)
    i = raw.camera
    if rmap.identity[i]:
        return TimeSurface(raw.values, raw.stamp, raw.delta, i, True)
    values = splat(raw.values, rmap.map_x[i], rmap.map_y[i])
    values.flags.writeable = False
    return TimeSurface(values, raw.stamp, raw.delta, i, True)
