"""Time-surface descriptors, ZNCC scoring, stereo and four-surface circular matching."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import bilinear
from .surface import TimeSurface

DEFAULT_WINDOW = 5
DEFAULT_ZNCC_MIN = 0.8


@dataclass(frozen=True, eq=False)
class Descriptor:
    values: np.ndarray
    center: tuple
    W: int = DEFAULT_WINDOW


def _offsets(W: int):
    r = W // 2
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    return dx.ravel().astype(float), dy.ravel().astype(float)


def window_fits(shape, x, y, W: int):
    H, Wd = shape
    r = W // 2
    return (x - r >= 0) & (x + r <= Wd - 1) & (y - r >= 0) & (y + r <= H - 1)


def describe(surface: TimeSurface, p, W: int = DEFAULT_WINDOW) -> Descriptor | None:
    """Bilinear samples of ``surface`` on the W x W grid centred at ``p``; None at the border."""
    if W % 2 == 0:
        raise ValueError("descriptor window must be odd")
    x, y = float(p[0]), float(p[1])
    if not window_fits(surface.shape, x, y, W):
        return None
    dx, dy = _offsets(W)
    vals = bilinear(surface.values, x + dx, y + dy)
    return Descriptor(np.clip(vals, 0.0, 1.0), (x, y), W)


def describe_many(surface: TimeSurface, pts: np.ndarray, W: int = DEFAULT_WINDOW):
    """Descriptors for (n, 2) points; returns (n, W*W) values and a validity mask."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 2)
    ok = window_fits(surface.shape, pts[:, 0], pts[:, 1], W)
    out = np.zeros((len(pts), W * W))
    if ok.any():
        dx, dy = _offsets(W)
        xs = pts[ok, 0:1] + dx[None, :]
        ys = pts[ok, 1:2] + dy[None, :]
        out[ok] = np.clip(bilinear(surface.values, xs, ys), 0.0, 1.0)
    return out, ok


def _as_values(d):
    return np.asarray(d.values if isinstance(d, Descriptor) else d, dtype=float)


def normalize_rows(D: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-norm rows; zero-variance rows become all zeros."""
    D = np.atleast_2d(np.asarray(D, dtype=float))
    Z = D - D.mean(axis=1, keepdims=True)
    norm = np.sqrt((Z * Z).sum(axis=1))
    scale = np.abs(D).max(axis=1) * 1e-9 * np.sqrt(D.shape[1])
    flat = norm <= scale
    norm[flat] = 1.0
    Z = Z / norm[:, None]
    Z[flat] = 0.0
    return Z


def zncc(a, b) -> float:
    a = _as_values(a)
    b = _as_values(b)
    if a.shape != b.shape:
        raise ValueError("descriptor lengths differ")
    za, zb = normalize_rows(np.stack([a, b]))
    return float(np.clip(za @ zb, -1.0, 1.0))


def zncc_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if len(A) == 0 or len(B) == 0:
        return np.zeros((len(A), len(B)))
    return np.clip(normalize_rows(A) @ normalize_rows(B).T, -1.0, 1.0)


@dataclass(frozen=True, eq=False)
class FeatureSet:
    """Corners of one surface: rectified positions, timestamps and descriptors."""

    xy: np.ndarray  # (n, 2) rectified
    t: np.ndarray  # (n,) µs
    desc: np.ndarray  # (n, W*W)

    def __len__(self):
        return len(self.xy)

    @classmethod
    def empty(cls, W: int = DEFAULT_WINDOW) -> "FeatureSet":
        return cls(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), np.zeros((0, W * W)))

    @classmethod
    def build(cls, surface: TimeSurface, xy, t, W: int = DEFAULT_WINDOW) -> "FeatureSet":
        """Describe ``xy`` on ``surface``; points whose window leaves the image are discarded.

        Features are ordered by timestamp (newest first), then x, then y.
        """
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        t = np.asarray(t, dtype=np.int64).reshape(-1)
        desc, ok = describe_many(surface, xy, W)
        xy, t, desc = xy[ok], t[ok], desc[ok]
        order = np.lexsort((xy[:, 1], xy[:, 0], -t))
        return cls(xy[order], t[order], desc[order])


@dataclass(frozen=True)
class MatchParams:
    zncc_min: float = DEFAULT_ZNCC_MIN
    epipolar_tol: float = 1.0
    d_max: float = 86.5  # width / 4 for a 346 px sensor; pipeline sets it from the rig
    search_radius: float = 15.0
    close_tol: float = 1.0


@dataclass(eq=False)
class QuadMatch:
    """One feature followed through L(t), R(t), R(t - dt) and L(t - dt)."""

    left: np.ndarray
    right: np.ndarray
    right_prev: np.ndarray
    left_prev: np.ndarray
    scores: np.ndarray
    depth: float = float("nan")
    index: tuple = field(default=(), repr=False)


def _pick_best(S: np.ndarray, valid: np.ndarray, cost: np.ndarray):
    """Per-row argmax of S over valid entries; ties go to smaller ``cost`` then lower index.

    Returns best column per row (-1 if none) and the corresponding score.
    """
    masked = np.where(valid, S, -np.inf)
    if masked.shape[1] == 0:
        return np.full(masked.shape[0], -1), np.full(masked.shape[0], -np.inf)
    top = masked.max(axis=1)
    tied = valid & (masked == top[:, None])
    tie_cost = np.where(tied, cost, np.inf)
    best = np.argmin(tie_cost, axis=1)
    best[~np.isfinite(top)] = -1
    return best, top


def stereo_constraints(left_xy, right_xy, params: MatchParams):
    dy = np.abs(left_xy[:, None, 1] - right_xy[None, :, 1])
    disp = left_xy[:, None, 0] - right_xy[None, :, 0]
    return (dy <= params.epipolar_tol) & (disp > 0) & (disp <= params.d_max), disp


def temporal_constraints(src_xy, dst_xy, params: MatchParams):
    dist = np.hypot(src_xy[:, None, 0] - dst_xy[None, :, 0], src_xy[:, None, 1] - dst_xy[None, :, 1])
    return dist <= params.search_radius, dist


def best_links(src: FeatureSet, dst: FeatureSet, params: MatchParams, stereo: bool,
               S: np.ndarray | None = None, src_is_left: bool = True):
    """Best-scoring ``dst`` index for each ``src`` feature under the geometric constraints."""
    if S is None:
        S = zncc_matrix(src.desc, dst.desc)
    if stereo:
        if src_is_left:
            valid, disp = stereo_constraints(src.xy, dst.xy, params)
        else:
            valid, disp = stereo_constraints(dst.xy, src.xy, params)
            valid, disp = valid.T, disp.T
        cost = disp
    else:
        valid, cost = temporal_constraints(src.xy, dst.xy, params)
    valid = valid & (S >= params.zncc_min)
    return _pick_best(S, valid, cost)


def match_stereo(left: FeatureSet, right: FeatureSet, params: MatchParams = MatchParams(),
                 S: np.ndarray | None = None):
    """Mutual-best stereo pairs ``(i_left, j_right, score)`` in left-feature order."""
    if S is None:
        S = zncc_matrix(left.desc, right.desc)
    l2r, score = best_links(left, right, params, True, S, src_is_left=True)
    r2l, _ = best_links(right, left, params, True, S.T, src_is_left=False)
    pairs = []
    for i, j in enumerate(l2r):
        if j >= 0 and r2l[j] == i:
            pairs.append((i, int(j), float(score[i])))
    return pairs


def match_circular(cur_left: FeatureSet, cur_right: FeatureSet, prev_left: FeatureSet,
                   prev_right: FeatureSet, params: MatchParams = MatchParams()) -> list[QuadMatch]:
    """Close the loop L(t) -> R(t) -> R(t-dt) -> L(t-dt) -> L(t) for every stereo match."""
    if min(len(cur_left), len(cur_right), len(prev_left), len(prev_right)) == 0:
        return []
    pairs = match_stereo(cur_left, cur_right, params)
    if not pairs:
        return []
    r_t, r_score = best_links(cur_right, prev_right, params, False)
    rp_l, rp_score = best_links(prev_right, prev_left, params, True, src_is_left=False)
    lp_l, lp_score = best_links(prev_left, cur_left, params, False)
    out = []
    for i, j, s0 in pairs:
        k = r_t[j]
        if k < 0:
            continue
        m = rp_l[k]
        if m < 0:
            continue
        back = lp_l[m]
        if back < 0:
            continue
        if np.hypot(*(cur_left.xy[back] - cur_left.xy[i])) > params.close_tol:
            continue
        scores = np.array([s0, r_score[j], rp_score[k], lp_score[m]])
        q = QuadMatch(cur_left.xy[i].copy(), cur_right.xy[j].copy(), prev_right.xy[k].copy(),
                      prev_left.xy[m].copy(), scores, index=(i, j, int(k), int(m)))
        check_quad(q, params)
        out.append(q)
    return out


def check_quad(q: QuadMatch, params: MatchParams):
    for l, r in ((q.left, q.right), (q.left_prev, q.right_prev)):
        assert abs(l[1] - r[1]) <= params.epipolar_tol, "quad match breaks the epipolar band"
        assert l[0] - r[0] > 0, "quad match with non-positive disparity"


def quad_arrays(quads: list[QuadMatch]):
    """Stack quad matches into (n, 2) arrays: left, right, left_prev, right_prev."""
    if not quads:
        z = np.zeros((0, 2))
        return z, z, z, z
    return (np.array([q.left for q in quads]), np.array([q.right for q in quads]),
            np.array([q.left_prev for q in quads]), np.array([q.right_prev for q in quads]))
