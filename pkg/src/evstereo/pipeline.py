"""Event-count-driven stereo odometry loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector import CORNER_DTYPE, adaptive_window, ingest_and_detect, recency_filter
from .geometry import EVENT_DTYPE, Pose, PoseIntegrator, RectificationMap, StereoRig
from .matcher import FeatureSet, MatchParams, match_circular, quad_arrays
from .pose import EstimationFailure, ransac_estimate, triangulate_points
from .surface import (DEFAULT_DELTA_US, DEFAULT_KAPPA_US, StreamOrderError, TimeSurface,
                      TimestampMap, render_rectified)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    N: int = 10_000
    max_interval: int = 1_000_000  # µs
    delta: float = DEFAULT_DELTA_US
    kappa: int = DEFAULT_KAPPA_US
    W: int = 5
    zncc_min: float = 0.8
    seed: int = 0
    ransac_iterations: int = 50
    sample_size: int = 3
    inlier_threshold: float = 2.0
    min_inliers: int = 6
    epipolar_tol: float = 1.0
    d_min: float = 0.5
    d_max: float | None = None  # defaults to width / 4
    z_max: float = 100.0
    search_radius: float = 15.0
    close_tol: float = 1.0
    window_min: int = 1_000
    window_max: int = 20_000
    dump_surfaces: str | None = None

    def __post_init__(self):
        if self.N <= 0 or self.max_interval <= 0:
            raise ValueError("N and max_interval must be positive")
        for name in ("delta", "kappa", "W", "inlier_threshold", "epipolar_tol", "d_min",
                     "z_max", "search_radius", "ransac_iterations", "sample_size"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.W % 2 == 0:
            raise ValueError("W must be odd")

    def match_params(self, width: int) -> MatchParams:
        return MatchParams(self.zncc_min, self.epipolar_tol,
                           self.d_max if self.d_max is not None else width / 4,
                           self.search_radius, self.close_tol)


@dataclass(frozen=True, eq=False)
class TrajectoryEntry:
    stamp: int
    pose: Pose  # camera-to-world of the left camera
    failed: bool = False
    reason: str = "origin"  # origin | count | interval | flush
    matches: int = 0
    inliers: int = 0

    @property
    def low_event(self) -> bool:
        return self.reason == "interval"


@dataclass(eq=False)
class PipelineState:
    maps: tuple
    prev_surfaces: tuple = (None, None)
    prev_features: tuple = (None, None)
    prev_stamp: int | None = None
    corners: list = field(default_factory=lambda: [[], []])
    trajectory: list = field(default_factory=list)
    left_since: int = 0
    dropped: int = 0
    failed: int = 0
    estimates: int = 0


def _check_order(ev: np.ndarray, last_t: int | None, name: str, offset: int):
    if len(ev) == 0:
        return
    t = ev["t"]
    if last_t is not None and t[0] < last_t:
        raise StreamOrderError(f"{name} stream: event #{offset} at t={t[0]} precedes t={last_t}")
    bad = np.flatnonzero(np.diff(t) < 0)
    if len(bad):
        i = int(bad[0]) + 1
        raise StreamOrderError(f"{name} stream: event #{offset + i} at t={t[i]} "
                               f"precedes t={t[i - 1]}")


class Odometry:
    """Stateful odometry over two time-ordered event streams.

    Feed events with :meth:`step` (each call carries both streams up to a common
    time horizon) and call :meth:`finish` at the end of the data.
    """

    def __init__(self, rig: StereoRig, config: PipelineConfig = PipelineConfig(),
                 rmap: RectificationMap | None = None):
        self.rig = rig
        self.config = config
        self.rmap = rmap if rmap is not None else RectificationMap.from_rig(rig)
        self.cam = self.rmap.camera
        self.params = config.match_params(self.cam.width)
        self.rng = np.random.default_rng(config.seed)
        W, H = rig.left.width, rig.left.height
        self.state = PipelineState(maps=(TimestampMap(W, H, config.kappa),
                                         TimestampMap(W, H, config.kappa)))
        self.integrator = PoseIntegrator()
        self._pending = [np.zeros(0, EVENT_DTYPE), np.zeros(0, EVENT_DTYPE)]
        self._consumed = [0, 0]
        self._last_t = [None, None]
        self._horizon = None
        self._recent_left = np.zeros(0, dtype=np.int64)
        if config.dump_surfaces:
            Path(config.dump_surfaces).mkdir(parents=True, exist_ok=True)

    @property
    def trajectory(self) -> list[TrajectoryEntry]:
        return self.state.trajectory

    # -- stream handling ----------------------------------------------------

    def step(self, left: np.ndarray, right: np.ndarray) -> list[TrajectoryEntry]:
        """Consume the next events of both streams; returns poses emitted by this call."""
        new = []
        for i, (ev, name) in enumerate(((left, "left"), (right, "right"))):
            ev = np.asarray(ev, dtype=EVENT_DTYPE)
            _check_order(ev, self._last_t[i], name, self._consumed[i] + len(self._pending[i]))
            if len(ev):
                self._last_t[i] = int(ev["t"][-1])
                self._horizon = max(self._horizon or 0, self._last_t[i])
                self._pending[i] = np.concatenate([self._pending[i], ev]) if len(self._pending[i]) else ev
        st = self.state
        if st.prev_stamp is None:
            firsts = [int(p["t"][0]) for p in self._pending if len(p)]
            if not firsts:
                return new
            self._start(min(firsts))
            new.append(st.trajectory[-1])
        N = self.config.N
        while True:
            pl, pr = self._pending
            deadline = st.prev_stamp + self.config.max_interval
            need = N - st.left_since
            cand = None
            if len(pl) >= need:
                idx = need - 1
                if pl["t"][idx] <= st.prev_stamp:
                    idx = max(idx, int(np.searchsorted(pl["t"], st.prev_stamp, side="right")))
                if idx < len(pl):
                    cand = int(pl["t"][idx])
            if cand is not None and cand <= deadline:
                n_right = int(np.searchsorted(pr["t"], cand, side="left"))
                new.append(self._slice(idx + 1, n_right, cand, "count"))
            elif self._horizon is not None and self._horizon >= deadline:
                n_left = int(np.searchsorted(pl["t"], deadline, side="right"))
                n_right = int(np.searchsorted(pr["t"], deadline, side="right"))
                new.append(self._slice(n_left, n_right, deadline, "interval"))
            else:
                break
        return new

    def finish(self) -> list[TrajectoryEntry]:
        """Flush events left after the last full slice."""
        st = self.state
        pl, pr = self._pending
        if st.prev_stamp is None or (len(pl) == 0 and len(pr) == 0):
            return []
        t = max(int(p["t"][-1]) for p in (pl, pr) if len(p))
        if t <= st.prev_stamp:
            self._ingest(len(pl), len(pr))
            return []
        return [self._slice(len(pl), len(pr), t, "flush")]

    def _start(self, t0: int):
        st = self.state
        st.prev_stamp = t0
        W, H = self.cam.width, self.cam.height
        empty = np.zeros((H, W))
        empty.flags.writeable = False
        st.prev_surfaces = tuple(TimeSurface(empty, t0, self.config.delta, i, True) for i in (0, 1))
        st.prev_features = (FeatureSet.empty(self.config.W), FeatureSet.empty(self.config.W))
        self.integrator = PoseIntegrator(Pose.identity(t0))
        st.trajectory.append(TrajectoryEntry(t0, Pose.identity(t0)))

    def _ingest(self, n_left: int, n_right: int):
        st = self.state
        for i, n in enumerate((n_left, n_right)):
            if n == 0:
                continue
            ev = self._pending[i][:n]
            self._pending[i] = self._pending[i][n:]
            self._consumed[i] += n
            st.corners[i].append(ingest_and_detect(st.maps[i], ev))
            if i == 0:
                st.left_since += n
                keep = max(self.config.N // 10, 2)
                self._recent_left = np.concatenate([self._recent_left, ev["t"][-keep:]])[-keep:]
        st.dropped = st.maps[0].dropped + st.maps[1].dropped

    def _slice(self, n_left: int, n_right: int, t: int, reason: str) -> TrajectoryEntry:
        self._ingest(n_left, n_right)
        return self._estimate(t, reason)

    # -- estimation ---------------------------------------------------------

    def _features(self, cam: int, surface: TimeSurface, t: int, window: int) -> FeatureSet:
        st = self.state
        parts = st.corners[cam]
        corners = np.concatenate(parts) if parts else np.zeros(0, CORNER_DTYPE)
        corners = recency_filter(corners, t, window)
        # one corner per pixel: the newest
        _, first = np.unique(corners["y"].astype(np.int64) * self.cam.width + corners["x"],
                             return_index=True)
        corners = corners[np.sort(first)]
        raw = np.column_stack([corners["x"], corners["y"]]).astype(float)
        xy, ok = self.rmap.rectify_points(raw, cam) if len(raw) else (raw, np.zeros(0, bool))
        return FeatureSet.build(surface, xy[ok], corners["t"][ok], self.config.W)

    def _estimate(self, t: int, reason: str) -> TrajectoryEntry:
        """One pose update at time ``t``; every slice, the first included, runs through here."""
        st, cfg = self.state, self.config
        window = adaptive_window(self._recent_left, cfg.N // 10, cfg.window_min, cfg.window_max)
        surfaces = tuple(render_rectified(st.maps[i], t, cfg.delta, self.rmap, i) for i in (0, 1))
        feats = tuple(self._features(i, surfaces[i], t, window) for i in (0, 1))
        quads = match_circular(feats[0], feats[1], st.prev_features[0], st.prev_features[1],
                               self.params)
        increment, failed, inliers = Pose.identity(t), True, 0
        try:
            increment, inliers = self._solve(quads)
            failed = False
        except EstimationFailure as exc:
            log.debug("estimate at t=%d failed: %s", t, exc)
        pose = self.integrator.push(increment.inverse().with_stamp(t)).with_stamp(t)
        entry = TrajectoryEntry(t, pose, failed, reason, len(quads), inliers)
        st.trajectory.append(entry)
        st.estimates += 1
        st.failed += int(failed)
        if cfg.dump_surfaces:
            self._dump(surfaces, st.estimates)
        st.prev_surfaces = surfaces
        st.prev_features = feats
        st.prev_stamp = t
        st.corners = [[], []]
        st.left_since = 0
        log.debug("t=%d %s quads=%d inliers=%d failed=%s", t, reason, len(quads), inliers, failed)
        return entry

    def _solve(self, quads):
        cfg = self.config
        if len(quads) < cfg.sample_size:
            raise EstimationFailure(f"{len(quads)} circular matches")
        left, right, left_prev, right_prev = quad_arrays(quads)
        X, ok = triangulate_points(left_prev, right_prev, self.cam, cfg.d_min, cfg.z_max)
        for q, x, good in zip(quads, X, ok):
            q.depth = float(x[2]) if good else float("nan")
        est = ransac_estimate(X[ok], left[ok], right[ok], self.cam, self.rng,
                              cfg.ransac_iterations, cfg.sample_size, cfg.inlier_threshold,
                              cfg.min_inliers)
        return est.pose, len(est.inliers)

    def _dump(self, surfaces, k: int):
        out = Path(self.config.dump_surfaces)
        for s, name in zip(surfaces, ("left", "right")):
            (out / f"{name}_{k:06d}.pgm").write_bytes(s.to_pgm_bytes())


def run(config: PipelineConfig, rig: StereoRig, left: np.ndarray, right: np.ndarray,
        rmap: RectificationMap | None = None) -> list[TrajectoryEntry]:
    """Full odometry over two event arrays; the first pose is identity at the first event."""
    odo = Odometry(rig, config, rmap)
    odo.step(left, right)
    odo.finish()
    st = odo.state
    log.info("%d estimates, %d failed, %d dropped events", st.estimates, st.failed, st.dropped)
    return odo.trajectory
