"""Geometric stereo event generator: a rig moving through a 3D wireframe scene.

Events come from edge crossings rather than photometric simulation. A pixel
fires when its distance to the nearest projected scene segment drops below
one pixel. Ground-truth poses and junction tracks come out alongside the streams.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .geometry import EVENT_DTYPE, Pose, StereoRig, compose, so3_exp, so3_log

log = logging.getLogger(__name__)

MAX_STEP_US = 200
BAND = 1.25  # rasterised distance band (px); only crossings of 1 px matter
Z_NEAR = 0.05


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ConstantVelocityTrajectory:
    """Piecewise-constant-velocity camera-to-world poses through keyframes (µs stamps)."""

    stamps: np.ndarray
    poses: tuple

    def __post_init__(self):
        stamps = np.asarray(self.stamps, dtype=np.int64)
        if len(stamps) != len(self.poses) or len(stamps) < 1:
            raise ScenarioError("keyframe stamps and poses must match")
        if np.any(np.diff(stamps) <= 0):
            raise ScenarioError("keyframe stamps must increase")
        object.__setattr__(self, "stamps", stamps)
        object.__setattr__(self, "poses", tuple(self.poses))

    @property
    def duration_us(self) -> int:
        return int(self.stamps[-1] - self.stamps[0])

    def pose_at(self, t_us) -> Pose:
        t = float(t_us)
        i = int(np.clip(np.searchsorted(self.stamps, t, side="right") - 1, 0, len(self.stamps) - 2))
        if len(self.stamps) == 1:
            return self.poses[0].with_stamp(int(t_us))
        a, b = self.poses[i], self.poses[i + 1]
        s = (t - self.stamps[i]) / (self.stamps[i + 1] - self.stamps[i])
        s = min(max(s, 0.0), 1.0)
        dR = so3_exp(s * so3_log(a.R.T @ b.R))
        return Pose(a.R @ dR, (1 - s) * a.t + s * b.t, int(t_us))

    def poses_at(self, stamps) -> list[Pose]:
        return [self.pose_at(t) for t in stamps]


@dataclass(frozen=True, eq=False)
class Scenario:
    segments: np.ndarray  # (m, 2, 3) world metres
    junctions: np.ndarray  # (j, 3)
    trajectory: ConstantVelocityTrajectory
    rig: StereoRig
    events_per_edge_crossing: int = 1
    jitter_us: float = 0.0
    jitter_px: float = 0.0
    spurious_rate: float = 0.0  # events / px / s
    dt_us: int = MAX_STEP_US
    burst_spacing_us: int = 1
    name: str = "custom"

    @property
    def duration_us(self) -> int:
        return self.trajectory.duration_us


@dataclass(eq=False)
class SynthOutput:
    left: np.ndarray
    right: np.ndarray
    stamps: np.ndarray  # every simulation step
    poses: list  # camera-to-world at every step
    scenario: Scenario = field(repr=False)

    def tracks(self, stamps, cam: str = "left"):
        """Junction projections (j, n, 2) and in-front mask at the given stamps."""
        return junction_tracks(self.scenario, stamps, cam)


# ---------------------------------------------------------------------------
# scenes


def corridor_segments(width=3.0, height=3.0, length=20.0, spacing=1.0, z0=0.0, frame_every=2,
                      brace=0.5, marks=4, mark=0.12, seed=1):
    """Square frames down +z with a shrunken X brace and a few small crosses on every wall panel.

    Frames appear every ``frame_every`` panels. Each brace is scaled by ``brace`` about the
    panel centre so its ends are free line endings, and each panel carries ``marks`` crosses
    of half-length ``mark`` m at seeded random positions and angles. Junctions are the frame
    corners, the brace centres and ends, and the cross centres and ends.
    """
    rng = np.random.default_rng(seed)
    hx, hy = width / 2, height / 2
    zs = z0 + np.arange(0.0, length + 1e-9, spacing)
    corners = [(-hx, -hy), (hx, -hy), (hx, hy), (-hx, hy)]
    up = np.array([0.0, 0.0, 1.0])
    segs, junctions = [], []
    for i, z in enumerate(zs):
        if i % frame_every == 0:
            for a, b in zip(corners, corners[1:] + corners[:1]):
                segs.append([(a[0], a[1], z), (b[0], b[1], z)])
            junctions.extend((cx, cy, z) for cx, cy in corners)
    for z1, z2 in zip(zs[:-1], zs[1:]):
        for a, b in zip(corners, corners[1:] + corners[:1]):
            a1, b1 = np.array((a[0], a[1], z1)), np.array((b[0], b[1], z1))
            a2, b2 = np.array((a[0], a[1], z2)), np.array((b[0], b[1], z2))
            c = (a1 + b2) / 2
            if brace > 0:
                for p, q in ((a1, b2), (b1, a2)):
                    P, Q = c + (p - c) * brace, c + (q - c) * brace
                    segs.append([P, Q])
                    junctions.extend([P, Q])
                junctions.append(c)
            u = (b1 - a1) / np.linalg.norm(b1 - a1)
            for _ in range(marks):
                s, w = rng.uniform(0.1, 0.9, 2)
                m = a1 + (b1 - a1) * s + up * (w * (z2 - z1))
                ang = rng.uniform(0, np.pi / 2)
                d1 = np.cos(ang) * u + np.sin(ang) * up
                d2 = -np.sin(ang) * u + np.cos(ang) * up
                for d in (d1, d2):
                    segs.append([m - d * mark, m + d * mark])
                    junctions.extend([m - d * mark, m + d * mark])
                junctions.append(m)
    return np.array(segs, dtype=float), np.array(junctions, dtype=float)


def street_segments(half_width=6.0, height=8.0, length=120.0, spacing=4.0, z0=0.0):
    """Building facades on both sides: window grids with crossings every ``spacing`` m."""
    segs, junctions = [], []
    zs = z0 + np.arange(0.0, length + 1e-9, spacing)
    levels = np.arange(-height + 1.5, 1.5 + 1e-9, 2.0)
    for x in (-half_width, half_width):
        for y in levels:
            segs.append([(x, y, zs[0]), (x, y, zs[-1])])
        for z in zs:
            segs.append([(x, levels[0], z), (x, levels[-1], z)])
            junctions.extend((x, y, z) for y in levels)
    return np.array(segs, dtype=float), np.array(junctions, dtype=float)


def straight_line_trajectory(start, direction, speed: float, duration_s: float,
                             R=None) -> ConstantVelocityTrajectory:
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    R = np.eye(3) if R is None else R
    start = np.asarray(start, dtype=float)
    end = start + direction * speed * duration_s
    T = int(round(duration_s * 1e6))
    return ConstantVelocityTrajectory(np.array([0, T]), (Pose(R, start, 0), Pose(R, end, T)))


def static_trajectory(position, duration_s: float, R=None) -> ConstantVelocityTrajectory:
    T = int(round(duration_s * 1e6))
    R = np.eye(3) if R is None else R
    p = Pose(R, position, 0)
    return ConstantVelocityTrajectory(np.array([0, T]), (p, p.with_stamp(T)))


MVSEC_LIKE = dict(f=226.0, width=346, height=260, baseline=0.10)
DSEC_LIKE = dict(f=560.0, width=640, height=480, baseline=0.60)


def corridor_scenario(distance: float = 10.0, speed: float = 5.0, offset=(0.25, 0.15),
                      static: bool = False, duration_s: float | None = None, **kw) -> Scenario:
    """Rig flying down a 3 x 3 x 20 m textured corridor (MVSEC-like stereo camera)."""
    segs, junc = corridor_segments()
    rig = StereoRig.ideal(**MVSEC_LIKE)
    start = (offset[0], offset[1], -1.0)
    if static:
        traj = static_trajectory(start, duration_s or 1.0)
    else:
        traj = straight_line_trajectory(start, (0, 0, 1), speed, duration_s or distance / speed)
    return Scenario(segs, junc, traj, rig, name="corridor", **kw)


def street_scenario(distance: float = 30.0, speed: float = 10.0, duration_s: float | None = None,
                    **kw) -> Scenario:
    """Car-like forward motion between facades (DSEC-like stereo camera)."""
    segs, junc = street_segments()
    rig = StereoRig.ideal(**DSEC_LIKE)
    traj = straight_line_trajectory((0.0, 0.0, -2.0), (0, 0, 1), speed, duration_s or distance / speed)
    return Scenario(segs, junc, traj, rig, name="street", **kw)


SCENARIOS = {"corridor": corridor_scenario, "street": street_scenario}


# ---------------------------------------------------------------------------
# generation


@njit(cache=True)
def _seg_dist(px, py, ax, ay, bx, by):
    dx = bx - ax
    dy = by - ay
    L2 = dx * dx + dy * dy
    s = 0.0
    if L2 > 0:
        s = ((px - ax) * dx + (py - ay) * dy) / L2
        if s < 0:
            s = 0.0
        elif s > 1:
            s = 1.0
    qx = ax + s * dx - px
    qy = ay + s * dy - py
    return np.sqrt(qx * qx + qy * qy)


@njit(cache=True)
def _rasterize(segs, R, t, f, cu, cv, W, H, dist, side, touched):
    """Min distance to the projected segments within BAND; returns touched count."""
    n_touched = 0
    big = 1e30
    A = np.empty(3)
    B = np.empty(3)
    for m in range(segs.shape[0]):
        for i in range(3):
            A[i] = R[i, 0] * segs[m, 0, 0] + R[i, 1] * segs[m, 0, 1] + R[i, 2] * segs[m, 0, 2] + t[i]
            B[i] = R[i, 0] * segs[m, 1, 0] + R[i, 1] * segs[m, 1, 1] + R[i, 2] * segs[m, 1, 2] + t[i]
        if A[2] < Z_NEAR and B[2] < Z_NEAR:
            continue
        if A[2] < Z_NEAR:
            s = (Z_NEAR - A[2]) / (B[2] - A[2])
            for i in range(3):
                A[i] = A[i] + s * (B[i] - A[i])
        elif B[2] < Z_NEAR:
            s = (Z_NEAR - B[2]) / (A[2] - B[2])
            for i in range(3):
                B[i] = B[i] + s * (A[i] - B[i])
        ax = f * A[0] / A[2] + cu
        ay = f * A[1] / A[2] + cv
        bx = f * B[0] / B[2] + cu
        by = f * B[1] / B[2] + cv
        if max(ax, bx) < -BAND or min(ax, bx) > W - 1 + BAND:
            continue
        if max(ay, by) < -BAND or min(ay, by) > H - 1 + BAND:
            continue
        dx = bx - ax
        dy = by - ay
        L2 = dx * dx + dy * dy
        if L2 < 1e-18:
            continue
        inv_len = 1.0 / np.sqrt(L2)
        nx = -dy * inv_len
        ny = dx * inv_len
        sx = dx / L2
        y0 = max(0, int(np.floor(min(ay, by) - BAND)))
        y1 = min(H - 1, int(np.ceil(max(ay, by) + BAND)))
        for y in range(y0, y1 + 1):
            # parameter range of segment points within BAND rows of y
            if abs(dy) > 1e-12:
                s0 = (y - BAND - ay) / dy
                s1 = (y + BAND - ay) / dy
                if s0 > s1:
                    s0, s1 = s1, s0
                s0 = max(s0, 0.0)
                s1 = min(s1, 1.0)
                if s0 > s1:
                    continue
            else:
                if abs(y - ay) > BAND:
                    continue
                s0 = 0.0
                s1 = 1.0
            xa = ax + s0 * dx
            xb = ax + s1 * dx
            x0 = max(0, int(np.floor(min(xa, xb) - BAND)))
            x1 = min(W - 1, int(np.ceil(max(xa, xb) + BAND)))
            # s and signed line distance are affine in x along the row
            s_row = (-ax * dx + (y - ay) * dy) / L2
            n_row = -ax * nx + (y - ay) * ny
            for x in range(x0, x1 + 1):
                sp = s_row + x * sx
                if 0.0 <= sp <= 1.0:
                    sd = n_row + x * nx
                    d = abs(sd)
                else:
                    d = _seg_dist(float(x), float(y), ax, ay, bx, by)
                    sd = n_row + x * nx
                if d < BAND and d < dist[y, x]:
                    if dist[y, x] >= big:
                        touched[n_touched, 0] = y
                        touched[n_touched, 1] = x
                        n_touched += 1
                    dist[y, x] = d
                    side[y, x] = 1 if sd >= 0 else -1
    return n_touched


@njit(cache=True)
def _generate_kernel(segs, Rs, ts, stamps, f, cu, cv, W, H, out_t, out_x, out_y, out_p, out_rate):
    """Edge-crossing events for one camera over all steps. Returns the event count."""
    big = 1e30
    dist_prev = np.full((H, W), big)
    dist_cur = np.full((H, W), big)
    side = np.zeros((H, W), dtype=np.int8)
    touched_prev = np.empty((H * W, 2), dtype=np.int64)
    touched_cur = np.empty((H * W, 2), dtype=np.int64)
    n_prev = 0
    count = 0
    cap = out_t.shape[0]
    for k in range(stamps.shape[0]):
        n_cur = _rasterize(segs, Rs[k], ts[k], f, cu, cv, W, H, dist_cur, side, touched_cur)
        for i in range(n_cur):
            y = touched_cur[i, 0]
            x = touched_cur[i, 1]
            d1 = dist_cur[y, x]
            d0 = dist_prev[y, x]
            if d1 < 1.0 and d0 >= 1.0:
                if k == 0 or d0 >= big:
                    tt = float(stamps[k])
                    rate = 0.0
                else:
                    dt = float(stamps[k] - stamps[k - 1])
                    tt = stamps[k - 1] + (d0 - 1.0) / (d0 - d1) * dt
                    rate = (d0 - d1) / dt
                if count < cap:
                    out_t[count] = tt
                    out_x[count] = x
                    out_y[count] = y
                    out_p[count] = side[y, x]
                    out_rate[count] = rate
                count += 1
        # reset previous buffer and swap
        for i in range(n_prev):
            dist_prev[touched_prev[i, 0], touched_prev[i, 1]] = big
        dist_prev, dist_cur = dist_cur, dist_prev
        touched_prev, touched_cur = touched_cur, touched_prev
        n_prev = n_cur
    return count


def _camera_poses(sc: Scenario, stamps):
    """World-to-camera rotations/translations for left and right at every stamp."""
    world_T_left = sc.trajectory.poses_at(stamps)
    ext = sc.rig.extrinsic
    out = []
    for which in ("left", "right"):
        Rs = np.empty((len(stamps), 3, 3))
        ts = np.empty((len(stamps), 3))
        for k, p in enumerate(world_T_left):
            inv = p.inverse()
            if which == "right":
                inv = compose(ext, inv)
            Rs[k] = inv.R
            ts[k] = inv.t
        out.append((Rs, ts))
    return world_T_left, out


def _raster_events(sc: Scenario, cam, Rs, ts, stamps):
    W, H = cam.width, cam.height
    cap = 1 << 22
    while True:
        out_t = np.empty(cap)
        out_x = np.empty(cap, dtype=np.int32)
        out_y = np.empty(cap, dtype=np.int32)
        out_p = np.empty(cap, dtype=np.int8)
        out_rate = np.empty(cap)
        n = _generate_kernel(sc.segments, Rs, ts, stamps.astype(np.int64), cam.fx, cam.cu, cam.cv,
                             W, H, out_t, out_x, out_y, out_p, out_rate)
        if n <= cap:
            return out_t[:n], out_x[:n], out_y[:n], out_p[:n], out_rate[:n]
        cap = int(n * 1.05) + 16


def validate(sc: Scenario):
    if sc.duration_us <= 0:
        raise ScenarioError("duration must be positive")
    for cam in (sc.rig.left, sc.rig.right):
        if any(cam.distortion):
            raise ScenarioError("the generator needs an undistorted rig")
        if cam.fx != cam.fy:
            raise ScenarioError("the generator needs square pixels")
    if not 0 < sc.dt_us <= MAX_STEP_US:
        raise ScenarioError(f"time step must be in (0, {MAX_STEP_US}] µs")
    probe = np.linspace(0, sc.duration_us, 21).astype(np.int64)
    visible = []
    for t in probe:
        uv, ok = junction_tracks(sc, [t], "left")
        visible.append(bool(ok[:, 0].any()))
    if np.mean(visible) < 0.9:
        raise ScenarioError("scene is behind or outside the camera for more than 10% of the run")


def generate(sc: Scenario, seed: int = 0) -> SynthOutput:
    """Left/right event arrays and ground truth for ``sc``; deterministic given ``seed``."""
    validate(sc)
    rng = np.random.default_rng(seed)
    n_steps = int(np.ceil(max(sc.duration_us, 1) / sc.dt_us))
    stamps = np.linspace(0, sc.duration_us, n_steps + 1).round().astype(np.int64) \
        + int(sc.trajectory.stamps[0])
    poses, cams = _camera_poses(sc, stamps)
    streams = []
    for cam, (Rs, ts) in zip((sc.rig.left, sc.rig.right), cams):
        t, x, y, p, rate = _raster_events(sc, cam, Rs, ts, stamps)
        streams.append(_finish_stream(sc, cam, rng, t, x, y, p, rate, stamps))
    log.info("generated %d left / %d right events over %.2f s", len(streams[0]), len(streams[1]),
             sc.duration_us / 1e6)
    return SynthOutput(streams[0], streams[1], stamps, poses, sc)


def _finish_stream(sc, cam, rng, t, x, y, p, rate, stamps):
    k = max(int(sc.events_per_edge_crossing), 1)
    if k > 1:
        t = np.concatenate([t + j * sc.burst_spacing_us for j in range(k)])
        x, y, p, rate = (np.tile(a, k) for a in (x, y, p, rate))
    jitter = np.zeros(len(t))
    if sc.jitter_us > 0:
        jitter += rng.normal(0.0, sc.jitter_us, len(t))
    if sc.jitter_px > 0:
        # one timestamp sigma for the stream: the time a median-speed edge needs for jitter_px
        moving = rate > 0
        if moving.any():
            jitter += rng.normal(0.0, sc.jitter_px / float(np.median(rate[moving])), len(t))
    t = t + jitter
    if sc.spurious_rate > 0:
        dur = (stamps[-1] - stamps[0]) / 1e6
        n = rng.poisson(sc.spurious_rate * cam.width * cam.height * dur)
        t = np.concatenate([t, rng.uniform(stamps[0], stamps[-1], n)])
        x = np.concatenate([x, rng.integers(0, cam.width, n)])
        y = np.concatenate([y, rng.integers(0, cam.height, n)])
        p = np.concatenate([p, rng.choice(np.array([-1, 1], dtype=np.int8), n)])
    t = np.clip(np.floor(t), stamps[0], stamps[-1]).astype(np.int64)
    order = np.lexsort((x, y, t))
    ev = np.zeros(len(t), dtype=EVENT_DTYPE)
    ev["t"], ev["x"], ev["y"], ev["p"] = t[order], x[order], y[order], p[order]
    return ev


def junction_tracks(sc: Scenario, stamps, cam: str = "left"):
    """Pixel positions (j, n, 2) of every junction and a mask of in-front, in-image samples."""
    stamps = np.atleast_1d(np.asarray(stamps))
    ext = sc.rig.extrinsic
    intr = sc.rig.left if cam == "left" else sc.rig.right
    J = sc.junctions
    uv = np.full((len(J), len(stamps), 2), np.nan)
    ok = np.zeros((len(J), len(stamps)), dtype=bool)
    for k, t in enumerate(stamps):
        inv = sc.trajectory.pose_at(t).inverse()
        if cam != "left":
            inv = compose(ext, inv)
        P = inv.apply(J)
        front = P[:, 2] > Z_NEAR
        z = np.where(front, P[:, 2], 1.0)
        u = intr.fx * P[:, 0] / z + intr.cu
        v = intr.fy * P[:, 1] / z + intr.cv
        uv[:, k, 0] = u
        uv[:, k, 1] = v
        ok[:, k] = front & (u >= 0) & (u <= intr.width - 1) & (v >= 0) & (v <= intr.height - 1)
    return uv, ok


def correspondence_rows(out: SynthOutput, interval_us: int = 10_000):
    """Rows ``(junction_id, t_us, cam, x, y)`` for visible junctions every ``interval_us``."""
    sc = out.scenario
    stamps = np.arange(out.stamps[0], out.stamps[-1] + 1, interval_us)
    rows = []
    for cam in ("left", "right"):
        uv, ok = junction_tracks(sc, stamps, cam)
        jj, kk = np.nonzero(ok)
        order = np.lexsort((jj, kk))
        for j, k in zip(jj[order], kk[order]):
            rows.append((int(j), int(stamps[k]), cam, float(uv[j, k, 0]), float(uv[j, k, 1])))
    rows.sort(key=lambda r: (r[1], r[2], r[0]))
    return rows


def with_noise(sc: Scenario, **kw) -> Scenario:
    return replace(sc, **kw)
