"""Core event, calibration and rigid-body types shared by the odometry modules."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

ORTHO_TOL = 1e-9
REORTHO_EVERY = 1000
# maps closer than this to the pixel grid are snapped to it
IDENTITY_TOL = 1e-9


class Event(NamedTuple):
    x: int
    y: int
    t: int  # microseconds
    polarity: int  # +1 / -1


# Bulk event storage used by readers, the generator and the pipeline.
EVENT_DTYPE = np.dtype([("t", "<i8"), ("x", "<i4"), ("y", "<i4"), ("p", "i1")])


def empty_events(n: int = 0) -> np.ndarray:
    return np.zeros(n, dtype=EVENT_DTYPE)


def events_from_list(events: Sequence[Event]) -> np.ndarray:
    arr = empty_events(len(events))
    for i, e in enumerate(events):
        arr[i] = (e.t, e.x, e.y, e.polarity)
    return arr


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def so3_exp(w) -> np.ndarray:
    """Rodrigues formula; rotation vector to matrix."""
    w = np.asarray(w, dtype=float)
    theta = float(np.sqrt(w @ w))
    K = skew(w)
    if theta < 1e-8:
        # second-order Taylor keeps the result orthonormal to ~1e-16
        return np.eye(3) + K + 0.5 * (K @ K)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    c = (np.trace(R) - 1.0) / 2.0
    s = np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    return float(np.arctan2(s, c))


def nearest_rotation(M) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def orthonormality_error(R) -> float:
    return float(max(np.abs(R.T @ R - np.eye(3)).max(), abs(np.linalg.det(R) - 1.0)))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``X' = R X + t`` with a microsecond stamp.

    Trajectories store camera-to-world poses; the pose module estimates
    previous-to-current increments with the same type.
    """

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    stamp: int = 0

    def __post_init__(self):
        R = np.array(self.R, dtype=float).reshape(3, 3)
        t = np.array(self.t, dtype=float).reshape(3)
        err = orthonormality_error(R)
        if not err <= ORTHO_TOL:
            raise ValueError(f"rotation is not orthonormal (error {err:.3g})")
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "stamp", int(self.stamp))

    @classmethod
    def identity(cls, stamp: int = 0) -> "Pose":
        return cls(np.eye(3), np.zeros(3), stamp)

    @classmethod
    def from_matrix(cls, T, stamp: int = 0) -> "Pose":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3], stamp)

    @classmethod
    def from_quaternion(cls, q_xyzw, t, stamp: int = 0) -> "Pose":
        q = np.asarray(q_xyzw, dtype=float)
        norm = np.linalg.norm(q)
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {norm:.9f} is not 1")
        return cls(Rotation.from_quat(q / norm).as_matrix(), t, stamp)

    def quaternion(self) -> np.ndarray:
        """Unit quaternion (x, y, z, w) with w >= 0."""
        q = Rotation.from_matrix(self.R).as_quat()
        return -q if q[3] < 0 else q

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        return Pose(self.R.T, -self.R.T @ self.t, self.stamp)

    def apply(self, X) -> np.ndarray:
        """Transform points of shape (3,) or (n, 3)."""
        X = np.asarray(X, dtype=float)
        return X @ self.R.T + self.t

    def with_stamp(self, stamp: int) -> "Pose":
        return Pose(self.R, self.t, stamp)

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def __repr__(self):
        rv = np.round(so3_log(self.R), 6)
        return f"Pose(rotvec={rv.tolist()}, t={np.round(self.t, 6).tolist()}, stamp={self.stamp})"


def compose(a: Pose, b: Pose) -> Pose:
    """``a ∘ b``: apply ``b`` first, then ``a``. The stamp is taken from ``b``."""
    return Pose(a.R @ b.R, a.R @ b.t + a.t, b.stamp)


def inverse(p: Pose) -> Pose:
    return p.inverse()


class PoseIntegrator:
    """Accumulates increments into an absolute pose.

    Rotations are projected back onto SO(3) every ``REORTHO_EVERY``
    compositions so long chains cannot drift off the manifold.
    """

    def __init__(self, start: Pose | None = None, reortho_every: int = REORTHO_EVERY):
        self.pose = start if start is not None else Pose.identity()
        self.reortho_every = reortho_every
        self.count = 0

    def push(self, increment: Pose) -> Pose:
        self.pose = compose(self.pose, increment)
        self.count += 1
        if self.count % self.reortho_every == 0:
            self.pose = Pose(nearest_rotation(self.pose.R), self.pose.t, self.pose.stamp)
        return self.pose


# ---------------------------------------------------------------------------
# Cameras and rectification


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cu: float
    cv: float
    width: int
    height: int
    distortion: tuple = ()

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal length must be positive")
        if not (0 <= self.cu < self.width and 0 <= self.cv < self.height):
            raise ValueError("principal point outside the sensor")
        if len(self.distortion) > 5:
            raise ValueError("at most 5 distortion coefficients (k1 k2 p1 p2 k3)")
        object.__setattr__(self, "distortion", tuple(float(d) for d in self.distortion))

    @property
    def f(self) -> float:
        return 0.5 * (self.fx + self.fy)

    @property
    def coeffs(self) -> np.ndarray:
        """Zero-padded (k1, k2, p1, p2, k3)."""
        c = np.zeros(5)
        c[: len(self.distortion)] = self.distortion
        return c

    def contains(self, x, y) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height


def distort_normalized(xn, yn, coeffs):
    k1, k2, p1, p2, k3 = coeffs
    r2 = xn * xn + yn * yn
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = xn * radial + 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
    return xd, yd


def undistort_normalized(xd, yd, coeffs, iterations: int = 200, tol: float = 1e-15):
    """Invert the radial-tangential model by fixed-point iteration (vectorised)."""
    xd = np.asarray(xd, dtype=float)
    yd = np.asarray(yd, dtype=float)
    if not np.any(coeffs):
        return xd.copy(), yd.copy()
    k1, k2, p1, p2, k3 = coeffs
    xn, yn = xd.copy(), yd.copy()
    for _ in range(iterations):
        r2 = xn * xn + yn * yn
        radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
        dx = 2.0 * p1 * xn * yn + p2 * (r2 + 2.0 * xn * xn)
        dy = p1 * (r2 + 2.0 * yn * yn) + 2.0 * p2 * xn * yn
        nx = (xd - dx) / radial
        ny = (yd - dy) / radial
        step = max(np.abs(nx - xn).max(initial=0.0), np.abs(ny - yn).max(initial=0.0))
        xn, yn = nx, ny
        if step < tol:
            break
    return xn, yn


@dataclass(frozen=True, eq=False)
class StereoRig:
    """Stereo calibration; ``extrinsic`` maps left-camera points into the right camera."""

    left: CameraIntrinsics
    right: CameraIntrinsics
    extrinsic: Pose

    def __post_init__(self):
        if self.rectified_baseline <= 0:
            raise ValueError("stereo baseline must be positive")

    @property
    def right_center_in_left(self) -> np.ndarray:
        return -self.extrinsic.R.T @ self.extrinsic.t

    @property
    def rectified_baseline(self) -> float:
        return float(np.linalg.norm(self.right_center_in_left))

    @classmethod
    def ideal(cls, f: float, width: int, height: int, baseline: float,
              cu: float | None = None, cv: float | None = None) -> "StereoRig":
        """Already-rectified pinhole pair with the right camera at +baseline on x."""
        cam = CameraIntrinsics(f, f, (width - 1) / 2 if cu is None else cu,
                               (height - 1) / 2 if cv is None else cv, width, height)
        return cls(cam, cam, Pose(np.eye(3), [-baseline, 0.0, 0.0]))


@dataclass(frozen=True)
class RectifiedCamera:
    """Shared pinhole model of both rectified cameras."""

    f: float
    cu: float
    cv: float
    width: int
    height: int
    baseline: float


LEFT, RIGHT = 0, 1


def _camera_index(cam) -> int:
    if cam in (LEFT, "left", "l", "L"):
        return LEFT
    if cam in (RIGHT, "right", "r", "R"):
        return RIGHT
    raise ValueError(f"unknown camera {cam!r}")


@dataclass(frozen=True, eq=False)
class RectificationMap:
    """Dense raw-pixel -> rectified-pixel lookup for both cameras."""

    camera: RectifiedCamera
    map_x: tuple  # (left, right) arrays of shape (H, W)
    map_y: tuple
    rotations: tuple  # rectified-from-raw rotation per camera
    identity: tuple  # per camera: map is exactly the identity

    @classmethod
    def from_rig(cls, rig: StereoRig) -> "RectificationMap":
        if (rig.left.width, rig.left.height) != (rig.right.width, rig.right.height):
            raise ValueError("left and right sensors must share a resolution")
        W, H = rig.left.width, rig.left.height
        baseline_dir = rig.right_center_in_left / rig.rectified_baseline
        ex = baseline_dir
        ey = np.cross([0.0, 0.0, 1.0], ex)
        ey /= np.linalg.norm(ey)
        ez = np.cross(ex, ey)
        R_left = np.vstack([ex, ey, ez])
        R_right = R_left @ rig.extrinsic.R.T
        f = np.mean([rig.left.fx, rig.left.fy, rig.right.fx, rig.right.fy])
        cu = 0.5 * (rig.left.cu + rig.right.cu)
        cv = 0.5 * (rig.left.cv + rig.right.cv)
        rect = RectifiedCamera(float(f), float(cu), float(cv), W, H, rig.rectified_baseline)

        us, vs = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
        maps_x, maps_y, ident = [], [], []
        for cam, Rr in ((rig.left, R_left), (rig.right, R_right)):
            mx, my = _forward_map(cam, Rr, rect, us, vs)
            is_ident = max(np.abs(mx - us).max(), np.abs(my - vs).max()) < IDENTITY_TOL
            if is_ident:
                mx, my = us.copy(), vs.copy()
            mx.flags.writeable = False
            my.flags.writeable = False
            maps_x.append(mx)
            maps_y.append(my)
            ident.append(bool(is_ident))
        return cls(rect, tuple(maps_x), tuple(maps_y), (R_left, R_right), tuple(ident))

    @property
    def width(self) -> int:
        return self.camera.width

    @property
    def height(self) -> int:
        return self.camera.height

    def rectify_points(self, pts, cam):
        """Vectorised ``rectify_point``; returns (n, 2) coordinates and a validity mask."""
        i = _camera_index(cam)
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.full(pts.shape, np.nan)
        x, y = pts[:, 0], pts[:, 1]
        inside = (x >= 0) & (x <= self.width - 1) & (y >= 0) & (y <= self.height - 1)
        if self.identity[i]:
            out[inside] = pts[inside]
        else:
            xi, yi = x[inside], y[inside]
            out[inside, 0] = bilinear(self.map_x[i], xi, yi)
            out[inside, 1] = bilinear(self.map_y[i], xi, yi)
        ok = inside & (out[:, 0] >= 0) & (out[:, 0] <= self.width - 1) \
            & (out[:, 1] >= 0) & (out[:, 1] <= self.height - 1)
        return out, ok


def _forward_map(cam: CameraIntrinsics, R_rect, rect: RectifiedCamera, us, vs):
    xd = (us - cam.cu) / cam.fx
    yd = (vs - cam.cv) / cam.fy
    xn, yn = undistort_normalized(xd, yd, cam.coeffs)
    if np.allclose(R_rect, np.eye(3), atol=0.0, rtol=0.0):
        rx, ry, rz = xn, yn, np.ones_like(xn)
    else:
        rx = R_rect[0, 0] * xn + R_rect[0, 1] * yn + R_rect[0, 2]
        ry = R_rect[1, 0] * xn + R_rect[1, 1] * yn + R_rect[1, 2]
        rz = R_rect[2, 0] * xn + R_rect[2, 1] * yn + R_rect[2, 2]
    return rect.f * rx / rz + rect.cu, rect.f * ry / rz + rect.cv


def bilinear(img, x, y):
    """Bilinear interpolation of ``img`` at float coordinates inside [0, W-1] x [0, H-1]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    H, W = img.shape
    x0 = np.clip(np.floor(x).astype(np.int64), 0, W - 2)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, H - 2)
    ax = x - x0
    ay = y - y0
    return ((1 - ay) * ((1 - ax) * img[y0, x0] + ax * img[y0, x0 + 1])
            + ay * ((1 - ax) * img[y0 + 1, x0] + ax * img[y0 + 1, x0 + 1]))


def rectify_point(p, cam, rmap: RectificationMap):
    """Rectified sub-pixel coordinate of raw pixel ``p``, or ``None`` when it leaves the image."""
    out, ok = rmap.rectify_points([p], cam)
    if not ok[0]:
        return None
    return float(out[0, 0]), float(out[0, 1])
