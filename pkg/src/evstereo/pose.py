"""Stereo triangulation and reprojection-error motion estimation (Gauss-Newton + RANSAC)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, RectifiedCamera, orthonormality_error, so3_exp

BEHIND_RESIDUAL = 1e3
DEFAULT_Z_MAX = 100.0
DEFAULT_D_MIN = 0.5


class DegenerateGeometry(RuntimeError):
    """Normal equations are singular for the given features."""


class EstimationFailure(RuntimeError):
    """RANSAC could not find a well-supported motion."""


@dataclass(frozen=True, eq=False)
class Landmark:
    X: np.ndarray
    source: object = None


@dataclass(frozen=True, eq=False)
class MotionEstimate:
    pose: Pose
    inliers: np.ndarray
    final_cost: float
    iterations: int
    converged: bool = True


# ---------------------------------------------------------------------------
# geometry


def triangulate_points(left, right, cam: RectifiedCamera, d_min: float = DEFAULT_D_MIN,
                       z_max: float = DEFAULT_Z_MAX):
    """Back-project rectified stereo pairs; returns (n, 3) points and a validity mask."""
    left = np.asarray(left, dtype=float).reshape(-1, 2)
    right = np.asarray(right, dtype=float).reshape(-1, 2)
    d = left[:, 0] - right[:, 0]
    ok = d >= d_min
    z = np.full(len(d), np.nan)
    z[ok] = cam.f * cam.baseline / d[ok]
    X = np.empty((len(d), 3))
    X[:, 2] = z
    X[:, 0] = (left[:, 0] - cam.cu) * z / cam.f
    X[:, 1] = (0.5 * (left[:, 1] + right[:, 1]) - cam.cv) * z / cam.f
    ok &= z < z_max
    return X, ok


def triangulate(m, cam: RectifiedCamera, d_min: float = DEFAULT_D_MIN,
                z_max: float = DEFAULT_Z_MAX) -> Landmark | None:
    """Landmark in the previous left frame from a quad match's previous stereo pair."""
    X, ok = triangulate_points(m.left_prev, m.right_prev, cam, d_min, z_max)
    if not ok[0]:
        return None
    return Landmark(X[0], m)


def project_points(X, R, t, cam: RectifiedCamera, right: bool = False):
    """Pinhole projection of ``R X + t``; the right camera sits at +baseline on x.

    Returns (n, 2) pixels and a mask of points in front of the camera.
    """
    P = np.asarray(X, dtype=float).reshape(-1, 3) @ np.asarray(R).T + np.asarray(t)
    front = P[:, 2] > 0
    z = np.where(front, P[:, 2], 1.0)
    x = P[:, 0] - cam.baseline if right else P[:, 0]
    uv = np.column_stack([cam.f * x / z + cam.cu, cam.f * P[:, 1] / z + cam.cv])
    return uv, front


class BehindCamera(ValueError):
    pass


def project(X, pose: Pose, cam: RectifiedCamera, which: str = "left"):
    uv, front = project_points(X, pose.R, pose.t, cam, right=(which == "right"))
    if not front[0]:
        raise BehindCamera("point is behind the camera")
    return float(uv[0, 0]), float(uv[0, 1])


def reprojection_residuals(X, obs_left, obs_right, R, t, cam: RectifiedCamera,
                           jacobian: bool = False):
    """Stacked residuals ``observed - projected`` (left u, v, right u, v per feature).

    Features behind the camera get ``BEHIND_RESIDUAL`` in every component and a
    zero Jacobian row. Returns ``(r, behind)`` or ``(r, J, behind)``; ``J`` is
    taken with respect to ``(rotation vector, translation)`` increments applied as
    ``R <- exp(w) R`` and ``t <- t + v``.
    """
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    n = len(X)
    RX = X @ np.asarray(R).T
    P = RX + t
    behind = P[:, 2] <= 0
    z = np.where(behind, 1.0, P[:, 2])
    f, b = cam.f, cam.baseline
    ul = f * P[:, 0] / z + cam.cu
    v = f * P[:, 1] / z + cam.cv
    ur = f * (P[:, 0] - b) / z + cam.cu
    r = np.empty((n, 4))
    r[:, 0] = obs_left[:, 0] - ul
    r[:, 1] = obs_left[:, 1] - v
    r[:, 2] = obs_right[:, 0] - ur
    r[:, 3] = obs_right[:, 1] - v
    r[behind] = BEHIND_RESIDUAL
    if not jacobian:
        return r.ravel(), behind
    # d(projection)/dP for each of the four rows
    iz = 1.0 / z
    dproj = np.zeros((n, 4, 3))
    dproj[:, 0, 0] = f * iz
    dproj[:, 0, 2] = -f * P[:, 0] * iz * iz
    dproj[:, 1, 1] = f * iz
    dproj[:, 1, 2] = -f * P[:, 1] * iz * iz
    dproj[:, 2, 0] = f * iz
    dproj[:, 2, 2] = -f * (P[:, 0] - b) * iz * iz
    dproj[:, 3] = dproj[:, 1]
    # dP/dw = -[R X]_x, dP/dv = I
    dP = np.zeros((n, 3, 6))
    dP[:, 0, 1] = RX[:, 2]
    dP[:, 0, 2] = -RX[:, 1]
    dP[:, 1, 0] = -RX[:, 2]
    dP[:, 1, 2] = RX[:, 0]
    dP[:, 2, 0] = RX[:, 1]
    dP[:, 2, 1] = -RX[:, 0]
    dP[:, :, 3:] = np.eye(3)
    J = -np.einsum("nij,njk->nik", dproj, dP)
    J[behind] = 0.0
    return r.ravel(), J.reshape(4 * n, 6), behind


def per_feature_error(X, obs_left, obs_right, R, t, cam: RectifiedCamera) -> np.ndarray:
    """Worse of the left/right reprojection distances per feature (inf if behind)."""
    r, behind = reprojection_residuals(X, obs_left, obs_right, R, t, cam)
    r = r.reshape(-1, 4)
    err = np.maximum(np.hypot(r[:, 0], r[:, 1]), np.hypot(r[:, 2], r[:, 3]))
    err[behind] = np.inf
    return err


def _solve_normal(A, g):
    """Solve ``A x = -g``; singular or badly conditioned systems raise DegenerateGeometry."""
    w = np.linalg.eigvalsh(A)
    if not np.all(np.isfinite(w)) or w[0] <= 1e-12 * max(w[-1], 1e-300):
        raise DegenerateGeometry("singular normal equations")
    return np.linalg.solve(A, -g)


def apply_increment(R, t, delta):
    return so3_exp(delta[:3]) @ R, t + delta[3:]


# ---------------------------------------------------------------------------
# optimisation


def gauss_newton(X, obs_left, obs_right, init: Pose | None, cam: RectifiedCamera,
                 max_iterations: int = 20, step_tol: float = 1e-10) -> MotionEstimate:
    """Minimise the stereo reprojection error over R, t starting from ``init``."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    obs_left = np.asarray(obs_left, dtype=float).reshape(-1, 2)
    obs_right = np.asarray(obs_right, dtype=float).reshape(-1, 2)
    if len(X) < 3:
        raise DegenerateGeometry("need at least 3 features")
    init = init if init is not None else Pose.identity()
    R, t = np.array(init.R), np.array(init.t)
    r, J, _ = reprojection_residuals(X, obs_left, obs_right, R, t, cam, jacobian=True)
    cost = float(r @ r)
    converged = False
    it = 0
    while it < max_iterations:
        it += 1
        A = J.T @ J
        g = J.T @ r
        delta = _solve_normal(A, g)
        if np.sqrt(delta @ delta) < step_tol:
            converged = True
            break
        accepted = False
        step = delta
        for _ in range(10):
            R_new, t_new = apply_increment(R, t, step)
            r_new, _ = reprojection_residuals(X, obs_left, obs_right, R_new, t_new, cam)
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                accepted = True
                break
            step = 0.5 * step
        if not accepted:
            # no descent left at floating-point resolution
            converged = True
            break
        assert cost_new <= cost
        assert orthonormality_error(R_new) < 1e-9
        R, t = R_new, t_new
        r, J, _ = reprojection_residuals(X, obs_left, obs_right, R, t, cam, jacobian=True)
        cost = cost_new
    return MotionEstimate(Pose(R, t), np.arange(len(X)), cost, it, converged)


def ransac_estimate(X, obs_left, obs_right, cam: RectifiedCamera, rng: np.random.Generator,
                    iterations: int = 50, sample_size: int = 3, threshold: float = 2.0,
                    min_inliers: int = 6) -> MotionEstimate:
    """Best of ``iterations`` minimal Gauss-Newton hypotheses, refined on its inliers."""
    X = np.asarray(X, dtype=float).reshape(-1, 3)
    obs_left = np.asarray(obs_left, dtype=float).reshape(-1, 2)
    obs_right = np.asarray(obs_right, dtype=float).reshape(-1, 2)
    n = len(X)
    if n < sample_size:
        raise EstimationFailure(f"{n} features, need at least {sample_size}")
    # samples are drawn up front so evaluation order cannot change them
    samples = [rng.choice(n, sample_size, replace=False) for _ in range(iterations)]
    best_pose, best_inliers = None, None
    for s in samples:
        try:
            hyp = gauss_newton(X[s], obs_left[s], obs_right[s], None, cam)
        except DegenerateGeometry:
            continue
        err = per_feature_error(X, obs_left, obs_right, hyp.pose.R, hyp.pose.t, cam)
        inl = np.flatnonzero(err <= threshold)
        if best_inliers is None or len(inl) > len(best_inliers):
            best_pose, best_inliers = hyp.pose, inl
    if best_inliers is None or len(best_inliers) < min_inliers:
        got = 0 if best_inliers is None else len(best_inliers)
        raise EstimationFailure(f"best hypothesis has {got} inliers, need {min_inliers}")
    try:
        refined = gauss_newton(X[best_inliers], obs_left[best_inliers], obs_right[best_inliers],
                               best_pose, cam)
    except DegenerateGeometry as exc:
        raise EstimationFailure(str(exc)) from None
    err = per_feature_error(X, obs_left, obs_right, refined.pose.R, refined.pose.t, cam)
    inliers = np.flatnonzero(err <= threshold)
    if len(inliers) < min_inliers:
        raise EstimationFailure(f"refined pose keeps {len(inliers)} inliers, need {min_inliers}")
    r, _ = reprojection_residuals(X[inliers], obs_left[inliers], obs_right[inliers],
                                  refined.pose.R, refined.pose.t, cam)
    return MotionEstimate(refined.pose, inliers, float(r @ r), refined.iterations,
                          refined.converged)
