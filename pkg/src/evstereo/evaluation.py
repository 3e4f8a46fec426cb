"""Relative pose error over arc-length windows."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .geometry import Pose, compose, rotation_angle, so3_exp, so3_log

DEFAULT_WINDOWS = (1.0, 2.0, 5.0, 10.0)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class PosePairs:
    est: list
    ref: list
    dropped: int = 0

    def __len__(self):
        return len(self.est)


def interpolate(ref: list[Pose], stamp: int) -> Pose:
    """Reference pose at ``stamp``: linear in translation, slerp in rotation."""
    stamps = np.array([p.stamp for p in ref], dtype=np.int64)
    i = int(np.searchsorted(stamps, stamp, side="left"))
    if i < len(ref) and stamps[i] == stamp:
        return ref[i]
    a, b = ref[i - 1], ref[i]
    s = (stamp - a.stamp) / (b.stamp - a.stamp)
    R = a.R @ so3_exp(s * so3_log(a.R.T @ b.R))
    return Pose(R, (1.0 - s) * a.t + s * b.t, stamp)


def associate(est: list[Pose], ref: list[Pose]) -> PosePairs:
    """Pair every estimate inside the reference time range with the interpolated reference."""
    if not est or not ref:
        raise EvaluationError("empty trajectory")
    lo, hi = ref[0].stamp, ref[-1].stamp
    keep = [p for p in est if lo <= p.stamp <= hi]
    if not keep:
        raise EvaluationError("estimate and reference do not overlap in time")
    return PosePairs(keep, [interpolate(ref, p.stamp) for p in keep], len(est) - len(keep))


def path_length(poses: list[Pose]) -> float:
    """Sum of consecutive translation-increment norms."""
    if len(poses) < 2:
        return 0.0
    t = np.array([p.t for p in poses])
    return float(np.linalg.norm(np.diff(t, axis=0), axis=1).sum())


@dataclass
class WindowStats:
    length: float
    trans_rmse: float  # percent of window length
    rot_rmse: float  # degrees per metre
    count: int


@dataclass
class RpeReport:
    windows: list = field(default_factory=list)
    omitted: list = field(default_factory=list)  # (length, note)
    est_length: float = 0.0
    ref_length: float = 0.0
    dropped: int = 0

    @property
    def trans_mean(self) -> float:
        return float(np.mean([w.trans_rmse for w in self.windows])) if self.windows else float("nan")

    @property
    def rot_mean(self) -> float:
        return float(np.mean([w.rot_rmse for w in self.windows])) if self.windows else float("nan")

    def window(self, length: float) -> WindowStats:
        for w in self.windows:
            if w.length == length:
                return w
        raise KeyError(length)

    def to_text(self) -> str:
        lines = [f"trajectory length [m]: estimate {self.est_length:.3f}, reference {self.ref_length:.3f}",
                 f"{'window [m]':>10} {'trans [%]':>10} {'rot [deg/m]':>12} {'pairs':>6}"]
        for w in self.windows:
            lines.append(f"{w.length:>10g} {w.trans_rmse:>10.3f} {w.rot_rmse:>12.4f} {w.count:>6d}")
        if self.windows:
            lines.append(f"{'mean':>10} {self.trans_mean:>10.3f} {self.rot_mean:>12.4f}")
        for length, note in self.omitted:
            lines.append(f"window {length:g} m omitted: {note}")
        if self.dropped:
            lines.append(f"{self.dropped} estimates outside the reference time range dropped")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("window_m,trans_rmse_pct,rot_rmse_deg_per_m,pairs\n")
        for w in self.windows:
            buf.write(f"{w.length:g},{w.trans_rmse:.9g},{w.rot_rmse:.9g},{w.count}\n")
        return buf.getvalue()


def relative_error(est_i: Pose, est_j: Pose, ref_i: Pose, ref_j: Pose):
    """Translation norm (m) and rotation angle (rad) of ``(ref_i^-1 ref_j)^-1 (est_i^-1 est_j)``."""
    d_est = compose(est_i.inverse(), est_j)
    d_ref = compose(ref_i.inverse(), ref_j)
    delta = compose(d_ref.inverse(), d_est)
    return float(np.linalg.norm(delta.t)), rotation_angle(delta.R)


def rpe(pairs: PosePairs, window_lengths=DEFAULT_WINDOWS) -> RpeReport:
    """Translation (%) and rotation (deg/m) RMSE for each arc-length window."""
    if len(pairs) < 2:
        raise EvaluationError("need at least two pose pairs")
    ref_t = np.array([p.t for p in pairs.ref])
    arc = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(ref_t, axis=0), axis=1))])
    report = RpeReport(est_length=path_length(pairs.est), ref_length=float(arc[-1]),
                       dropped=pairs.dropped)
    for L in window_lengths:
        L = float(L)
        te, re = [], []
        for i in range(len(arc) - 1):
            if arc[-1] - arc[i] < L:
                break
            j = i + 1 + int(np.argmin(np.abs(arc[i + 1:] - arc[i] - L)))
            dt, dr = relative_error(pairs.est[i], pairs.est[j], pairs.ref[i], pairs.ref[j])
            te.append(dt / L * 100.0)
            re.append(np.degrees(dr) / L)
        if not te:
            report.omitted.append((L, f"reference path is {arc[-1]:.3f} m long"))
            continue
        report.windows.append(WindowStats(L, float(np.sqrt(np.mean(np.square(te)))),
                                          float(np.sqrt(np.mean(np.square(re)))), len(te)))
    return report
