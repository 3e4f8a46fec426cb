"""Command-line entry points: ``run``, ``eval`` and ``synth``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import io, synth
from .evaluation import DEFAULT_WINDOWS, EvaluationError, associate, rpe
from .pipeline import PipelineConfig, run
from .surface import StreamOrderError

log = logging.getLogger("evstereo")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def _windows(text: str):
    try:
        vals = [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad window list {text!r}") from None
    if not vals or any(v <= 0 for v in vals):
        raise argparse.ArgumentTypeError("window lengths must be positive")
    return vals


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="evstereo", description="Stereo event-camera odometry.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    r = sub.add_parser("run", help="estimate a trajectory from two event files")
    r.add_argument("--left", required=True)
    r.add_argument("--right", required=True)
    r.add_argument("--calib", required=True)
    r.add_argument("--out", required=True, help="trajectory file to write")
    d = PipelineConfig()
    r.add_argument("-N", type=int, default=d.N, help="left events per estimate")
    r.add_argument("--max-interval", type=int, default=d.max_interval, help="µs")
    r.add_argument("--delta", type=float, default=d.delta, help="time-surface decay, µs")
    r.add_argument("--kappa", type=int, default=d.kappa, help="refractory interval, µs")
    r.add_argument("--zncc-min", type=float, default=d.zncc_min)
    r.add_argument("--seed", type=int, default=d.seed)
    r.add_argument("--dump-surfaces", metavar="DIR")

    e = sub.add_parser("eval", help="relative pose error of an estimate against a reference")
    e.add_argument("--est", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--windows", type=_windows, default=list(DEFAULT_WINDOWS),
                   help="window lengths in metres, e.g. 1,2,5")
    e.add_argument("--csv", help="also write the report as CSV here")

    s = sub.add_parser("synth", help="generate a synthetic stereo event recording")
    s.add_argument("--scenario", choices=sorted(synth.SCENARIOS), default="corridor")
    s.add_argument("--distance", type=float, help="metres travelled")
    s.add_argument("--speed", type=float, help="m/s")
    s.add_argument("--duration", type=float, help="seconds (overrides distance)")
    s.add_argument("--static", action="store_true", help="camera does not move")
    s.add_argument("--events-per-crossing", type=int, default=1)
    s.add_argument("--jitter-us", type=float, default=0.0)
    s.add_argument("--jitter-px", type=float, default=0.0)
    s.add_argument("--spurious-rate", type=float, default=0.0, help="events / px / s")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-left", required=True)
    s.add_argument("--out-right", required=True)
    s.add_argument("--out-gt", required=True, help="ground-truth trajectory")
    s.add_argument("--out-calib", help="calibration file for the generated rig")
    s.add_argument("--out-corr", help="junction correspondence CSV")
    return p


def _cmd_run(a) -> int:
    rig = io.read_calibration(a.calib)
    left = io.read_events(a.left).read_all()
    right = io.read_events(a.right).read_all()
    cfg = PipelineConfig(N=a.N, max_interval=a.max_interval, delta=a.delta, kappa=a.kappa,
                         zncc_min=a.zncc_min, seed=a.seed, dump_surfaces=a.dump_surfaces)
    t0 = time.perf_counter()
    traj = run(cfg, rig, left, right)
    failed = sum(e.failed for e in traj)
    log.info("%d poses (%d failed) in %.1f s", len(traj), failed, time.perf_counter() - t0)
    io.write_trajectory(a.out, traj)
    return 0


def _cmd_eval(a) -> int:
    est = io.read_trajectory(a.est)
    ref = io.read_trajectory(a.ref)
    report = rpe(associate(est, ref), a.windows)
    sys.stdout.write(report.to_text())
    if a.csv:
        Path(a.csv).write_text(report.to_csv())
    return 0


def _cmd_synth(a) -> int:
    kw = {k: v for k, v in (("distance", a.distance), ("speed", a.speed),
                            ("duration_s", a.duration)) if v is not None}
    if a.static:
        if a.scenario != "corridor":
            raise synth.ScenarioError("--static is only available for the corridor")
        kw["static"] = True
    sc = synth.SCENARIOS[a.scenario](
        events_per_edge_crossing=a.events_per_crossing, jitter_us=a.jitter_us,
        jitter_px=a.jitter_px, spurious_rate=a.spurious_rate, **kw)
    out = synth.generate(sc, a.seed)
    cam = sc.rig.left
    io.write_events(a.out_left, out.left, cam.width, cam.height)
    io.write_events(a.out_right, out.right, cam.width, cam.height)
    io.write_trajectory(a.out_gt, out.poses)
    if a.out_calib:
        io.write_calibration(a.out_calib, sc.rig)
    if a.out_corr:
        io.write_correspondences(a.out_corr, synth.correspondence_rows(out))
    log.info("%d left / %d right events", len(out.left), len(out.right))
    return 0


COMMANDS = {"run": _cmd_run, "eval": _cmd_eval, "synth": _cmd_synth}
RUNTIME_ERRORS = (OSError, ValueError, RuntimeError, io.FormatError, StreamOrderError,
                  EvaluationError, synth.ScenarioError)


def main(argv=None) -> int:
    """Exit status: 0 success, 1 usage error, 2 runtime error."""
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError:
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if a.command is None:
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.WARNING - 10 * min(a.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a)
    except RUNTIME_ERRORS as exc:
        print(f"evstereo {a.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
