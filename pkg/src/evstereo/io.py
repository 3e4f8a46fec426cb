"""Event, calibration, trajectory and image file formats."""

from __future__ import annotations

import logging
import struct
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np

from .geometry import EVENT_DTYPE, CameraIntrinsics, Pose, StereoRig, orthonormality_error

log = logging.getLogger(__name__)

MAGIC = b"EVT1"
HEADER = struct.Struct("<4sHH8s")
RECORD_DTYPE = np.dtype([("t", "<i8"), ("x", "<u2"), ("y", "<u2"), ("p", "u1")])
assert HEADER.size == 16 and RECORD_DTYPE.itemsize == 13
CHUNK = 1 << 18
ROTATION_TOL = 1e-6
QUAT_TOL = 1e-6


class FormatError(ValueError):
    """Malformed input file; the message carries the position of the problem."""


# ---------------------------------------------------------------------------
# events


class EventReader:
    """Iterates an event file in chunks of ``EVENT_DTYPE`` records, in file order.

    Binary files (``EVT1`` header) and ``t_us,x,y,p`` CSV files are recognised
    from their first bytes. Timestamps must not decrease. Binary records outside
    the header's sensor size are dropped and counted in ``dropped``.
    """

    def __init__(self, path, chunk_size: int = CHUNK):
        self.path = Path(path)
        self.chunk_size = int(chunk_size)
        self.width = self.height = None
        self.dropped = 0
        with open(self.path, "rb") as fh:
            head = fh.read(HEADER.size)
        if head[:4] == MAGIC:
            self.binary = True
            if len(head) < HEADER.size:
                raise FormatError(f"{self.path}: truncated header at byte {len(head)}")
            _, self.width, self.height, reserved = HEADER.unpack(head)
            if reserved != bytes(8):
                raise FormatError(f"{self.path}: reserved header bytes are not zero (byte 8)")
            if self.width * self.height == 0:
                raise FormatError(f"{self.path}: zero sensor size in header (byte 4)")
        elif _looks_textual(head):
            self.binary = False
        else:
            raise FormatError(f"{self.path}: bad magic {head[:4]!r} at byte 0")

    def __iter__(self):
        self.dropped = 0
        chunks = self._binary_chunks() if self.binary else self._csv_chunks()
        last = None
        for ev, where in chunks:
            if len(ev) == 0:
                continue
            t = ev["t"]
            if last is not None and t[0] < last[0]:
                raise FormatError(f"{self.path}: timestamp {t[0]} at {where(0)} precedes "
                                  f"{last[0]} at {last[1]}")
            bad = np.flatnonzero(np.diff(t) < 0)
            if len(bad):
                i = int(bad[0]) + 1
                raise FormatError(f"{self.path}: timestamp {t[i]} at {where(i)} precedes "
                                  f"{t[i - 1]} at {where(i - 1)}")
            last = (int(t[-1]), where(len(ev) - 1))
            yield ev

    def read_all(self) -> np.ndarray:
        parts = list(self)
        return np.concatenate(parts) if parts else np.zeros(0, EVENT_DTYPE)

    def _binary_chunks(self):
        size = RECORD_DTYPE.itemsize
        with open(self.path, "rb") as fh:
            fh.seek(HEADER.size)
            offset = HEADER.size
            while True:
                raw = fh.read(size * self.chunk_size)
                if not raw:
                    return
                if len(raw) % size:
                    bad = offset + len(raw) - len(raw) % size
                    raise FormatError(f"{self.path}: truncated record at byte {bad}")
                rec = np.frombuffer(raw, dtype=RECORD_DTYPE)
                base = offset
                pol_bad = np.flatnonzero(rec["p"] > 1)
                if len(pol_bad):
                    at = base + int(pol_bad[0]) * size + 12
                    raise FormatError(f"{self.path}: polarity byte {rec['p'][pol_bad[0]]} "
                                      f"at byte {at}")
                ev = _to_events(rec["t"], rec["x"], rec["y"], rec["p"])
                inside = (ev["x"] < self.width) & (ev["y"] < self.height)
                if not inside.all():
                    n = int((~inside).sum())
                    self.dropped += n
                    log.warning("%s: dropped %d record(s) outside %dx%d", self.path, n,
                                self.width, self.height)
                    kept = np.flatnonzero(inside)
                    ev = ev[kept]
                else:
                    kept = None
                offset += len(raw)
                yield ev, _byte_locator(base, size, kept)

    def _csv_chunks(self):
        with open(self.path, "r", encoding="ascii", errors="strict", newline=None) as fh:
            lineno = 0
            while True:
                lines, numbers = [], []
                for raw in fh:
                    lineno += 1
                    s = raw.strip()
                    if not s or s.startswith("#") or (lineno == 1 and s.startswith("t")):
                        continue
                    lines.append(s)
                    numbers.append(lineno)
                    if len(lines) >= self.chunk_size:
                        break
                if not lines:
                    return
                yield _parse_csv_lines(self.path, lines, numbers), _line_locator(numbers)


def _looks_textual(head: bytes) -> bool:
    return all(b in b"0123456789,.-+# \t\r\nabcdefghijklmnopqrstuvwxyz_" for b in head)


def _byte_locator(base, size, kept):
    def where(i):
        j = i if kept is None else int(kept[i])
        return f"byte {base + j * size}"
    return where


def _line_locator(numbers):
    return lambda i: f"line {numbers[i]}"


def _to_events(t, x, y, p) -> np.ndarray:
    ev = np.zeros(len(t), dtype=EVENT_DTYPE)
    ev["t"], ev["x"], ev["y"] = t, x, y
    ev["p"] = np.where(np.asarray(p) == 1, 1, -1)
    return ev


def _parse_csv_lines(path, lines, numbers) -> np.ndarray:
    try:
        a = np.array([s.split(",") for s in lines], dtype=np.int64)
        if a.ndim != 2 or a.shape[1] != 4:
            raise ValueError
    except ValueError:
        for s, n in zip(lines, numbers):
            parts = s.split(",")
            try:
                if len(parts) != 4:
                    raise ValueError
                [int(v) for v in parts]
            except ValueError:
                raise FormatError(f"{path}: malformed event at line {n}: {s!r}") from None
        raise
    bad = np.flatnonzero((a[:, 3] != 0) & (a[:, 3] != 1))
    if len(bad):
        raise FormatError(f"{path}: polarity must be 0 or 1 at line {numbers[bad[0]]}")
    neg = np.flatnonzero((a[:, 0] < 0) | (a[:, 1] < 0) | (a[:, 2] < 0))
    if len(neg):
        raise FormatError(f"{path}: negative value at line {numbers[neg[0]]}")
    return _to_events(a[:, 0], a[:, 1], a[:, 2], a[:, 3])


def read_events(path, chunk_size: int = CHUNK) -> EventReader:
    """Lazy reader over an event file; iterate for chunks or call ``read_all()``."""
    return EventReader(path, chunk_size)


def load_events(path) -> np.ndarray:
    return EventReader(path).read_all()


def write_events(path, events: np.ndarray, width: int | None = None, height: int | None = None,
                 fmt: str | None = None):
    """Write events as binary (``EVT1``) or CSV; the format follows the suffix by default."""
    path = Path(path)
    ev = np.asarray(events, dtype=EVENT_DTYPE)
    fmt = fmt or ("csv" if path.suffix.lower() == ".csv" else "bin")
    pol = (ev["p"] > 0).astype(np.uint8)
    if fmt == "csv":
        with open(path, "w", newline="\n") as fh:
            if len(ev):
                np.savetxt(fh, np.column_stack([ev["t"], ev["x"], ev["y"], pol]), fmt="%d",
                           delimiter=",")
        return
    if width is None or height is None:
        raise ValueError("binary event files need the sensor size")
    rec = np.zeros(len(ev), dtype=RECORD_DTYPE)
    rec["t"], rec["x"], rec["y"], rec["p"] = ev["t"], ev["x"], ev["y"], pol
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, int(width), int(height), bytes(8)))
        fh.write(rec.tobytes())


# ---------------------------------------------------------------------------
# calibration

CAMERA_KEYS = ("fx", "fy", "cx", "cy", "width", "height", "distortion")
EXTRINSIC_KEYS = ("extrinsic.R", "extrinsic.t")


def _parse_key_values(path) -> dict:
    out, where = {}, {}
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            s = raw.split("#", 1)[0].strip()
            if not s:
                continue
            if "=" not in s:
                raise FormatError(f"{path}: line {n}: expected 'key = value'")
            key, value = (v.strip() for v in s.split("=", 1))
            if key in out:
                raise FormatError(f"{path}: duplicate key {key!r} (lines {where[key]} and {n})")
            out[key], where[key] = value, n
    return out


def _numbers(path, key, value, count=None):
    try:
        vals = [float(v) for v in value.replace(",", " ").split()]
    except ValueError:
        raise FormatError(f"{path}: {key!r} is not numeric") from None
    if count is not None and len(vals) != count:
        raise FormatError(f"{path}: {key!r} needs {count} values, got {len(vals)}")
    return vals


def read_calibration(path) -> StereoRig:
    """Stereo rig from a flat ``key = value`` file.

    Keys are ``left.fx``, ``left.fy``, ``left.cx``, ``left.cy``, ``left.width``,
    ``left.height``, ``left.distortion`` (possibly empty), the same for ``right``,
    ``extrinsic.R`` (9 numbers, row-major) and ``extrinsic.t`` (3 numbers). The
    extrinsic maps left-camera coordinates into the right camera.
    """
    kv = _parse_key_values(path)
    required = [f"{c}.{k}" for c in ("left", "right") for k in CAMERA_KEYS] + list(EXTRINSIC_KEYS)
    for key in required:
        if key not in kv:
            raise FormatError(f"{path}: missing key {key!r}")
    unknown = sorted(set(kv) - set(required))
    if unknown:
        raise FormatError(f"{path}: unknown key {unknown[0]!r}")
    cams = []
    for c in ("left", "right"):
        v = {k: _numbers(path, f"{c}.{k}", kv[f"{c}.{k}"], None if k == "distortion" else 1)
             for k in CAMERA_KEYS}
        for k in ("width", "height"):
            if v[k][0] != int(v[k][0]) or v[k][0] <= 0:
                raise FormatError(f"{path}: {c}.{k!s} must be a positive integer")
        try:
            cams.append(CameraIntrinsics(v["fx"][0], v["fy"][0], v["cx"][0], v["cy"][0],
                                         int(v["width"][0]), int(v["height"][0]),
                                         tuple(v["distortion"])))
        except ValueError as exc:
            raise FormatError(f"{path}: {c} camera: {exc}") from None
    R = np.array(_numbers(path, "extrinsic.R", kv["extrinsic.R"], 9)).reshape(3, 3)
    t = _numbers(path, "extrinsic.t", kv["extrinsic.t"], 3)
    err = orthonormality_error(R)
    if not err <= ROTATION_TOL:
        raise FormatError(f"{path}: 'extrinsic.R' is not a rotation (error {err:.3g})")
    # snap to the nearest exact rotation so downstream checks see a clean matrix
    U, _, Vt = np.linalg.svd(R)
    try:
        return StereoRig(cams[0], cams[1], Pose(U @ Vt, t))
    except ValueError as exc:
        raise FormatError(f"{path}: extrinsic: {exc}") from None


def write_calibration(path, rig: StereoRig):
    lines = []
    for name, cam in (("left", rig.left), ("right", rig.right)):
        for key, val in (("fx", cam.fx), ("fy", cam.fy), ("cx", cam.cu), ("cy", cam.cv),
                         ("width", cam.width), ("height", cam.height)):
            lines.append(f"{name}.{key} = {_fmt(val)}")
        lines.append(f"{name}.distortion = " + " ".join(_fmt(d) for d in cam.distortion))
    lines.append("extrinsic.R = " + " ".join(_fmt(v) for v in rig.extrinsic.R.ravel()))
    lines.append("extrinsic.t = " + " ".join(_fmt(v) for v in rig.extrinsic.t))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# trajectories


def _fmt(v) -> str:
    s = f"{float(v) + 0.0:.9g}"
    return "0" if s == "-0" else s


def format_stamp(us: int) -> str:
    """Microseconds as decimal seconds with nine fractional digits, exactly."""
    us = int(us)
    sign = "-" if us < 0 else ""
    q, r = divmod(abs(us), 1_000_000)
    return f"{sign}{q}.{r:06d}000"


def parse_stamp(text: str) -> int:
    return int((Decimal(text) * 1_000_000).to_integral_value())


def format_pose(p: Pose) -> str:
    q = p.quaternion()
    return " ".join([format_stamp(p.stamp)] + [_fmt(v) for v in (*p.t, *q)])


def write_trajectory(path, poses):
    """One ``stamp tx ty tz qx qy qz qw`` line per pose (stamp in seconds)."""
    poses = [getattr(p, "pose", p) for p in poses]
    text = "".join(format_pose(p) + "\n" for p in poses)
    with open(path, "w", newline="\n") as fh:
        fh.write(text)


def read_trajectory(path) -> list[Pose]:
    poses = []
    with open(path) as fh:
        for n, raw in enumerate(fh, 1):
            s = raw.split("#", 1)[0].strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) != 8:
                raise FormatError(f"{path}: line {n}: expected 8 fields, got {len(parts)}")
            try:
                stamp = parse_stamp(parts[0])
                vals = [float(v) for v in parts[1:]]
            except (InvalidOperation, ValueError):
                raise FormatError(f"{path}: line {n}: non-numeric field") from None
            q = np.array(vals[3:])
            if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
                raise FormatError(f"{path}: line {n}: quaternion norm {np.linalg.norm(q):.9f}")
            poses.append(Pose.from_quaternion(q, vals[:3], stamp))
    for i in range(1, len(poses)):
        if poses[i].stamp < poses[i - 1].stamp:
            raise FormatError(f"{path}: stamps decrease at pose {i}")
    return poses


# ---------------------------------------------------------------------------
# images and sidecars


def write_pgm(path, surface):
    Path(path).write_bytes(surface.to_pgm_bytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5" or int(fields[3]) != 255:
        raise FormatError(f"{path}: not an 8-bit binary PGM")
    W, H = int(fields[1]), int(fields[2])
    return np.frombuffer(data[pos + 1:pos + 1 + W * H], dtype=np.uint8).reshape(H, W)


def write_correspondences(path, rows):
    """CSV sidecar ``junction_id,t_us,cam,x,y`` for the generator's junction tracks."""
    with open(path, "w", newline="\n") as fh:
        fh.write("junction_id,t_us,cam,x,y\n")
        for j, t, cam, x, y in rows:
            fh.write(f"{j},{t},{cam},{x:.6f},{y:.6f}\n")
