import numpy as np
import pytest

from conftest import random_pose
from evstereo import io
from evstereo.geometry import EVENT_DTYPE, Pose, StereoRig
from evstereo.surface import TimeSurface


def random_stream(rng, n, W=346, H=260):
    ev = np.zeros(n, EVENT_DTYPE)
    ev["t"] = np.sort(rng.integers(0, 10**9, n))
    ev["x"] = rng.integers(0, W, n)
    ev["y"] = rng.integers(0, H, n)
    ev["p"] = rng.choice([-1, 1], n)
    return ev


def test_empty_csv(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("")
    assert len(io.read_events(p).read_all()) == 0


def test_binary_roundtrip_million(tmp_path):
    ev = random_stream(np.random.default_rng(0), 10**6)
    p = tmp_path / "e.evt"
    io.write_events(p, ev, 346, 260)
    assert p.stat().st_size == 16 + 13 * 10**6
    back = io.read_events(p, chunk_size=100_000).read_all()
    assert np.array_equal(back, ev)


def test_csv_and_binary_agree(tmp_path):
    ev = random_stream(np.random.default_rng(1), 20_000)
    io.write_events(tmp_path / "e.csv", ev)
    io.write_events(tmp_path / "e.evt", ev, 346, 260)
    a = io.read_events(tmp_path / "e.csv", chunk_size=3000).read_all()
    b = io.read_events(tmp_path / "e.evt").read_all()
    assert np.array_equal(a, b) and np.array_equal(a, ev)


def test_csv_header_and_polarity(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("t_us,x,y,p\n5,1,2,0\n7,3,4,1\n")
    ev = io.read_events(p).read_all()
    assert ev["p"].tolist() == [-1, 1] and ev["t"].tolist() == [5, 7]


def test_out_of_sensor_records_dropped(tmp_path):
    ev = random_stream(np.random.default_rng(2), 100, 10, 10)
    ev["x"][[3, 50]] = [10, 12]
    p = tmp_path / "e.evt"
    io.write_events(p, ev, 10, 10)
    r = io.read_events(p)
    out = r.read_all()
    assert len(out) == 98 and r.dropped == 2


def test_bad_magic(tmp_path):
    p = tmp_path / "e.evt"
    p.write_bytes(b"EVT2" + bytes(12) + b"\x00\xff")
    with pytest.raises(io.FormatError, match="byte 0"):
        io.read_events(p)


def test_truncated_record(tmp_path):
    p = tmp_path / "e.evt"
    io.write_events(p, random_stream(np.random.default_rng(3), 10), 346, 260)
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(io.FormatError, match=f"byte {16 + 13 * 9}"):
        io.read_events(p).read_all()


def test_malformed_csv_line(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("1,2,3,1\n2,2,3\n")
    with pytest.raises(io.FormatError, match="line 2"):
        io.read_events(p).read_all()
    p.write_text("1,2,3,1\n2,2,3,7\n")
    with pytest.raises(io.FormatError, match="line 2"):
        io.read_events(p).read_all()


def test_timestamp_regression(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("10,1,1,1\n20,1,1,1\n15,1,1,1\n")
    with pytest.raises(io.FormatError) as exc:
        io.read_events(p).read_all()
    assert "15" in str(exc.value) and "20" in str(exc.value) and "line 3" in str(exc.value)
    # across a chunk boundary too
    with pytest.raises(io.FormatError, match="line 3"):
        io.read_events(p, chunk_size=2).read_all()


def test_reader_is_lazy(tmp_path):
    ev = random_stream(np.random.default_rng(4), 1000)
    io.write_events(tmp_path / "e.evt", ev, 346, 260)
    chunks = list(io.read_events(tmp_path / "e.evt", chunk_size=300))
    assert [len(c) for c in chunks] == [300, 300, 300, 100]


CALIB = """\
left.fx = 226.38
left.fy = 226.15
left.cx = 173.64
left.cy = 133.73
left.width = 346
left.height = 260
left.distortion = -0.048 0.0057 -0.0014 0.0001
right.fx = 226.02
right.fy = 225.73
right.cx = 174.43
right.cy = 124.20
right.width = 346
right.height = 260
right.distortion = -0.049 0.0061 -0.0016 -0.0002
extrinsic.R = 1 0 0  0 1 0  0 0 1
extrinsic.t = -0.1 0 0
"""


def test_calibration_parses(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text(CALIB)
    rig = io.read_calibration(p)
    assert rig.rectified_baseline == pytest.approx(0.1)
    assert rig.left.width == 346 and rig.right.distortion[0] == -0.049


@pytest.mark.parametrize("edit,key", [
    (lambda s: s.replace("right.fx = 226.02\n", ""), "right.fx"),
    (lambda s: s + "left.fx = 1\n", "left.fx"),
    (lambda s: s.replace("1 0 0  0 1 0  0 0 1", "1 0.01 0  0 1 0  0 0 1"), "extrinsic.R"),
    (lambda s: s.replace("-0.1 0 0", "-0.1 0"), "extrinsic.t"),
])
def test_calibration_errors_name_key(tmp_path, edit, key):
    p = tmp_path / "c.txt"
    p.write_text(edit(CALIB))
    with pytest.raises(io.FormatError, match=key.replace(".", r"\.")):
        io.read_calibration(p)


def test_calibration_roundtrip(tmp_path, distorted_rig):
    io.write_calibration(tmp_path / "c.txt", distorted_rig)
    rig = io.read_calibration(tmp_path / "c.txt")
    assert rig.left == distorted_rig.left and rig.right == distorted_rig.right
    assert np.abs(rig.extrinsic.R - distorted_rig.extrinsic.R).max() < 1e-8


def test_trajectory_formats(tmp_path):
    p = tmp_path / "t.txt"
    io.write_trajectory(p, [])
    assert p.read_text() == ""
    io.write_trajectory(p, [Pose.identity(0)])
    assert p.read_text() == "0.000000000 0 0 0 0 0 0 1\n"
    io.write_trajectory(p, [Pose.identity(1_500_123)])
    assert p.read_text().split()[0] == "1.500123000"


def test_trajectory_roundtrip_and_determinism(tmp_path):
    rng = np.random.default_rng(5)
    poses = [random_pose(rng, np.pi, 1.0, stamp=k * 1234) for k in range(200)]
    io.write_trajectory(tmp_path / "a.txt", poses)
    io.write_trajectory(tmp_path / "b.txt", poses)
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    back = io.read_trajectory(tmp_path / "a.txt")
    for a, b in zip(poses, back):
        assert a.stamp == b.stamp
        assert np.abs(a.t - b.t).max() < 1e-8 and np.abs(a.R - b.R).max() < 1e-8


def test_trajectory_bad_quaternion(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0.0 0 0 0 0 0 0 1.1\n")
    with pytest.raises(io.FormatError, match="line 1"):
        io.read_trajectory(p)


def test_pgm_values(tmp_path):
    v = np.array([[0.0, 1.0, np.exp(-1)], [0.5, 0.25, 0.999]])
    io.write_pgm(tmp_path / "s.pgm", TimeSurface(v, 0, 1.0))
    img = io.read_pgm(tmp_path / "s.pgm")
    assert img.tolist() == np.rint(255 * v).astype(int).tolist()


def test_correspondence_sidecar(tmp_path):
    io.write_correspondences(tmp_path / "c.csv", [(3, 100, "left", 1.5, 2.25)])
    assert (tmp_path / "c.csv").read_text().splitlines() == [
        "junction_id,t_us,cam,x,y", "3,100,left,1.500000,2.250000"]
