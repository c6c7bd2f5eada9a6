import numpy as np
import pytest

from viwo import dataio, geom
from viwo.dynamics import GyroParams
from viwo.features import CameraExtrinsics
from viwo.sensors import CameraIntrinsics


def test_csv_round_trip(tmp_path, rng):
    rows = rng.normal(size=(40, 7))
    path = tmp_path / "imu.csv"
    dataio.write_csv(path, dataio.IMU_HEADER, rows)
    back = dataio.read_csv(path, dataio.IMU_HEADER)
    assert np.array_equal(back, rows)   # 17 significant digits round-trip


def test_csv_wrong_header(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(dataio.DataError):
        dataio.read_csv(path, dataio.IMU_HEADER)


def test_csv_malformed_row_reports_line(tmp_path):
    path = tmp_path / "wheel.csv"
    path.write_text("t,vx\n0.0,1.0\n0.1,oops\n")
    with pytest.raises(dataio.DataError) as err:
        dataio.read_csv(path, dataio.WHEEL_HEADER)
    assert ":3:" in str(err.value)
    path.write_text("t,vx\n0.0,1.0\n0.1\n")
    with pytest.raises(dataio.DataError) as err:
        dataio.read_csv(path, dataio.WHEEL_HEADER)
    assert ":3:" in str(err.value)


def test_missing_file():
    with pytest.raises(dataio.DataError):
        dataio.read_csv("/nonexistent/imu.csv", dataio.IMU_HEADER)


def test_kv_parse_and_errors():
    kv = dataio.parse_kv("a.b = 1 2 3\n# comment\nc = hello\n\n")
    assert kv["a.b"] == ["1", "2", "3"]
    assert kv["c"] == ["hello"]
    with pytest.raises(dataio.DataError):
        dataio.parse_kv("not a key value line\n")
    with pytest.raises(dataio.DataError):
        dataio.kv_floats(kv, "missing")
    with pytest.raises(dataio.DataError):
        dataio.kv_floats(kv, "a.b", 2)


def test_calib_round_trip(tmp_path):
    intr = CameraIntrinsics(501.0, 499.0, 321.5, 239.5, -0.21, 0.035, 640, 480)
    ext = CameraExtrinsics(geom.quat_to_rot(geom.so3_exp(np.array([0.02, -0.3, 0.1]))),
                           np.array([1.8, 0.05, 1.2]))
    path = tmp_path / "calib.txt"
    dataio.save_calib(path, intr, ext, 0.0031)
    intr2, ext2, rho = dataio.load_calib(path)
    assert intr2 == intr
    assert np.allclose(ext2.r_cb, ext.r_cb, atol=1e-12)
    assert np.allclose(ext2.lever_arm, ext.lever_arm)
    assert rho == 0.0031


def test_gyro_params_round_trip(tmp_path):
    p = GyroParams(np.array([0.01, -0.02, 0.003]), 1.013, 0.0087, -0.0042)
    path = tmp_path / "params.txt"
    dataio.save_gyro_params(path, p)
    q = dataio.load_gyro_params(path)
    assert np.array_equal(q.bias, p.bias)
    assert q.yaw_scale == p.yaw_scale
    assert q.misalign_yx == p.misalign_yx
    assert q.misalign_xy == p.misalign_xy


def test_atomic_write_replaces(tmp_path):
    path = tmp_path / "f.txt"
    dataio.atomic_write_text(path, "one\n")
    dataio.atomic_write_text(path, "two\n")
    assert path.read_text() == "two\n"
    assert not (tmp_path / "f.txt.tmp").exists()


def test_frames_csv(tmp_path):
    path = tmp_path / "frames.csv"
    dataio.write_csv(path, dataio.FRAMES_HEADER,
                     [[0.1, "frames/000001.pgm"], [0.2, "frames/000002.pgm"]])
    rows = dataio.read_frames_csv(path)
    assert rows == [(0.1, "frames/000001.pgm"), (0.2, "frames/000002.pgm")]
