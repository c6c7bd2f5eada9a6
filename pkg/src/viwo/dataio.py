"""Dataset-directory I/O: CSV streams, calibration and parameter files.

A dataset directory holds comma-separated files with exact headers (SI
units, timestamps in decimal seconds):

    imu.csv       t,wx,wy,wz,ax,ay,az
    wheel.csv     t,vx
    bearings.csv  t,slot,bx,by,bz            (direct-bearing camera mode)
    frames.csv    t,filename                 (image mode, PGM frames/)
    gt.csv        t,px,py,pz,qw,qx,qy,qz     (optional ground truth)
    calib.txt     key = value calibration (camera, extrinsics, side-slip)
    truth-params.txt  injected gyroscope parameters (simulated sets only)

Recorded logs from other sources can be converted into this layout; see
scripts/convert_dataset.py for the field mapping.  All writes go through a
temp-file-and-rename so partially written datasets are never observed.
"""

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dynamics import GyroParams
from .features import CameraExtrinsics
from .sensors import CameraIntrinsics
from . import geom

IMU_HEADER = "t,wx,wy,wz,ax,ay,az"
WHEEL_HEADER = "t,vx"
BEARINGS_HEADER = "t,slot,bx,by,bz"
FRAMES_HEADER = "t,filename"
POSE_HEADER = "t,px,py,pz,qw,qx,qy,qz"
PARAMS_HEADER = "t,b_x,b_y,b_z,s_z,s_yx,s_xy,S_bx,S_by,S_bz,S_sz,S_syx,S_sxy"


class DataError(ValueError):
    """Malformed dataset content (maps to exit code 3 in the cli)."""


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def atomic_write_bytes(path, blob: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def write_csv(path, header: str, rows) -> None:
    lines = [header]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def read_csv(path, header: str) -> np.ndarray:
    """Numeric CSV with an exact expected header; malformed rows abort with
    their line number."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with open(path) as fh:
        first = fh.readline().strip()
        if first != header:
            raise DataError(f"{path}: expected header '{header}', got '{first}'")
        rows = []
        width = len(header.split(","))
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != width:
                raise DataError(f"{path}:{lineno}: expected {width} fields, "
                                f"got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return np.array(rows) if rows else np.zeros((0, width))


def read_frames_csv(path) -> list[tuple[float, str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    out = []
    with open(path) as fh:
        first = fh.readline().strip()
        if first != FRAMES_HEADER:
            raise DataError(f"{path}: expected header '{FRAMES_HEADER}'")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields")
            try:
                out.append((float(parts[0]), parts[1]))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return out


# --- hierarchical key-value text ----------------------------------------------

def parse_kv(text: str) -> dict[str, list[str]]:
    """'section.key = v1 v2 ...' lines; '#' starts a comment."""
    out: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = value.split()
    return out


def load_kv(path) -> dict[str, list[str]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    try:
        return parse_kv(path.read_text())
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from None


def format_kv(entries: dict) -> str:
    lines = []
    for key, value in entries.items():
        if isinstance(value, (list, tuple, np.ndarray)):
            lines.append(f"{key} = " + " ".join(_fmt(v) for v in value))
        else:
            lines.append(f"{key} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def kv_floats(kv: dict, key: str, count: int | None = None) -> np.ndarray:
    if key not in kv:
        raise DataError(f"missing key '{key}'")
    vals = np.array([float(v) for v in kv[key]])
    if count is not None and len(vals) != count:
        raise DataError(f"key '{key}': expected {count} values, got {len(vals)}")
    return vals


# --- calibration and parameter files -------------------------------------------

def save_calib(path, intr: CameraIntrinsics, ext: CameraExtrinsics,
               rho_sg: float) -> None:
    rotvec = geom.so3_log(geom.rot_to_quat(ext.r_cb))
    atomic_write_text(path, format_kv({
        "cam.fx": intr.fx, "cam.fy": intr.fy,
        "cam.cx": intr.cx, "cam.cy": intr.cy,
        "cam.k1": intr.k1, "cam.k2": intr.k2,
        "cam.width": intr.width, "cam.height": intr.height,
        "ext.rotvec_cb": rotvec,
        "ext.lever_arm": ext.lever_arm,
        "vehicle.rho_sg": rho_sg,
    }))


def load_calib(path):
    kv = load_kv(path)
    intr = CameraIntrinsics(
        fx=float(kv_floats(kv, "cam.fx", 1)[0]),
        fy=float(kv_floats(kv, "cam.fy", 1)[0]),
        cx=float(kv_floats(kv, "cam.cx", 1)[0]),
        cy=float(kv_floats(kv, "cam.cy", 1)[0]),
        k1=float(kv_floats(kv, "cam.k1", 1)[0]),
        k2=float(kv_floats(kv, "cam.k2", 1)[0]),
        width=int(kv_floats(kv, "cam.width", 1)[0]),
        height=int(kv_floats(kv, "cam.height", 1)[0]))
    ext = CameraExtrinsics(
        geom.quat_to_rot(geom.so3_exp(kv_floats(kv, "ext.rotvec_cb", 3))),
        kv_floats(kv, "ext.lever_arm", 3))
    rho_sg = float(kv_floats(kv, "vehicle.rho_sg", 1)[0])
    return intr, ext, rho_sg


def save_gyro_params(path, params: GyroParams) -> None:
    atomic_write_text(path, format_kv({
        "gyro.bias": params.bias,
        "gyro.yaw_scale": params.yaw_scale,
        "gyro.misalign_yx": params.misalign_yx,
        "gyro.misalign_xy": params.misalign_xy,
    }))


def load_gyro_params(path) -> GyroParams:
    kv = load_kv(path)
    return GyroParams(kv_floats(kv, "gyro.bias", 3),
                      float(kv_floats(kv, "gyro.yaw_scale", 1)[0]),
                      float(kv_floats(kv, "gyro.misalign_yx", 1)[0]),
                      float(kv_floats(kv, "gyro.misalign_xy", 1)[0]))


@dataclass
class DatasetPaths:
    root: Path

    def __init__(self, root):
        self.root = Path(root)

    @property
    def imu(self):
        return self.root / "imu.csv"

    @property
    def wheel(self):
        return self.root / "wheel.csv"

    @property
    def bearings(self):
        return self.root / "bearings.csv"

    @property
    def frames_csv(self):
        return self.root / "frames.csv"

    @property
    def frames_dir(self):
        return self.root / "frames"

    @property
    def gt(self):
        return self.root / "gt.csv"

    @property
    def calib(self):
        return self.root / "calib.txt"

    @property
    def truth_params(self):
        return self.root / "truth-params.txt"


def pose_rows(records) -> list:
    """(t, NavState-like. pos, quat) tuples -> pose CSV rows."""
    rows = []
    for t, pos, quat in records:
        rows.append([t, pos[0], pos[1], pos[2],
                     quat[0], quat[1], quat[2], quat[3]])
    return rows
