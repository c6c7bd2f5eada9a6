"""Per-feature bearing/inverse-depth state and its camera-twist dynamics.

A feature j is (q_f, rho): a bearing quaternion in the camera frame and the
inverse of the range along it.  With p = R(q_f) e1 and tangent basis N, the
dynamics under a camera twist (v_C, omega_C) are

    bearing tangent rate: ddelta = -N^T (omega_C + rho * p x v_C)
    inverse-depth rate:   drho   = rho^2 * p . v_C

All Jacobian blocks below are derived from these two equations (the package
treats finite differences of the flow as the authority; see the jacobian
audit).  Division by rho never occurs, but a floor is enforced because the
inverse-depth state itself degenerates at rho -> 0.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .dynamics import NavState

RHO_FLOOR = 1e-4
RHO_CEIL = 10.0


@dataclass
class FeatureState:
    bearing: np.ndarray          # unit quaternion, camera frame
    rho: float                   # inverse depth [1/m]

    def copy(self) -> "FeatureState":
        return FeatureState(self.bearing.copy(), self.rho)


@dataclass
class CameraExtrinsics:
    """Body-to-camera rotation and the body-frame camera lever arm [m]."""
    r_cb: np.ndarray = field(default_factory=lambda: np.eye(3))
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass
class CameraTwist:
    v_c: np.ndarray
    omega_c: np.ndarray


def camera_twist(s: NavState, omega: np.ndarray,
                 ext: CameraExtrinsics) -> CameraTwist:
    """Camera-frame velocity and rate from body velocity and body rate."""
    v_c = ext.r_cb @ (s.vel + geom.cross3(omega, ext.lever_arm))
    return CameraTwist(v_c, ext.r_cb @ omega)


def feature_derivative(f: FeatureState, tw: CameraTwist) -> tuple[np.ndarray, float]:
    """(bearing tangent rate [rad/s] as 2-vector, inverse-depth rate [1/(m s)])."""
    p = geom.bearing_dir(f.bearing)
    n = geom.projection_n(f.bearing)
    dbear = -n.T @ (tw.omega_c + f.rho * geom.cross3(p, tw.v_c))
    drho = f.rho ** 2 * (p @ tw.v_c)
    return dbear, drho


def feature_jacobians(f: FeatureState, tw: CameraTwist) -> dict[str, np.ndarray]:
    """Analytic blocks of the feature flow.

    Keys: 'dq_dq' (2x2), 'dq_drho' (2,), 'drho_dq' (2,), 'drho_drho' (scalar),
    'dq_dvc' (2x3), 'drho_dvc' (3,), 'dq_dwc' (2x3).
    """
    if f.rho <= RHO_FLOOR:
        raise ValueError(f"inverse depth {f.rho} at or below floor {RHO_FLOOR}")
    p = geom.bearing_dir(f.bearing)
    n = geom.projection_n(f.bearing)
    v, w = tw.v_c, tw.omega_c
    rho = f.rho
    pxv = geom.cross3(p, v)
    dq_dq = (-n.T @ geom.skew(w + rho * pxv) @ n
             - rho * n.T @ geom.skew(v) @ geom.skew(p) @ n)
    dq_drho = -n.T @ pxv
    drho_dq = -rho ** 2 * (v @ geom.skew(p) @ n)
    drho_drho = 2.0 * rho * (p @ v)
    dq_dvc = -rho * n.T @ geom.skew(p)
    drho_dvc = rho ** 2 * p
    dq_dwc = -n.T
    return {
        "dq_dq": dq_dq, "dq_drho": dq_drho,
        "drho_dq": drho_dq, "drho_drho": drho_drho,
        "dq_dvc": dq_dvc, "drho_dvc": drho_dvc, "dq_dwc": dq_dwc,
    }


def feature_rate_jacobian(f: FeatureState, ext: CameraExtrinsics) -> np.ndarray:
    """3x3 sensitivity of (dbearing, drho) to the body rate omega.

    Folds the twist chain: omega_C = R_CB omega and
    v_C = R_CB (v + omega x lever) so d v_C/d omega = -R_CB [lever x].
    """
    p = geom.bearing_dir(f.bearing)
    n = geom.projection_n(f.bearing)
    dvc_dw = -ext.r_cb @ geom.skew(ext.lever_arm)
    out = np.zeros((3, 3))
    out[0:2, :] = -n.T @ ext.r_cb - f.rho * n.T @ geom.skew(p) @ dvc_dw
    out[2, :] = f.rho ** 2 * p @ dvc_dw
    return out


def feature_param_jacobian(f: FeatureState, ext: CameraExtrinsics,
                           jw: np.ndarray) -> np.ndarray:
    """3x6 sensitivity of the feature flow to the gyro parameters.

    jw is the 3x6 corrected-rate parameter Jacobian (dynamics module).
    """
    return feature_rate_jacobian(f, ext) @ jw


def landmark_to_feature(landmark_world: np.ndarray, s: NavState,
                        ext: CameraExtrinsics,
                        min_depth: float = 1.0 / RHO_CEIL) -> FeatureState:
    """Exact feature state of a world point (simulator / oracle use)."""
    r_wb = geom.quat_to_rot(s.quat)
    cam_world = s.pos + r_wb @ ext.lever_arm
    d_cam = ext.r_cb @ (r_wb.T @ (landmark_world - cam_world))
    rng = np.sqrt(d_cam @ d_cam)
    if d_cam[0] <= 0.0:
        raise ValueError("landmark behind the camera")
    if rng < min_depth:
        raise ValueError(f"landmark range {rng} below minimum depth {min_depth}")
    return FeatureState(geom.bearing_from_dir(d_cam / rng), 1.0 / rng)


def feature_to_landmark(f: FeatureState, s: NavState,
                        ext: CameraExtrinsics) -> np.ndarray:
    """World point of a feature state (inverse of landmark_to_feature)."""
    r_wb = geom.quat_to_rot(s.quat)
    cam_world = s.pos + r_wb @ ext.lever_arm
    d_cam = geom.bearing_dir(f.bearing) / f.rho
    return cam_world + r_wb @ (ext.r_cb.T @ d_cam)


# --- batched versions used in the filter's inner loops ----------------------

def derivative_batch(qf: np.ndarray, rho: np.ndarray, v_c: np.ndarray,
                     omega_c: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Feature flow for (n,4)/(n,) arrays: returns (qdot (n,4), drho (n,))."""
    frames = geom.quats_to_frames(qf)
    p = frames[:, :, 0]
    n = frames[:, :, 1:3]
    rate3 = rho[:, None] * geom.cross_rows(p, v_c)
    rate3 += omega_c[None, :]
    # omega_left = -N N^T rate3 expressed without forming N^T explicitly
    dtan0 = -(n[:, 0, 0] * rate3[:, 0] + n[:, 1, 0] * rate3[:, 1]
              + n[:, 2, 0] * rate3[:, 2])
    dtan1 = -(n[:, 0, 1] * rate3[:, 0] + n[:, 1, 1] * rate3[:, 1]
              + n[:, 2, 1] * rate3[:, 2])
    omega_left = np.empty_like(rate3)
    omega_left[:, 0] = n[:, 0, 0] * dtan0 + n[:, 0, 1] * dtan1
    omega_left[:, 1] = n[:, 1, 0] * dtan0 + n[:, 1, 1] * dtan1
    omega_left[:, 2] = n[:, 2, 0] * dtan0 + n[:, 2, 1] * dtan1
    qdot = 0.5 * geom.quat_mul_left_vec(omega_left, qf)
    drho = rho ** 2 * (p @ v_c)
    return qdot, drho


def jacobian_batch(qf: np.ndarray, rho: np.ndarray, v_c: np.ndarray,
                   omega_c: np.ndarray, r_cb: np.ndarray,
                   dvc_dv: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature diagonal 3x3 blocks and 3x3 velocity-coupling blocks.

    dvc_dv is d v_C / d v_B = R_CB.  Returns (diag (n,3,3), coupling (n,3,3))
    with rows ordered [bearing tangent (2), rho].
    """
    cnt = qf.shape[0]
    frames = geom.quats_to_frames(qf)
    p = np.ascontiguousarray(frames[:, :, 0])
    n = frames[:, :, 1:3]
    nt = np.ascontiguousarray(np.swapaxes(n, 1, 2))
    sp = geom.skew_vec(p)
    pxv = geom.cross_rows(p, v_c)
    rate3 = omega_c[None, :] + rho[:, None] * pxv

    diag = np.zeros((cnt, 3, 3))
    nt_srate = nt @ geom.skew_vec(rate3)
    nt_sv_sp = (nt @ geom.skew(v_c)) @ sp
    diag[:, 0:2, 0:2] = -(nt_srate + rho[:, None, None] * nt_sv_sp) @ n
    diag[:, 0:2, 2] = -(nt @ pxv[:, :, None])[:, :, 0]
    vsp = geom.cross_rows(np.broadcast_to(v_c, (cnt, 3)), p)  # v x p rows = v^T [p x]
    diag[:, 2, 0:2] = -rho[:, None] ** 2 * (vsp[:, None, :] @ n)[:, 0, :]
    diag[:, 2, 2] = 2.0 * rho * (p @ v_c)

    coupling = np.zeros((cnt, 3, 3))
    coupling[:, 0:2, :] = -rho[:, None, None] * ((nt @ sp) @ dvc_dv)
    coupling[:, 2, :] = rho[:, None] ** 2 * (p @ dvc_dv)
    return diag, coupling


def param_jacobian_batch(qf: np.ndarray, rho: np.ndarray, r_cb: np.ndarray,
                         lever_arm: np.ndarray, jw: np.ndarray) -> np.ndarray:
    """Batched 3x6 parameter-sensitivity blocks, rows [bearing (2), rho]."""
    cnt = qf.shape[0]
    frames = geom.quats_to_frames(qf)
    p = np.ascontiguousarray(frames[:, :, 0])
    n = frames[:, :, 1:3]
    nt = np.ascontiguousarray(np.swapaxes(n, 1, 2))
    sp = geom.skew_vec(p)
    dvc_dw = -r_cb @ geom.skew(lever_arm)
    out = np.zeros((cnt, 3, 6))
    dten = -(nt @ r_cb) - rho[:, None, None] * ((nt @ sp) @ dvc_dw)
    out[:, 0:2, :] = dten @ jw
    out[:, 2, :] = (rho[:, None] ** 2 * (p @ dvc_dw)) @ jw
    return out


def linearize_batch(qf: np.ndarray, rho: np.ndarray, v_c: np.ndarray,
                    omega_c: np.ndarray, r_cb: np.ndarray,
                    lever_arm: np.ndarray, jw: np.ndarray):
    """Fused per-feature blocks for the filter's prediction step.

    Returns (diag (n,3,3), vel coupling (n,3,3), parameter rows (n,3,6)),
    sharing the frame decomposition across all three.
    """
    cnt = qf.shape[0]
    frames = geom.quats_to_frames(qf)
    p = np.ascontiguousarray(frames[:, :, 0])
    n = frames[:, :, 1:3]
    nt = np.ascontiguousarray(np.swapaxes(n, 1, 2))
    sp = geom.skew_vec(p)
    pxv = geom.cross_rows(p, v_c)
    rate3 = omega_c[None, :] + rho[:, None] * pxv
    nt_sp = nt @ sp
    rho_col = rho[:, None]

    diag = np.zeros((cnt, 3, 3))
    diag[:, 0:2, 0:2] = -(nt @ geom.skew_vec(rate3)
                          + rho[:, None, None] * ((nt @ geom.skew(v_c)) @ sp)) @ n
    diag[:, 0:2, 2] = -(nt @ pxv[:, :, None])[:, :, 0]
    vxp = geom.cross_rows(np.broadcast_to(v_c, (cnt, 3)), p)
    diag[:, 2, 0:2] = -rho_col ** 2 * (vxp[:, None, :] @ n)[:, 0, :]
    diag[:, 2, 2] = 2.0 * rho * (p @ v_c)

    coupling = np.zeros((cnt, 3, 3))
    coupling[:, 0:2, :] = -rho[:, None, None] * (nt_sp @ r_cb)
    coupling[:, 2, :] = rho_col ** 2 * (p @ r_cb)

    dvc_dw = -r_cb @ geom.skew(lever_arm)
    psi = np.zeros((cnt, 3, 6))
    dten = -(nt @ r_cb) - rho[:, None, None] * (nt_sp @ dvc_dw)
    psi[:, 0:2, :] = dten @ jw
    psi[:, 2, :] = (rho_col ** 2 * (p @ dvc_dw)) @ jw
    return diag, coupling, psi
