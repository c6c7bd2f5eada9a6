"""IMU strapdown motion model and the six-parameter gyroscope error model.

State derivative (body velocity v, attitude q body-to-world, world position p):

    vdot = a + R(q)^T g - omega x v
    qdot = 0.5 * q * (0, omega)
    pdot = R(q) v

The gyroscope error model maps true rates to measured rates through an
upper-triangular matrix M plus an offset b:

    omega_m = M(yaw_scale, misalign) @ omega + bias
    M = [[1, 0, -m_yx], [0, 1, m_xy], [0, 0, s_z]]

The filter always consumes corrected rates omega = M^-1 (omega_m - bias); all
parameter Jacobians are taken through this inverse map.

Error-state layout for the 9x9 nav Jacobian is [velocity, attitude, position]
with the attitude error applied on the world side (see geom module docstring).
"""

from dataclasses import dataclass, field

import numpy as np

from . import geom

GRAVITY = 9.81

MAX_STEP_S = 0.1
MIN_YAW_SCALE = 1e-6


@dataclass
class NavState:
    """Body-frame velocity [m/s], attitude quaternion (body->world), world position [m]."""
    vel: np.ndarray
    quat: np.ndarray
    pos: np.ndarray

    @staticmethod
    def identity() -> "NavState":
        return NavState(np.zeros(3), geom.IDENTITY_QUAT.copy(), np.zeros(3))

    def copy(self) -> "NavState":
        return NavState(self.vel.copy(), self.quat.copy(), self.pos.copy())


@dataclass
class ImuSample:
    t: float
    omega_m: np.ndarray   # measured angular rate [rad/s]
    accel_m: np.ndarray   # measured specific force [m/s^2]


@dataclass
class GyroParams:
    """Gyroscope offsets [rad/s], yaw-rate scale, yaw-rate cross coupling (small angles)."""
    bias: np.ndarray = field(default_factory=lambda: np.zeros(3))
    yaw_scale: float = 1.0
    misalign_yx: float = 0.0
    misalign_xy: float = 0.0

    def as_vector(self) -> np.ndarray:
        return np.array([self.bias[0], self.bias[1], self.bias[2],
                         self.yaw_scale, self.misalign_yx, self.misalign_xy])

    @staticmethod
    def from_vector(v: np.ndarray) -> "GyroParams":
        return GyroParams(np.asarray(v[:3], dtype=float).copy(),
                          float(v[3]), float(v[4]), float(v[5]))

    def copy(self) -> "GyroParams":
        return GyroParams(self.bias.copy(), self.yaw_scale,
                          self.misalign_yx, self.misalign_xy)


@dataclass
class GravityModel:
    g: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, -GRAVITY]))


GRAVITY_DEFAULT = GravityModel()


def error_matrix(params: GyroParams) -> np.ndarray:
    """Upper-triangular rate-error matrix M."""
    return np.array([
        [1.0, 0.0, -params.misalign_yx],
        [0.0, 1.0, params.misalign_xy],
        [0.0, 0.0, params.yaw_scale],
    ])


def apply_gyro_error(omega_true: np.ndarray, params: GyroParams) -> np.ndarray:
    """Forward error map: what the gyro outputs for a true rate."""
    return error_matrix(params) @ omega_true + params.bias


def correct_gyro(omega_m: np.ndarray, params: GyroParams) -> np.ndarray:
    """Invert the error model: estimated true rate from a measurement."""
    if params.yaw_scale <= MIN_YAW_SCALE:
        raise ValueError(f"degenerate yaw scale {params.yaw_scale}")
    u = omega_m - params.bias
    s = params.yaw_scale
    wz = u[2] / s
    return np.array([u[0] + params.misalign_yx * wz,
                     u[1] - params.misalign_xy * wz,
                     wz])


def corrected_rate_param_jacobian(omega_m: np.ndarray,
                                  params: GyroParams) -> np.ndarray:
    """3x6 derivative of the corrected rate w.r.t. (bias, s_z, m_yx, m_xy).

    Columns follow GyroParams.as_vector ordering.
    """
    s = params.yaw_scale
    minv = np.array([
        [1.0, 0.0, params.misalign_yx / s],
        [0.0, 1.0, -params.misalign_xy / s],
        [0.0, 0.0, 1.0 / s],
    ])
    wz = (omega_m[2] - params.bias[2]) / s  # corrected yaw rate
    jac = np.zeros((3, 6))
    jac[:, :3] = -minv
    jac[:, 3] = np.array([-params.misalign_yx * wz / s,
                          params.misalign_xy * wz / s,
                          -wz / s])
    jac[:, 4] = np.array([wz, 0.0, 0.0])
    jac[:, 5] = np.array([0.0, -wz, 0.0])
    return jac


def nav_derivative(s: NavState, omega: np.ndarray, accel: np.ndarray,
                   grav: GravityModel | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(vdot, qdot, pdot) for corrected rates and measured specific force."""
    g = GRAVITY_DEFAULT.g if grav is None else grav.g
    r = geom.quat_to_rot(s.quat)
    vdot = accel + r.T @ g - geom.cross3(omega, s.vel)
    qdot = 0.5 * geom._mul_raw(s.quat, np.array([0.0, omega[0], omega[1], omega[2]]))
    pdot = r @ s.vel
    return vdot, qdot, pdot


def _deriv_flat(y, wx, wy, wz, ax, ay, az, gx, gy, gz):
    """RK4 stage derivative in plain float math (hot path)."""
    vx, vy, vz, qw, qx, qy, qz, px, py, pz = y
    r00 = 1.0 - 2.0 * (qy * qy + qz * qz)
    r01 = 2.0 * (qx * qy - qw * qz)
    r02 = 2.0 * (qx * qz + qw * qy)
    r10 = 2.0 * (qx * qy + qw * qz)
    r11 = 1.0 - 2.0 * (qx * qx + qz * qz)
    r12 = 2.0 * (qy * qz - qw * qx)
    r20 = 2.0 * (qx * qz - qw * qy)
    r21 = 2.0 * (qy * qz + qw * qx)
    r22 = 1.0 - 2.0 * (qx * qx + qy * qy)
    return (
        ax + r00 * gx + r10 * gy + r20 * gz - (wy * vz - wz * vy),
        ay + r01 * gx + r11 * gy + r21 * gz - (wz * vx - wx * vz),
        az + r02 * gx + r12 * gy + r22 * gz - (wx * vy - wy * vx),
        0.5 * (-qx * wx - qy * wy - qz * wz),
        0.5 * (qw * wx + qy * wz - qz * wy),
        0.5 * (qw * wy - qx * wz + qz * wx),
        0.5 * (qw * wz + qx * wy - qy * wx),
        r00 * vx + r01 * vy + r02 * vz,
        r10 * vx + r11 * vy + r12 * vz,
        r20 * vx + r21 * vy + r22 * vz,
    )


def propagate_nav(s: NavState, imu: ImuSample, params: GyroParams, dt: float,
                  grav: GravityModel | None = None) -> NavState:
    """One RK4 step of the nav state with gyro-corrected rates.

    Implemented in scalar float math; tests pin it against the coupled
    propagator used by the filter.
    """
    if not 0.0 < dt <= MAX_STEP_S:
        raise ValueError(f"step dt={dt} outside (0, {MAX_STEP_S}]")
    omega = correct_gyro(imu.omega_m, params)
    g = GRAVITY_DEFAULT.g if grav is None else grav.g
    args = (omega[0], omega[1], omega[2],
            imu.accel_m[0], imu.accel_m[1], imu.accel_m[2],
            g[0], g[1], g[2])
    y0 = (s.vel[0], s.vel[1], s.vel[2],
          s.quat[0], s.quat[1], s.quat[2], s.quat[3],
          s.pos[0], s.pos[1], s.pos[2])
    k1 = _deriv_flat(y0, *args)
    half = 0.5 * dt
    k2 = _deriv_flat(tuple(a + half * b for a, b in zip(y0, k1)), *args)
    k3 = _deriv_flat(tuple(a + half * b for a, b in zip(y0, k2)), *args)
    k4 = _deriv_flat(tuple(a + dt * b for a, b in zip(y0, k3)), *args)
    sixth = dt / 6.0
    y1 = [a + sixth * (b + 2.0 * c + 2.0 * d + e)
          for a, b, c, d, e in zip(y0, k1, k2, k3, k4)]
    norm = np.sqrt(y1[3] ** 2 + y1[4] ** 2 + y1[5] ** 2 + y1[6] ** 2)
    out = NavState(np.array(y1[0:3]),
                   np.array(y1[3:7]) / norm,
                   np.array(y1[7:10]))
    if not (np.isfinite(out.vel).all() and np.isfinite(out.pos).all()
            and np.isfinite(norm)):
        raise FloatingPointError("non-finite nav state after propagation step")
    return out


def nav_jacobian(s: NavState, omega: np.ndarray,
                 grav: GravityModel | None = None) -> np.ndarray:
    """9x9 error-state Jacobian F_B, rows/cols [v, theta, p].

    The attitude row is zero: a world-side attitude error is constant under
    the flow when both trajectories integrate the same rates.
    """
    g = GRAVITY_DEFAULT.g if grav is None else grav.g
    r = geom.quat_to_rot(s.quat)
    f = np.zeros((9, 9))
    f[0:3, 0:3] = -geom.skew(omega)
    f[0:3, 3:6] = r.T @ geom.skew(g)
    f[6:9, 0:3] = r
    f[6:9, 3:6] = -geom.skew(r @ s.vel)
    return f


def nav_param_jacobian(s: NavState, omega_m: np.ndarray,
                       params: GyroParams) -> np.ndarray:
    """9x6 sensitivity of the nav error-state flow to the gyro parameters.

    Velocity rows: [v x] d(omega)/d(params); attitude rows lift the rate
    sensitivity to the world frame; position rows are zero.
    """
    jw = corrected_rate_param_jacobian(omega_m, params)
    r = geom.quat_to_rot(s.quat)
    psi = np.zeros((9, 6))
    psi[0:3, :] = geom.skew(s.vel) @ jw
    psi[3:6, :] = r @ jw
    return psi
