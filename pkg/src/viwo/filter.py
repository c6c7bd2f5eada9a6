"""Adaptive error-state Kalman filter with separated RLS parameter estimation.

The error state stacks the nav tangent [velocity, attitude, position] and one
[bearing tangent (2), inverse depth (1)] block per feature slot:

    index 0:3   body velocity error
    index 3:6   world-side attitude error (exp on the left)
    index 6:9   world position error
    index 9+3i  slot i feature error

Prediction integrates the coupled nav/feature dynamics with RK4 at IMU rate
and propagates the covariance with the Euler transition matrix Phi = I + F dt.
The update stacks all measurement rows of a camera frame, performs a standard
EKF innovation, and then a recursive-least-squares innovation with forgetting
factor on the six gyroscope parameters through the regressor matrix
Omega = H * Upsilon, where Upsilon tracks the sensitivity of the error state
to the parameters.  Residuals are measured-minus-predicted everywhere.

Feature slots have fixed capacity and stable indices; inactive slots keep a
placeholder unit variance and zero cross-covariance, and their sensitivity
rows are zeroed on (re)initialization.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import chi2

from . import geom
from .dynamics import (MAX_STEP_S, GravityModel, GyroParams, ImuSample,
                       NavState, apply_gyro_error, correct_gyro,
                       corrected_rate_param_jacobian)
from .features import (RHO_CEIL, RHO_FLOOR, CameraExtrinsics, FeatureState,
                       derivative_batch, linearize_batch)
from .image import (Image, build_pyramid, detect_features, extract_patch_set,
                    klt_align)
from .sensors import (CameraIntrinsics, ProjectionError,
                      VehicleVelocityMeasurement,
                      camera_measurement_jacobian, project, unproject,
                      vehicle_measurement_jacobian,
                      vehicle_predicted_measurement,
                      vehicle_velocity_measurement)

NAV_DIM = 9
FEAT_DIM = 3


@dataclass
class NoiseConfig:
    """Process/measurement noise levels, initial covariances, RLS settings."""
    gyro_noise: float = 2.618e-4        # rad/s/sqrt(Hz)
    accel_noise: float = 2.0e-3         # m/s^2/sqrt(Hz)
    pos_process: float = 1.0e-4         # m/sqrt(s), covariance regularization
    bearing_process: float = 2.0e-4     # rad/sqrt(s) per feature
    rho_process: float = 2.0e-3         # (1/m)/sqrt(s) per feature

    sigma_wheel: float = 0.05           # m/s
    sigma_lateral: float = 0.08         # m/s
    sigma_vertical: float = 0.1         # m/s
    sigma_bearing: float = 1.5e-3       # rad, direct-bearing mode
    sigma_intensity: float = 4.0        # 8-bit intensity units
    sigma_track_px: float = 0.4         # px, aligned-track fallback rows
    sigma_zupt: float = 0.02            # m/s

    lam: float = 0.9995                 # RLS forgetting factor
    p0_vel: float = 0.1
    p0_att: float = 0.01
    p0_pos: float = 0.01
    s0_bias: float = 0.02               # rad/s
    s0_scale: float = 0.03
    s0_misalign: float = 0.03

    sigma_bearing0: float = 0.01        # rad, new-feature bearing std
    rho0: float = 0.1                   # 1/m, new-feature inverse depth
    sigma_rho0: float = 0.5

    lateral_min_speed: float = 10.0     # validity gate for the lateral row
    lateral_max_ay: float = 4.0
    lateral_inflation: float = 100.0

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("forgetting factor must be in (0, 1]")
        for name in ("gyro_noise", "accel_noise", "sigma_wheel", "sigma_lateral",
                     "sigma_vertical", "sigma_bearing", "sigma_intensity",
                     "sigma_zupt"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    def s0_matrix(self) -> np.ndarray:
        return np.diag([self.s0_bias ** 2] * 3 + [self.s0_scale ** 2]
                       + [self.s0_misalign ** 2] * 2)


@dataclass
class RowGroup:
    """One gating unit of measurement rows (a feature, or the vehicle block).

    Rows are stored sparsely: h_local holds the (m, k) block over the state
    columns listed in cols; the dense stacked H is materialized per update.
    """
    label: str
    slot: int | None
    residual: np.ndarray
    cols: np.ndarray         # state column indices (k,)
    h_local: np.ndarray      # (m, k)
    r_diag: np.ndarray

    def dense(self, dim: int) -> np.ndarray:
        h = np.zeros((len(self.residual), dim))
        h[:, self.cols] = self.h_local
        return h


@dataclass
class FilterState:
    """Snapshot of the full filter state (copies; safe to share)."""
    t: float
    nav: NavState
    params: GyroParams
    slots: list
    cov: np.ndarray
    param_cov: np.ndarray
    sensitivity: np.ndarray


# --- joint propagation and linearization (also used by the jacobian audit) ---

def joint_derivative(vel, quat, pos, qf, rho, omega, accel, ext, g):
    r = geom.quat_to_rot(quat)
    vdot = accel + r.T @ g - geom.cross3(omega, vel)
    qdot = 0.5 * geom._mul_raw(quat, np.array([0.0, omega[0], omega[1], omega[2]]))
    pdot = r @ vel
    if qf.shape[0]:
        v_c = ext.r_cb @ (vel + geom.cross3(omega, ext.lever_arm))
        w_c = ext.r_cb @ omega
        qfdot, rhodot = derivative_batch(qf, rho, v_c, w_c)
    else:
        qfdot = np.zeros((0, 4))
        rhodot = np.zeros(0)
    return vdot, qdot, pdot, qfdot, rhodot


def _dir_stage(p, rho, vel, omega, ext):
    """Feature direction/inverse-depth rates for one RK4 stage.

    Direction kinematics: pdot = p x omega_C + rho * (p (p.v_C) - v_C), using
    p x (p x v) = p (p.v) - v for unit directions; the bearing gauge is
    reconstructed after the step by a minimal rotation, the discrete
    analogue of the spin-free tangent lift.
    """
    v_c = ext.r_cb @ (vel + geom.cross3(omega, ext.lever_arm))
    w_c = ext.r_cb @ omega
    pv = p @ v_c
    pp = (p * p).sum(axis=1)   # RK4 stage points are not exactly unit
    pdot = geom.cross_rows(p, w_c)
    pdot += rho[:, None] * (p * pv[:, None] - v_c[None, :] * pp[:, None])
    rhodot = rho ** 2 * pv
    return pdot, rhodot


def propagate_joint(nav: NavState, qf: np.ndarray, rho: np.ndarray,
                    omega: np.ndarray, accel: np.ndarray, dt: float,
                    ext: CameraExtrinsics, g: np.ndarray):
    """One RK4 step of the coupled nav + feature dynamics (corrected rates).

    The nav block integrates in scalar float math (same formulas as
    dynamics.propagate_nav); features integrate on the direction sphere and
    the bearing quaternions are re-attached with the minimal (spin-free)
    rotation, matching the left N-lift tangent convention to O(dt^3).
    """
    from .dynamics import _deriv_flat
    half = 0.5 * dt
    sixth = dt / 6.0
    args = (omega[0], omega[1], omega[2], accel[0], accel[1], accel[2],
            g[0], g[1], g[2])
    y0 = (nav.vel[0], nav.vel[1], nav.vel[2],
          nav.quat[0], nav.quat[1], nav.quat[2], nav.quat[3],
          nav.pos[0], nav.pos[1], nav.pos[2])
    n1 = _deriv_flat(y0, *args)
    y_b = tuple(a + half * b for a, b in zip(y0, n1))
    n2 = _deriv_flat(y_b, *args)
    y_c = tuple(a + half * b for a, b in zip(y0, n2))
    n3 = _deriv_flat(y_c, *args)
    y_d = tuple(a + dt * b for a, b in zip(y0, n3))
    n4 = _deriv_flat(y_d, *args)
    y1 = [a + sixth * (b + 2.0 * c + 2.0 * d + e)
          for a, b, c, d, e in zip(y0, n1, n2, n3, n4)]
    norm = np.sqrt(y1[3] ** 2 + y1[4] ** 2 + y1[5] ** 2 + y1[6] ** 2)
    nav_new = NavState(np.array(y1[0:3]), np.array(y1[3:7]) / norm,
                       np.array(y1[7:10]))
    if not (np.isfinite(nav_new.vel).all() and np.isfinite(nav_new.pos).all()
            and np.isfinite(norm)):
        raise FloatingPointError("non-finite state after propagation")

    if not qf.shape[0]:
        return nav_new, qf, rho

    p0 = geom.quats_to_dirs(qf)
    vel1 = np.array(y_b[0:3])   # vel at the half step (k1-based)
    vel2 = np.array(y_c[0:3])   # vel at the half step (k2-based)
    vel3 = np.array(y_d[0:3])   # vel at the full step (k3-based)
    f1 = _dir_stage(p0, rho, nav.vel, omega, ext)
    f2 = _dir_stage(p0 + half * f1[0], rho + half * f1[1], vel1, omega, ext)
    f3 = _dir_stage(p0 + half * f2[0], rho + half * f2[1], vel2, omega, ext)
    f4 = _dir_stage(p0 + dt * f3[0], rho + dt * f3[1], vel3, omega, ext)
    p1 = p0 + sixth * (f1[0] + 2.0 * f2[0] + 2.0 * f3[0] + f4[0])
    rho_new = rho + sixth * (f1[1] + 2.0 * f2[1] + 2.0 * f3[1] + f4[1])
    p1 /= np.sqrt((p1 * p1).sum(axis=1))[:, None]
    if not np.isfinite(rho_new).all():
        raise FloatingPointError("non-finite feature state after propagation")

    # re-attach the gauge: minimal rotation taking p0 onto p1
    axis = geom.cross_rows(p0, p1)
    s = np.sqrt((axis * axis).sum(axis=1))
    c = (p0 * p1).sum(axis=1)
    angle = np.arctan2(s, c)
    scale = np.where(s < 1e-300, 0.0, angle / np.maximum(s, 1e-300))
    theta = axis * scale[:, None]
    half_ang = 0.5 * np.sqrt((theta * theta).sum(axis=1))
    sinc = np.where(half_ang < 1e-8, 0.5, np.sin(half_ang) / np.maximum(2.0 * half_ang, 1e-300))
    dq = np.empty((qf.shape[0], 4))
    dq[:, 0] = np.cos(half_ang)
    dq[:, 1:4] = theta * sinc[:, None]
    qf_new = geom.quat_mul_batch(dq, qf)
    return nav_new, qf_new, rho_new


def assemble_linearization(nav: NavState, qf: np.ndarray, rho: np.ndarray,
                           omega: np.ndarray, omega_m: np.ndarray,
                           params: GyroParams, ext: CameraExtrinsics,
                           g: np.ndarray):
    """(F, Psi) over [nav, features] in one pass (compact layout)."""
    cnt = qf.shape[0]
    n = NAV_DIM + FEAT_DIM * cnt
    r = geom.quat_to_rot(nav.quat)
    f = np.zeros((n, n))
    f[0:3, 0:3] = -geom.skew(omega)
    f[0:3, 3:6] = r.T @ geom.skew(g)
    f[6:9, 0:3] = r
    f[6:9, 3:6] = -geom.skew(r @ nav.vel)

    jw = corrected_rate_param_jacobian(omega_m, params)
    psi = np.zeros((n, 6))
    psi[0:3, :] = geom.skew(nav.vel) @ jw
    psi[3:6, :] = r @ jw

    if cnt:
        v_c = ext.r_cb @ (nav.vel + geom.cross3(omega, ext.lever_arm))
        w_c = ext.r_cb @ omega
        diag, coupling, psi_blocks = linearize_batch(
            qf, rho, v_c, w_c, ext.r_cb, ext.lever_arm, jw)
        for k in range(cnt):
            o = NAV_DIM + FEAT_DIM * k
            f[o:o + 3, o:o + 3] = diag[k]
            f[o:o + 3, 0:3] = coupling[k]
            psi[o:o + 3, :] = psi_blocks[k]
    return f, psi


def assemble_f_compact(nav: NavState, qf: np.ndarray, rho: np.ndarray,
                       omega: np.ndarray, ext: CameraExtrinsics,
                       g: np.ndarray) -> np.ndarray:
    """Error-state dynamics matrix over [nav, features] (compact layout)."""
    omega_m = apply_gyro_error(omega, GyroParams())
    return assemble_linearization(nav, qf, rho, omega, omega_m, GyroParams(),
                                  ext, g)[0]


def assemble_psi_compact(nav: NavState, qf: np.ndarray, rho: np.ndarray,
                         omega_m: np.ndarray, params: GyroParams,
                         ext: CameraExtrinsics) -> np.ndarray:
    """Parameter-sensitivity matrix Psi over [nav, features] (compact)."""
    omega = correct_gyro(omega_m, params)
    return assemble_linearization(nav, qf, rho, omega, omega_m, params, ext,
                                  np.array([0.0, 0.0, -9.81]))[1]


def kalman_step(p: np.ndarray, h: np.ndarray, r_diag: np.ndarray,
                residual: np.ndarray):
    """Shared EKF innovation: returns (dx, p_new, k, ikh, sigma) or None when
    the innovation covariance is not positive definite."""
    pht = p @ h.T
    sigma = h @ pht + np.diag(r_diag)
    try:
        cho = cho_factor(0.5 * (sigma + sigma.T), lower=True, check_finite=False)
    except LinAlgError:
        return None
    k = cho_solve(cho, pht.T, check_finite=False).T
    dx = k @ residual
    ikh = np.eye(p.shape[0]) - k @ h
    p_new = ikh @ p
    p_new = 0.5 * (p_new + p_new.T)
    return dx, p_new, k, ikh, sigma


def rls_step(s: np.ndarray, omega: np.ndarray, sigma: np.ndarray,
             residual: np.ndarray, lam: float):
    """RLS innovation with forgetting: returns (dtheta, s_new, gamma) or None.

    gamma = S Omega^T (sigma + Omega S Omega^T)^-1,
    s_new = (S - gamma Omega S) / lam.
    """
    lam_mat = sigma + omega @ s @ omega.T
    try:
        cho = cho_factor(0.5 * (lam_mat + lam_mat.T), lower=True,
                         check_finite=False)
    except LinAlgError:
        return None
    gamma = cho_solve(cho, omega @ s, check_finite=False).T
    dtheta = gamma @ residual
    s_new = (s - gamma @ omega @ s) / lam
    s_new = 0.5 * (s_new + s_new.T)
    return dtheta, s_new, gamma


def retract(nav: NavState, dx_nav: np.ndarray) -> NavState:
    """Apply a 9-vector nav error-state correction."""
    return NavState(nav.vel + dx_nav[0:3],
                    geom.quat_mul(geom.so3_exp(dx_nav[3:6]), nav.quat),
                    nav.pos + dx_nav[6:9])


_PARAM_BIAS_LIMIT = 0.1      # rad/s
_PARAM_SCALE_RANGE = (0.5, 2.0)
_PARAM_MISALIGN_LIMIT = 0.1
_VEL_COLS = np.array([0, 1, 2])


class AdaptiveEkf:
    """Single-writer filter instance; see module docstring for conventions."""

    def __init__(self, noise: NoiseConfig | None = None,
                 ext: CameraExtrinsics | None = None,
                 intr: CameraIntrinsics | None = None,
                 capacity: int = 16,
                 rho_sg: float = 0.0,
                 calibrate: bool = True,
                 use_lateral: bool = True,
                 use_vertical: bool = True,
                 params: GyroParams | None = None,
                 gravity: GravityModel | None = None,
                 pyramid_levels: int = 2,
                 patch_size: int = 8,
                 fast_threshold: float = 10.0,
                 gate_quantile: float = 0.99):
        self.noise = noise or NoiseConfig()
        self.ext = ext or CameraExtrinsics()
        self.intr = intr
        self.capacity = int(capacity)
        self.rho_sg = float(rho_sg)
        self.calibrate = bool(calibrate)
        self.use_lateral = bool(use_lateral)
        self.use_vertical = bool(use_vertical)
        self.gravity = (gravity or GravityModel()).g
        self.pyramid_levels = pyramid_levels
        self.patch_size = patch_size
        self.fast_threshold = fast_threshold
        self.gate_quantile = gate_quantile
        self.klt_max_shift_px = 20.0
        self.photometric_basin_px = 1.0

        self.t = 0.0
        self.nav = NavState.identity()
        self.params = (params or GyroParams()).copy()
        self._qf = np.tile(geom.IDENTITY_QUAT, (self.capacity, 1))
        self._rho = np.full(self.capacity, self.noise.rho0)
        self._active = np.zeros(self.capacity, dtype=bool)
        self.patches: list = [None] * self.capacity
        n = NAV_DIM + FEAT_DIM * self.capacity
        self.dim = n
        p0 = np.zeros(n)
        p0[0:3] = self.noise.p0_vel ** 2
        p0[3:6] = self.noise.p0_att ** 2
        p0[6:9] = self.noise.p0_pos ** 2
        p0[NAV_DIM:] = 1.0  # inactive placeholder
        self.cov = np.diag(p0)
        self.param_cov = self.noise.s0_matrix() if self.calibrate else np.zeros((6, 6))
        self.upsilon = np.zeros((n, 6))
        self._eye = np.eye(n)
        self._miss = np.zeros(self.capacity, dtype=int)
        self._gated = np.zeros(self.capacity, dtype=int)
        self._wheel_zero_since = None
        self._chi2_cache: dict[int, float] = {}
        self.counters = {
            "predicts": 0, "updates": 0, "updates_skipped": 0,
            "groups_gated": 0, "camera_rows": 0, "vehicle_rows": 0,
            "zupt_rows": 0, "features_initialized": 0, "features_dropped": 0,
            "param_clamps": 0, "slots_ignored": 0,
        }

    # -- bookkeeping ---------------------------------------------------------

    def initialize(self, t: float, nav: NavState) -> None:
        self.t = float(t)
        self.nav = nav.copy()

    @property
    def slots(self) -> list:
        """FeatureState per slot (None when inactive); built on access."""
        return [FeatureState(self._qf[i].copy(), float(self._rho[i]))
                if self._active[i] else None for i in range(self.capacity)]

    def feature(self, slot: int) -> FeatureState:
        return FeatureState(self._qf[slot].copy(), float(self._rho[slot]))

    def snapshot(self) -> FilterState:
        return FilterState(self.t, self.nav.copy(), self.params.copy(),
                           self.slots, self.cov.copy(), self.param_cov.copy(),
                           self.upsilon.copy())

    def active_slots(self) -> list[int]:
        return [int(i) for i in np.nonzero(self._active)[0]]

    def _state_indices(self, act: list[int]) -> np.ndarray:
        idx = list(range(NAV_DIM))
        for i in act:
            o = NAV_DIM + FEAT_DIM * i
            idx.extend((o, o + 1, o + 2))
        return np.array(idx, dtype=int)

    def _chi2(self, dof: int) -> float:
        if dof not in self._chi2_cache:
            self._chi2_cache[dof] = float(chi2.ppf(self.gate_quantile, dof))
        return self._chi2_cache[dof]

    # -- prediction ----------------------------------------------------------

    def predict(self, imu: ImuSample) -> None:
        dt = imu.t - self.t
        if not 0.0 < dt <= MAX_STEP_S:
            raise ValueError(f"IMU step dt={dt:.4f} outside (0, {MAX_STEP_S}]")
        omega = correct_gyro(imu.omega_m, self.params)
        act = np.nonzero(self._active)[0]
        qf = self._qf[act]
        rho = self._rho[act]

        f_c, psi_c = assemble_linearization(self.nav, qf, rho, omega,
                                            imu.omega_m, self.params,
                                            self.ext, self.gravity)
        idx = self._state_indices(act)
        phi = self._eye.copy()
        phi[np.ix_(idx, idx)] += f_c * dt

        q_diag = np.zeros(self.dim)
        q_diag[0:3] = self.noise.accel_noise ** 2 * dt
        q_diag[3:6] = self.noise.gyro_noise ** 2 * dt
        q_diag[6:9] = self.noise.pos_process ** 2 * dt
        for i in act:
            o = NAV_DIM + FEAT_DIM * i
            q_diag[o:o + 2] = self.noise.bearing_process ** 2 * dt
            q_diag[o + 2] = self.noise.rho_process ** 2 * dt

        nav_new, qf_new, rho_new = propagate_joint(
            self.nav, qf, rho, omega, imu.accel_m, dt, self.ext, self.gravity)

        cov = phi @ self.cov @ phi.T
        cov[np.diag_indices_from(cov)] += q_diag
        self.cov = 0.5 * (cov + cov.T)

        ups = phi @ self.upsilon
        ups[idx, :] += psi_c * dt
        self.upsilon = ups

        self.nav = nav_new
        if len(act):
            self._qf[act] = qf_new
            self._rho[act] = np.clip(rho_new, RHO_FLOOR, RHO_CEIL)
        self.t = imu.t
        self.counters["predicts"] += 1

    # -- measurement row construction ----------------------------------------

    def note_wheel(self, t: float, v_x_m: float) -> None:
        """Track standstill state from the wheel-speed stream."""
        if v_x_m != 0.0:
            self._wheel_zero_since = None
        elif self._wheel_zero_since is None:
            self._wheel_zero_since = t

    def standstill_active(self, t: float, hold_s: float = 0.5) -> bool:
        return (self._wheel_zero_since is not None
                and t - self._wheel_zero_since >= hold_s)

    def vehicle_groups(self, veh: VehicleVelocityMeasurement) -> list[RowGroup]:
        z = vehicle_velocity_measurement(veh.v_x_m, veh.a_y_m, self.rho_sg)
        pred = vehicle_predicted_measurement(self.nav.vel, veh.v_x_m, veh.a_y_m,
                                             self.rho_sg)
        hv = vehicle_measurement_jacobian(self.rho_sg, veh.a_y_m)
        residual = z - pred
        sig_lat = self.noise.sigma_lateral
        if (abs(veh.v_x_m) < self.noise.lateral_min_speed
                or abs(veh.a_y_m) > self.noise.lateral_max_ay):
            sig_lat *= self.noise.lateral_inflation
        rows = [0, 2] if self.use_vertical else [0]
        if self.use_lateral:
            rows = sorted(rows + [1])
        r_map = {0: self.noise.sigma_wheel, 1: sig_lat, 2: self.noise.sigma_vertical}
        return [RowGroup("vehicle", None, residual[rows], _VEL_COLS,
                         hv[rows, :], np.array([r_map[r] ** 2 for r in rows]))]

    def zupt_group(self) -> RowGroup:
        return RowGroup("zupt", None, -self.nav.vel.copy(), _VEL_COLS,
                        np.eye(3), np.full(3, self.noise.sigma_zupt ** 2))

    def bearing_group(self, slot: int, observed: np.ndarray) -> RowGroup:
        residual = geom.s2_boxminus(observed, self._qf[slot])
        o = NAV_DIM + FEAT_DIM * slot
        return RowGroup("bearing", slot, residual,
                        np.array([o, o + 1]), np.eye(2),
                        np.full(2, self.noise.sigma_bearing ** 2))

    def intensity_group(self, slot: int, pyramid: list[Image],
                        detections: list[tuple[float, float]] | None = None
                        ) -> RowGroup | None:
        """Camera rows for one feature in image mode.

        The template is acquired by a pyramidal KLT alignment.  When a
        detection list is supplied, the start point is the single detection
        inside the prediction gate (none or several candidates: the feature
        is skipped this frame, rejecting ambiguous associations between
        identical-looking targets).  Within the photometric basin the rows
        are the intensity residuals with the full measurement chain
        (QR-compressed to two rows); when the prior lands farther out, the
        aligned position becomes a direct bearing observation so the
        linearization stays valid.  Returns None when not measurable.
        """
        feat = self.feature(slot)
        patch = self.patches[slot]
        if patch is None:
            return None
        try:
            (u0, v0), _ = project(feat.bearing, self.intr)
        except ProjectionError:
            return None
        start = (u0, v0)
        if detections is not None:
            o = NAV_DIM + FEAT_DIM * slot
            sigma_px = np.sqrt(max(self.cov[o, o], self.cov[o + 1, o + 1])) * self.intr.fx
            r_gate = min(3.0 * sigma_px + 3.0, self.klt_max_shift_px)
            near = [(u, v) for u, v in detections
                    if np.hypot(u - u0, v - v0) <= r_gate]
            if len(near) != 1:
                return None
            start = near[0]
        u, v, ok = klt_align(patch, pyramid, start[0], start[1],
                             max_shift=6.0 if detections is not None
                             else self.klt_max_shift_px)
        if not ok:
            return None
        o = NAV_DIM + FEAT_DIM * slot
        if np.hypot(u - u0, v - v0) > self.photometric_basin_px:
            try:
                observed = unproject(u, v, self.intr)
            except ProjectionError:
                return None
            residual = geom.s2_boxminus(observed, feat.bearing)
            sigma_tan = self.noise.sigma_track_px / self.intr.fx
            return RowGroup("intensity", slot, residual,
                            np.array([o, o + 1]), np.eye(2),
                            np.full(2, sigma_tan ** 2))
        res_rows = []
        jac_rows = []
        for lvl in range(patch.num_levels):
            out = camera_measurement_jacobian(feat, patch, pyramid, self.intr, lvl)
            if out is None:
                return None
            res_rows.append(out[0])
            jac_rows.append(out[1])
        residual = np.concatenate(res_rows)
        h_tan = np.vstack(jac_rows)
        q, r2 = np.linalg.qr(h_tan)
        if abs(r2[0, 0]) < 1e-9:
            return None  # textureless: no constraint
        resid_c = q.T @ residual
        return RowGroup("intensity", slot, resid_c, np.array([o, o + 1]), r2,
                        np.full(2, self.noise.sigma_intensity ** 2))

    # -- update --------------------------------------------------------------

    def gate(self, group: RowGroup) -> bool:
        """Mahalanobis test at the configured chi-square quantile."""
        p_block = self.cov[np.ix_(group.cols, group.cols)]
        sig = group.h_local @ p_block @ group.h_local.T + np.diag(group.r_diag)
        r = group.residual
        if len(r) == 2:
            det = sig[0, 0] * sig[1, 1] - sig[0, 1] * sig[1, 0]
            if det <= 0.0:
                return False
            d2 = (sig[1, 1] * r[0] * r[0] - 2.0 * sig[0, 1] * r[0] * r[1]
                  + sig[0, 0] * r[1] * r[1]) / det
        else:
            try:
                d2 = float(r @ np.linalg.solve(sig, r))
            except np.linalg.LinAlgError:
                return False
        return d2 <= self._chi2(len(r))

    def update(self, groups: list[RowGroup]) -> dict:
        """Stacked EKF + RLS update; returns per-group keep/drop report."""
        report = {"kept": [], "gated": [], "skipped": False}
        kept = []
        for g in groups:
            if self.gate(g):
                kept.append(g)
                report["kept"].append((g.label, g.slot))
            else:
                report["gated"].append((g.label, g.slot))
                self.counters["groups_gated"] += 1
        if not kept:
            return report

        m_total = sum(len(g.residual) for g in kept)
        h = np.zeros((m_total, self.dim))
        residual = np.empty(m_total)
        r_diag = np.empty(m_total)
        row = 0
        for g in kept:
            m = len(g.residual)
            h[row:row + m, g.cols] = g.h_local
            residual[row:row + m] = g.residual
            r_diag[row:row + m] = g.r_diag
            row += m

        step = kalman_step(self.cov, h, r_diag, residual)
        if step is None:
            report["skipped"] = True
            self.counters["updates_skipped"] += 1
            return report
        dx, p_new, k, ikh, sigma = step

        if self.calibrate:
            omega_reg = h @ self.upsilon
            rls = rls_step(self.param_cov, omega_reg, sigma, residual,
                           self.noise.lam)
            if rls is not None:
                dtheta, s_new, _ = rls
                dx = dx + self.upsilon @ dtheta
                self._apply_param_step(dtheta)
                self.param_cov = s_new
            self.upsilon = ikh @ self.upsilon

        self.cov = p_new
        self.nav = retract(self.nav, dx[0:NAV_DIM])
        for i in np.nonzero(self._active)[0]:
            o = NAV_DIM + FEAT_DIM * i
            self._qf[i] = geom.s2_boxplus(self._qf[i], dx[o:o + 2])
            self._rho[i] = np.clip(self._rho[i] + dx[o + 2], RHO_FLOOR, RHO_CEIL)

        for g in kept:
            if g.label in ("bearing", "intensity"):
                self.counters["camera_rows"] += len(g.residual)
            elif g.label == "vehicle":
                self.counters["vehicle_rows"] += len(g.residual)
            elif g.label == "zupt":
                self.counters["zupt_rows"] += len(g.residual)
        self.counters["updates"] += 1
        return report

    def _apply_param_step(self, dtheta: np.ndarray) -> None:
        vec = self.params.as_vector() + dtheta
        clipped = vec.copy()
        clipped[0:3] = np.clip(vec[0:3], -_PARAM_BIAS_LIMIT, _PARAM_BIAS_LIMIT)
        clipped[3] = np.clip(vec[3], *_PARAM_SCALE_RANGE)
        clipped[4:6] = np.clip(vec[4:6], -_PARAM_MISALIGN_LIMIT,
                               _PARAM_MISALIGN_LIMIT)
        if not np.array_equal(vec, clipped):
            self.counters["param_clamps"] += 1
        self.params = GyroParams.from_vector(clipped)

    # -- feature lifecycle ----------------------------------------------------

    def init_feature(self, slot: int, bearing: np.ndarray,
                     rho: float | None = None,
                     patch=None) -> None:
        if not 0 <= slot < self.capacity:
            self.counters["slots_ignored"] += 1
            return
        o = NAV_DIM + FEAT_DIM * slot
        self._active[slot] = True
        self._qf[slot] = geom.quat_normalize(np.asarray(bearing, dtype=float))
        self._rho[slot] = self.noise.rho0 if rho is None else float(rho)
        self.patches[slot] = patch
        self.cov[o:o + 3, :] = 0.0
        self.cov[:, o:o + 3] = 0.0
        self.cov[o, o] = self.noise.sigma_bearing0 ** 2
        self.cov[o + 1, o + 1] = self.noise.sigma_bearing0 ** 2
        self.cov[o + 2, o + 2] = self.noise.sigma_rho0 ** 2
        self.upsilon[o:o + 3, :] = 0.0
        self._miss[slot] = 0
        self._gated[slot] = 0
        self.counters["features_initialized"] += 1

    def drop_feature(self, slot: int) -> None:
        o = NAV_DIM + FEAT_DIM * slot
        self._active[slot] = False
        self.patches[slot] = None
        self.cov[o:o + 3, :] = 0.0
        self.cov[:, o:o + 3] = 0.0
        self.cov[o, o] = self.cov[o + 1, o + 1] = self.cov[o + 2, o + 2] = 1.0
        self.upsilon[o:o + 3, :] = 0.0
        self._miss[slot] = 0
        self._gated[slot] = 0
        self.counters["features_dropped"] += 1

    def _health_drop(self, slot: int) -> bool:
        """Cull features with degenerate depth or runaway bearing variance."""
        o = NAV_DIM + FEAT_DIM * slot
        bear_var = max(self.cov[o, o], self.cov[o + 1, o + 1])
        return (self._rho[slot] <= RHO_FLOOR or self._rho[slot] >= RHO_CEIL
                or bear_var > 0.2 ** 2)

    # -- per-frame orchestration ----------------------------------------------

    def process_bearing_frame(self, t: float, observations: list[tuple[int, np.ndarray]],
                              vehicle: VehicleVelocityMeasurement | None = None,
                              max_misses: int = 3) -> dict:
        """Direct-bearing camera frame: update then feature management."""
        obs = {}
        for slot, q_obs in observations:
            if 0 <= slot < self.capacity:
                obs[slot] = np.asarray(q_obs, dtype=float)
            else:
                self.counters["slots_ignored"] += 1
        groups: list[RowGroup] = []
        if vehicle is not None:
            groups.extend(self.vehicle_groups(vehicle))
        if self.standstill_active(t):
            groups.append(self.zupt_group())
        for slot in sorted(obs):
            if self._active[slot]:
                groups.append(self.bearing_group(slot, obs[slot]))
        report = self.update(groups)

        gated_slots = {s for lbl, s in report["gated"] if lbl == "bearing"}
        for slot in self.active_slots():
            if slot in obs:
                if slot in gated_slots:
                    self._gated[slot] += 1
                else:
                    self._gated[slot] = 0
                    self._miss[slot] = 0
            else:
                self._miss[slot] += 1
            if (self._miss[slot] >= max_misses or self._health_drop(slot)):
                self.drop_feature(slot)
            elif self._gated[slot] >= max_misses and slot in obs:
                # persistent disagreement: the slot was re-assigned upstream
                self.drop_feature(slot)
                self.init_feature(slot, obs[slot])
        for slot, q_obs in sorted(obs.items()):
            if not self._active[slot]:
                self.init_feature(slot, q_obs)
        return report

    def process_image_frame(self, t: float, img: Image,
                            vehicle: VehicleVelocityMeasurement | None = None,
                            max_misses: int = 3) -> dict:
        """Rendered/recorded-frame update via patch intensity residuals."""
        if self.intr is None:
            raise ValueError("image mode requires camera intrinsics")
        pyramid = build_pyramid(img, self.pyramid_levels)
        detections = detect_features(img, 256, threshold=self.fast_threshold,
                                     min_distance=6.0)
        groups: list[RowGroup] = []
        if vehicle is not None:
            groups.extend(self.vehicle_groups(vehicle))
        if self.standstill_active(t):
            groups.append(self.zupt_group())
        measured = set()
        for slot in self.active_slots():
            g = self.intensity_group(slot, pyramid, detections)
            if g is not None:
                groups.append(g)
                measured.add(slot)
        report = self.update(groups)

        gated = {s for lbl, s in report["gated"] if lbl == "intensity"}
        for slot in self.active_slots():
            if slot in measured and slot not in gated:
                self._miss[slot] = 0
                self._gated[slot] = 0
            elif slot in gated:
                self._gated[slot] += 1
            else:
                self._miss[slot] += 1
            if (self._miss[slot] >= max_misses or self._gated[slot] >= max_misses
                    or self._health_drop(slot)):
                self.drop_feature(slot)

        # top up empty slots from this frame's detections, keeping a margin
        # from the features still being tracked
        free = [int(i) for i in np.nonzero(~self._active)[0]]
        if free:
            taken = []
            for slot in self.active_slots():
                try:
                    (u, v), _ = project(self._qf[slot], self.intr)
                    taken.append(np.array([u, v]))
                except ProjectionError:
                    continue
            for u, v in detections:
                if not free:
                    break
                pt = np.array([u, v])
                if any(np.hypot(*(pt - q)) < 12.0 for q in taken):
                    continue
                patch = extract_patch_set(pyramid, u, v, self.patch_size)
                if patch is None:
                    continue
                self.init_feature(free.pop(0), unproject(u, v, self.intr),
                                  patch=patch)
                taken.append(pt)
        return report

    # -- diagnostics -----------------------------------------------------------

    def covariance_health(self) -> tuple[float, float]:
        """(min eigenvalue of P, min eigenvalue of S); symmetric by upkeep."""
        p_min = float(np.linalg.eigvalsh(self.cov)[0])
        s_min = float(np.linalg.eigvalsh(self.param_cov)[0])
        return p_min, s_min
