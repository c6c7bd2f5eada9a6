"""Deterministic ground-truth and sensor synthesis at desk scale.

A scenario is an ordered list of segments (straights, arcs, stops).  The
compiler turns it into time phases with piecewise-linear speed and curvature
(clothoid-style blends at curvature changes, acceleration-limited speed
ramps), from which body rates and specific forces follow analytically.  The
rear-axle sideslip follows the single-track relation, so the lateral-velocity
model holds exactly in steady cornering:

    v_y = -rho_sg * a_y * v_x,   heading = path tangent + rho_sg * V^2 * kappa

Ground truth is *defined* as the RK4 flow of the nav dynamics under the
emitted rate/force samples (sampled mid-interval).  Sensors synthesized from
that flow are therefore exactly kinematically consistent with it: a filter
fed noise-free streams reproduces the truth to integrator precision.

The body origin sits at the rear-axle center, so wheel speed and the lateral
model need no extra lever arm.
"""

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .dynamics import (GRAVITY, GyroParams, ImuSample, NavState,
                       apply_gyro_error, propagate_nav)
from .features import CameraExtrinsics, landmark_to_feature
from .image import Image
from .sensors import CameraIntrinsics, project

MAX_LATERAL_ACCEL = 8.0     # m/s^2, feasibility gate for arcs


@dataclass
class Straight:
    length: float
    speed: float


@dataclass
class Arc:
    radius: float
    angle_deg: float          # signed: positive turns left
    speed: float


@dataclass
class Stop:
    duration: float


@dataclass
class TrajectorySpec:
    segments: list
    rate_hz: float = 100.0
    camera_rate_hz: float = 10.0
    rho_sg: float = 0.004        # s^2/m
    accel_limit: float = 1.5     # m/s^2 longitudinal ramp limit
    blend_time: float = 1.2      # s, curvature blend duration

    def __post_init__(self):
        if self.rate_hz < 50.0:
            raise ValueError("sample rate must be at least 50 Hz")
        if self.rate_hz % self.camera_rate_hz != 0:
            raise ValueError("camera rate must divide the IMU rate")
        for seg in self.segments:
            if isinstance(seg, (Straight, Arc)) and seg.speed < 0:
                raise ValueError("segment speeds must be non-negative")
            if isinstance(seg, Arc):
                if seg.radius <= 1.0:
                    raise ValueError("arc radius must exceed 1 m")
                a_lat = seg.speed ** 2 / seg.radius
                if a_lat > MAX_LATERAL_ACCEL:
                    raise ValueError(
                        f"infeasible arc: lateral acceleration {a_lat:.1f} m/s^2")


@dataclass
class SensorErrorSpec:
    params: GyroParams = field(default_factory=GyroParams)
    gyro_noise: float = 2.618e-4    # rad/s/sqrt(Hz)  (0.015 deg/s/sqrt(Hz))
    accel_noise: float = 2.0e-3     # m/s^2/sqrt(Hz)
    wheel_noise: float = 0.05       # m/s
    pixel_noise: float = 0.5        # px equivalent bearing noise
    image_noise: float = 0.5        # intensity units (image mode)
    seed: int = 0

    def __post_init__(self):
        for name in ("gyro_noise", "accel_noise", "wheel_noise",
                     "pixel_noise", "image_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class TrajectorySample:
    t: float
    nav: NavState
    omega: np.ndarray    # true body rate over the interval ending at t
    accel: np.ndarray    # true specific force over the same interval


@dataclass
class Phase:
    """Time phase: cubic speed polynomial, linear curvature.

    v(tau) = c0 + c1 tau + c2 tau^2 + c3 tau^3,  kappa(tau) = k0 + kd tau.
    Speed ramps are smoothstep-shaped so acceleration is continuous across
    phase boundaries (midpoint-sampled inputs then integrate cleanly).
    """
    duration: float
    c: tuple[float, float, float, float]
    k0: float
    k1: float

    @staticmethod
    def const(duration: float, v: float, k0: float, k1: float) -> "Phase":
        return Phase(duration, (v, 0.0, 0.0, 0.0), k0, k1)

    @staticmethod
    def ramp(duration: float, v0: float, v1: float, kappa: float) -> "Phase":
        dv = v1 - v0
        t = duration
        return Phase(t, (v0, 0.0, 3.0 * dv / t ** 2, -2.0 * dv / t ** 3),
                     kappa, kappa)

    @property
    def kdot(self):
        return (self.k1 - self.k0) / self.duration

    def speed(self, tau: float) -> float:
        c0, c1, c2, c3 = self.c
        return c0 + tau * (c1 + tau * (c2 + tau * c3))

    def speed_dot(self, tau: float) -> float:
        _, c1, c2, c3 = self.c
        return c1 + tau * (2.0 * c2 + 3.0 * tau * c3)

    def distance(self, tau: float) -> float:
        c0, c1, c2, c3 = self.c
        return tau * (c0 + tau * (c1 / 2.0 + tau * (c2 / 3.0 + tau * c3 / 4.0)))

    def chi_increment(self, tau: float) -> float:
        c0, c1, c2, c3 = self.c
        kd = self.kdot
        k0 = self.k0
        return (k0 * self.distance(tau)
                + kd * tau ** 2 * (c0 / 2.0 + tau * (c1 / 3.0
                                                     + tau * (c2 / 4.0 + tau * c3 / 5.0))))


def _compile_phases(spec: TrajectorySpec) -> list[Phase]:
    """Segments -> time phases with ramps and curvature blends carved in.

    Speed ramps live in the faster neighbour, so segment boundaries are
    crossed at the slower segment's speed; curvature blends straddle each
    boundary (half in each neighbour) at that boundary speed.
    """
    items = []
    for seg in spec.segments:
        if isinstance(seg, Stop):
            items.append({"kind": "stop", "duration": seg.duration})
        elif isinstance(seg, Straight):
            items.append({"kind": "drive", "length": seg.length,
                          "kappa": 0.0, "speed": seg.speed})
        else:
            items.append({"kind": "drive",
                          "length": abs(np.deg2rad(seg.angle_deg)) * seg.radius,
                          "kappa": np.sign(seg.angle_deg) / seg.radius,
                          "speed": seg.speed})

    def neighbour_speed(i, step):
        j = i + step
        if 0 <= j < len(items):
            return 0.0 if items[j]["kind"] == "stop" else items[j]["speed"]
        return None

    def neighbour_kappa(i, step):
        j = i + step
        if 0 <= j < len(items) and items[j]["kind"] == "drive":
            return items[j]["kappa"]
        return None

    phases: list[Phase] = []
    a_lim = spec.accel_limit
    for i, item in enumerate(items):
        if item["kind"] == "stop":
            phases.append(Phase.const(item["duration"], 0.0, 0.0, 0.0))
            continue
        v = item["speed"]
        kappa = item["kappa"]
        length = item["length"]
        prev_v = neighbour_speed(i, -1)
        next_v = neighbour_speed(i, 1)
        v_in = v if prev_v is None else min(v, prev_v)
        v_out = v if next_v is None else min(v, next_v)
        prev_k = neighbour_kappa(i, -1)
        next_k = neighbour_kappa(i, 1)

        pieces = []
        if prev_k is not None and prev_k != kappa:
            t_b = spec.blend_time / 2.0
            pieces.append(Phase.const(t_b, v_in, 0.5 * (prev_k + kappa), kappa))
            length -= v_in * t_b
        if v_in < v:
            # smoothstep ramp: peak accel 1.5 dv/T kept inside the limit
            t_r = 1.5 * (v - v_in) / a_lim
            pieces.append(Phase.ramp(t_r, v_in, v, kappa))
            length -= (v + v_in) / 2.0 * t_r
        tail = []
        if v_out < v:
            t_r = 1.5 * (v - v_out) / a_lim
            tail.append(Phase.ramp(t_r, v, v_out, kappa))
            length -= (v + v_out) / 2.0 * t_r
        if next_k is not None and next_k != kappa:
            t_b = spec.blend_time / 2.0
            tail.append(Phase.const(t_b, v_out, kappa, 0.5 * (kappa + next_k)))
            length -= v_out * t_b
        if length <= 0.0:
            raise ValueError("segment too short for its ramps and blends")
        pieces.append(Phase.const(length / v, v, kappa, kappa))
        phases.extend(pieces)
        phases.extend(tail)
    return [p for p in phases if p.duration > 1e-9]


class _Profile:
    """Analytic lookup of (V, Vdot, kappa, kappadot, chi) over time."""

    def __init__(self, phases: list[Phase]):
        self.phases = phases
        self.starts = np.concatenate([[0.0], np.cumsum([p.duration for p in phases])])
        self.chi0 = np.zeros(len(phases) + 1)
        for i, p in enumerate(phases):
            self.chi0[i + 1] = self.chi0[i] + p.chi_increment(p.duration)

    @property
    def total_time(self) -> float:
        return float(self.starts[-1])

    def at(self, t: float):
        idx = int(np.searchsorted(self.starts, t, side="right") - 1)
        idx = min(max(idx, 0), len(self.phases) - 1)
        p = self.phases[idx]
        tau = t - self.starts[idx]
        v = p.speed(tau)
        k = p.k0 + p.kdot * tau
        chi = self.chi0[idx] + p.chi_increment(tau)
        return v, p.speed_dot(tau), k, p.kdot, chi


def generate_trajectory(spec: TrajectorySpec) -> list[TrajectorySample]:
    """Ground-truth stream: RK4 flow of the analytic rate/force profiles."""
    profile = _Profile(_compile_phases(spec))
    dt = 1.0 / spec.rate_hz
    steps = int(np.floor(profile.total_time / dt + 1e-9))
    rho = spec.rho_sg
    g = np.array([0.0, 0.0, -GRAVITY])

    def inputs_at(t_mid):
        v, vdot, k, kdot, chi = profile.at(t_mid)
        a_lat = v * v * k
        psi = chi + rho * a_lat
        psidot = v * k + rho * (2.0 * v * vdot * k + v * v * kdot)
        beta = np.arctan(-rho * a_lat) if v > 0 else 0.0
        v_body = np.array([v * np.cos(beta), v * np.sin(beta), 0.0])
        # world acceleration of the axle point, then specific force
        pxdd = vdot * np.cos(chi) - v * (v * k) * np.sin(chi)
        pydd = vdot * np.sin(chi) + v * (v * k) * np.cos(chi)
        cos_p, sin_p = np.cos(psi), np.sin(psi)
        a_body = np.array([cos_p * pxdd + sin_p * pydd,
                           -sin_p * pxdd + cos_p * pydd,
                           GRAVITY])
        omega = np.array([0.0, 0.0, psidot])
        return omega, a_body, psi, v_body

    omega0, accel0, psi0, vbody0 = inputs_at(0.0)
    nav = NavState(vbody0, geom.so3_exp(np.array([0.0, 0.0, psi0])), np.zeros(3))
    identity = GyroParams()
    out = [TrajectorySample(0.0, nav.copy(), omega0, accel0)]
    t = 0.0
    for k in range(steps):
        t_next = (k + 1) * dt
        omega, accel, _, _ = inputs_at(t + dt / 2.0)
        nav = propagate_nav(nav, ImuSample(t_next, omega, accel), identity, dt)
        out.append(TrajectorySample(t_next, nav.copy(), omega, accel))
        t = t_next
    return out


# --- worlds -------------------------------------------------------------------

@dataclass
class LandmarkWorld:
    points: np.ndarray   # (n, 3) world coordinates


def generate_world(truth: list[TrajectorySample], seed: int = 0,
                   spacing_m: float = 10.0, per_station: int = 4,
                   lateral=(3.0, 30.0), height=(-1.0, 10.0)) -> LandmarkWorld:
    """Corridor of landmarks along the driven path."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFEED]))
    pts = []
    dist = 0.0
    last = truth[0].nav.pos
    for s in truth:
        step = np.linalg.norm(s.nav.pos - last)
        dist += step
        last = s.nav.pos
        if dist >= spacing_m or not pts:
            dist = 0.0
            heading = geom.quat_to_rot(s.nav.quat) @ np.array([1.0, 0.0, 0.0])
            lateral_dir = np.array([-heading[1], heading[0], 0.0])
            for _ in range(per_station):
                side = rng.choice([-1.0, 1.0])
                off = rng.uniform(*lateral)
                h = rng.uniform(*height)
                ahead = rng.uniform(5.0, 40.0)
                pts.append(s.nav.pos + heading * ahead
                           + lateral_dir * side * off + np.array([0, 0, h]))
    return LandmarkWorld(np.array(pts))


def visible_landmarks(world: LandmarkWorld, nav: NavState,
                      intr: CameraIntrinsics, ext: CameraExtrinsics,
                      min_depth: float = 2.0, max_depth: float = 80.0,
                      margin: float = 8.0) -> list[int]:
    """Indices of world points inside the camera frustum, nearest first."""
    r_wb = geom.quat_to_rot(nav.quat)
    cam_world = nav.pos + r_wb @ ext.lever_arm
    d_cam = (world.points - cam_world) @ (ext.r_cb @ r_wb.T).T
    rng_m = np.sqrt((d_cam * d_cam).sum(axis=1))
    ok = (d_cam[:, 0] > 1e-6) & (rng_m >= min_depth) & (rng_m <= max_depth)
    if not ok.any():
        return []
    rx = -d_cam[ok, 1] / d_cam[ok, 0]
    ry = -d_cam[ok, 2] / d_cam[ok, 0]
    r2 = rx * rx + ry * ry
    s = 1.0 + intr.k1 * r2 + intr.k2 * r2 * r2
    u = intr.cx + intr.fx * rx * s
    v = intr.cy + intr.fy * ry * s
    in_img = ((u >= margin) & (u <= intr.width - 1 - margin)
              & (v >= margin) & (v <= intr.height - 1 - margin))
    idx = np.nonzero(ok)[0][in_img]
    order = np.argsort(rng_m[idx], kind="stable")
    return [int(i) for i in idx[order]]


def ensure_coverage(world: LandmarkWorld, truth: list[TrajectorySample],
                    intr: CameraIntrinsics, ext: CameraExtrinsics,
                    frame_stride: int, min_visible: int = 8,
                    seed: int = 1) -> LandmarkWorld:
    """Densify the world until every camera pose sees enough landmarks."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0FFEE]))
    pts = list(world.points)
    for s in truth[::frame_stride]:
        for _ in range(40):
            vis = visible_landmarks(LandmarkWorld(np.array(pts)), s.nav, intr, ext)
            if len(vis) >= min_visible:
                break
            heading = geom.quat_to_rot(s.nav.quat) @ np.array([1.0, 0.0, 0.0])
            lateral_dir = np.array([-heading[1], heading[0], 0.0])
            pts.append(s.nav.pos + heading * rng.uniform(8, 35)
                       + lateral_dir * rng.uniform(-12, 12)
                       + np.array([0, 0, rng.uniform(0.0, 6.0)]))
    return LandmarkWorld(np.array(pts))


# --- sensor synthesis -----------------------------------------------------------

def synthesize_imu(truth: list[TrajectorySample],
                   err: SensorErrorSpec, rate_hz: float) -> list[ImuSample]:
    """Measured rates/forces: forward gyro error model plus white noise."""
    rng = np.random.default_rng(np.random.SeedSequence([err.seed, 1]))
    sg = err.gyro_noise * np.sqrt(rate_hz)
    sa = err.accel_noise * np.sqrt(rate_hz)
    out = []
    for s in truth[1:]:
        omega_m = apply_gyro_error(s.omega, err.params)
        if sg > 0:
            omega_m = omega_m + rng.normal(0.0, sg, 3)
        accel_m = s.accel + (rng.normal(0.0, sa, 3) if sa > 0 else 0.0)
        out.append(ImuSample(s.t, omega_m, accel_m))
    return out


def synthesize_wheel(truth: list[TrajectorySample],
                     err: SensorErrorSpec) -> list[tuple[float, float]]:
    """(t, v_x measured) stream; exact zero at standstill."""
    rng = np.random.default_rng(np.random.SeedSequence([err.seed, 2]))
    out = []
    for s in truth[1:]:
        v = float(s.nav.vel[0])
        if abs(v) < 5e-3:
            out.append((s.t, 0.0))
        else:
            n = rng.normal(0.0, err.wheel_noise) if err.wheel_noise > 0 else 0.0
            out.append((s.t, v + n))
    return out


def synthesize_bearings(truth: list[TrajectorySample], world: LandmarkWorld,
                        intr: CameraIntrinsics, ext: CameraExtrinsics,
                        err: SensorErrorSpec, frame_stride: int,
                        n_slots: int = 16):
    """Per-frame (t, slot, bearing) observations with persistent slot ids."""
    rng = np.random.default_rng(np.random.SeedSequence([err.seed, 3]))
    sigma_tan = err.pixel_noise / intr.fx
    slot_of: dict[int, int] = {}
    frames = []
    for s in truth[::frame_stride]:
        if s.t == 0.0:
            continue
        vis = visible_landmarks(world, s.nav, intr, ext)
        vis_set = set(vis)
        for lm, slot in list(slot_of.items()):
            if lm not in vis_set:
                del slot_of[lm]
        free = sorted(set(range(n_slots)) - set(slot_of.values()))
        # assign fresh slots to far landmarks: they stay in view longest
        for lm in reversed(vis):
            if lm not in slot_of and free:
                slot_of[lm] = free.pop(0)
        rows = []
        for lm, slot in sorted(slot_of.items(), key=lambda kv: kv[1]):
            feat = landmark_to_feature(world.points[lm], s.nav, ext)
            bearing = feat.bearing
            if sigma_tan > 0:
                bearing = geom.s2_boxplus(bearing, rng.normal(0.0, sigma_tan, 2))
            rows.append((slot, bearing))
        frames.append((s.t, rows))
    return frames


def render_frame(nav: NavState, world: LandmarkWorld, intr: CameraIntrinsics,
                 ext: CameraExtrinsics, err: SensorErrorSpec,
                 rng: np.random.Generator | None = None,
                 blob_sigma: float = 1.5, blob_amp: float = 200.0,
                 background: float = 10.0) -> Image:
    """Landmarks drawn as Gaussian blobs on a uniform gray background."""
    data = np.full((intr.height, intr.width), background)
    for idx in visible_landmarks(world, nav, intr, ext):
        feat = landmark_to_feature(world.points[idx], nav, ext)
        (u, v), _ = project(feat.bearing, intr, require_in_image=False)
        lo_u, hi_u = int(max(0, u - 6)), int(min(intr.width, u + 7))
        lo_v, hi_v = int(max(0, v - 6)), int(min(intr.height, v + 7))
        if lo_u >= hi_u or lo_v >= hi_v:
            continue
        uu, vv = np.meshgrid(np.arange(lo_u, hi_u, dtype=float),
                             np.arange(lo_v, hi_v, dtype=float))
        data[lo_v:hi_v, lo_u:hi_u] += blob_amp * np.exp(
            -((uu - u) ** 2 + (vv - v) ** 2) / (2.0 * blob_sigma ** 2))
    if rng is not None and err.image_noise > 0:
        data = data + rng.normal(0.0, err.image_noise, data.shape)
    return Image(np.clip(data, 0.0, 255.0))


# --- scenario presets -----------------------------------------------------------

def urban_loop(laps: int = 1, stop_s: float = 10.0,
               straight_speed: float = 14.0, turn_speed: float = 6.0,
               rho_sg: float = 0.004) -> TrajectorySpec:
    """Square loop: four 200 m straights joined by 90-degree turns (R=15 m),
    preceded by a standstill phase.  Turns run slow enough to stay feasible."""
    segs: list = [Stop(stop_s)]
    for _ in range(laps):
        for _ in range(4):
            segs.append(Straight(200.0, straight_speed))
            segs.append(Arc(15.0, 90.0, turn_speed))
    return TrajectorySpec(segs, rho_sg=rho_sg)


def mini_loop(rho_sg: float = 0.004) -> TrajectorySpec:
    """Short mixed scenario (~40 s) for smoke tests and examples."""
    return TrajectorySpec([Stop(2.0), Straight(150.0, 12.0), Arc(25.0, 90.0, 7.0),
                           Straight(100.0, 12.0)], rho_sg=rho_sg)


def highway_route(n_curves: int = 8, straight_m: float = 500.0,
                  radius: float = 60.0, speed: float = 13.0,
                  rho_sg: float = 0.004) -> TrajectorySpec:
    """Sweeping-curve route that keeps the lateral-velocity model inside its
    validity envelope (v > 10 m/s, |a_y| < 4 m/s^2); about 5 km total."""
    segs: list = [Stop(5.0)]
    for i in range(n_curves):
        segs.append(Straight(straight_m, speed))
        segs.append(Arc(radius, 90.0 if i % 2 == 0 else -90.0, speed))
    segs.append(Straight(straight_m, speed))
    return TrajectorySpec(segs, rho_sg=rho_sg)
