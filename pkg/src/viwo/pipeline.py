"""Batch pipeline behind the command-line front-end.

Everything here is also usable in-process (tests drive it without touching a
shell): simulate a dataset directory, run the filter over a dataset in
timestamp order, and evaluate estimate-vs-truth trajectories.
"""

import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dataio, geom, sim
from .dynamics import GyroParams, ImuSample, NavState
from .evaluate import TrajectoryRecord, ate_rmse, rpe
from .features import CameraExtrinsics
from .filter import AdaptiveEkf, NoiseConfig
from .image import Image, load_pgm, save_pgm
from .sensors import CameraIntrinsics, VehicleVelocityMeasurement

DEFAULT_INTRINSICS = CameraIntrinsics(500.0, 500.0, 320.0, 240.0,
                                      -0.05, 0.01, 640, 480)
DEFAULT_EXTRINSICS = CameraExtrinsics(np.eye(3), np.array([1.8, 0.0, 1.2]))


@dataclass
class RunConfig:
    """Shared knob set for simulate/run; mirrored by cli flags and the
    key = value config file."""
    dataset: str = ""
    out_dir: str = ""
    scenario: str = "urban_loop"
    laps: int = 1
    seed: int = 0
    measurement_mode: str = "bearing"        # bearing | image
    feature_slots: int = 14
    disable_gyro_calibration: bool = False
    disable_lateral_model: bool = False
    wheel_imu_only: bool = False
    init_params: str = ""                    # path to a gyro-parameter file
    check_psd: bool = False
    zero_noise: bool = False
    rho_sg: float = 0.004
    inject_bias_dps: tuple = (0.0, 0.0, 0.0)  # deg/s
    inject_yaw_scale: float = 1.0
    inject_misalign_deg: tuple = (0.0, 0.0)   # deg, (yx, xy)
    noise: NoiseConfig = field(default_factory=NoiseConfig)

    def __post_init__(self):
        if self.measurement_mode not in ("bearing", "image"):
            raise ValueError(f"unknown measurement mode {self.measurement_mode}")
        if self.wheel_imu_only and self.measurement_mode == "image":
            pass  # camera unused either way
        if self.feature_slots < 1:
            raise ValueError("need at least one feature slot")

    def injected_params(self) -> GyroParams:
        return GyroParams(np.deg2rad(np.asarray(self.inject_bias_dps, dtype=float)),
                          float(self.inject_yaw_scale),
                          float(np.deg2rad(self.inject_misalign_deg[0])),
                          float(np.deg2rad(self.inject_misalign_deg[1])))


def apply_config_overrides(cfg: RunConfig, kv: dict[str, list[str]]) -> RunConfig:
    """Apply 'key = value' entries; 'noise.<field>' reaches the NoiseConfig."""
    simple = {f.name: f.type for f in fields(RunConfig)}
    for key, tokens in kv.items():
        if key.startswith("noise."):
            name = key[6:]
            if not hasattr(cfg.noise, name):
                raise dataio.DataError(f"unknown noise key '{name}'")
            setattr(cfg.noise, name, float(tokens[0]))
        elif key in ("inject_bias_dps", "inject_misalign_deg"):
            setattr(cfg, key, tuple(float(t) for t in tokens))
        elif key in simple:
            current = getattr(cfg, key)
            if isinstance(current, bool):
                setattr(cfg, key, tokens[0].lower() in ("1", "true", "yes"))
            elif isinstance(current, int):
                setattr(cfg, key, int(tokens[0]))
            elif isinstance(current, float):
                setattr(cfg, key, float(tokens[0]))
            else:
                setattr(cfg, key, tokens[0])
        else:
            raise dataio.DataError(f"unknown config key '{key}'")
    return cfg


def build_scenario(cfg: RunConfig) -> sim.TrajectorySpec:
    if cfg.scenario == "urban_loop":
        return sim.urban_loop(laps=cfg.laps, rho_sg=cfg.rho_sg)
    if cfg.scenario == "highway":
        return sim.highway_route(rho_sg=cfg.rho_sg)
    if cfg.scenario == "mini_loop":
        return sim.mini_loop(rho_sg=cfg.rho_sg)
    raise ValueError(f"unknown scenario '{cfg.scenario}'")


# --- simulate -------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> Path:
    """Write a deterministic dataset directory for the configured scenario."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = dataio.DatasetPaths(out)
    spec = build_scenario(cfg)
    err = sim.SensorErrorSpec(params=cfg.injected_params(), seed=cfg.seed)
    if cfg.zero_noise:
        err.gyro_noise = err.accel_noise = err.wheel_noise = 0.0
        err.pixel_noise = err.image_noise = 0.0

    truth = sim.generate_trajectory(spec)
    stride = int(round(spec.rate_hz / spec.camera_rate_hz))
    world = sim.generate_world(truth, seed=cfg.seed)
    world = sim.ensure_coverage(world, truth, DEFAULT_INTRINSICS,
                                DEFAULT_EXTRINSICS, stride, seed=cfg.seed)

    imu = sim.synthesize_imu(truth, err, spec.rate_hz)
    wheel = sim.synthesize_wheel(truth, err)
    dataio.write_csv(paths.imu, dataio.IMU_HEADER,
                     ([m.t, *m.omega_m, *m.accel_m] for m in imu))
    dataio.write_csv(paths.wheel, dataio.WHEEL_HEADER, wheel)
    dataio.write_csv(paths.gt, dataio.POSE_HEADER,
                     dataio.pose_rows((s.t, s.nav.pos, s.nav.quat) for s in truth))
    dataio.save_calib(paths.calib, DEFAULT_INTRINSICS, DEFAULT_EXTRINSICS,
                      spec.rho_sg)
    dataio.save_gyro_params(paths.truth_params, err.params)

    frames = sim.synthesize_bearings(truth, world, DEFAULT_INTRINSICS,
                                     DEFAULT_EXTRINSICS, err, stride,
                                     n_slots=cfg.feature_slots)
    rows = []
    for t, obs in frames:
        for slot, bearing in obs:
            rows.append([t, slot, *geom.bearing_dir(bearing)])
    dataio.write_csv(paths.bearings, dataio.BEARINGS_HEADER, rows)

    if cfg.measurement_mode == "image":
        paths.frames_dir.mkdir(exist_ok=True)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 4]))
        frame_rows = []
        for k, s in enumerate(truth[::stride]):
            if s.t == 0.0:
                continue
            img = sim.render_frame(s.nav, world, DEFAULT_INTRINSICS,
                                   DEFAULT_EXTRINSICS, err, rng)
            name = f"{k:06d}.pgm"
            save_pgm(paths.frames_dir / name, img)
            frame_rows.append([s.t, f"frames/{name}"])
        dataio.write_csv(paths.frames_csv, dataio.FRAMES_HEADER, frame_rows)
    return out


# --- run ------------------------------------------------------------------------

@dataclass
class Dataset:
    """In-memory dataset; loaded from a directory or built directly."""
    imu: np.ndarray                      # (n, 7)
    wheel: np.ndarray                    # (n, 2)
    intr: CameraIntrinsics
    ext: CameraExtrinsics
    rho_sg: float
    bearing_frames: list = field(default_factory=list)   # (t, [(slot, quat)])
    image_frames: list = field(default_factory=list)     # (t, path or Image)
    gt: np.ndarray | None = None         # (n, 8)


def load_dataset(root, mode: str = "bearing") -> Dataset:
    paths = dataio.DatasetPaths(root)
    imu = dataio.read_csv(paths.imu, dataio.IMU_HEADER)
    wheel = dataio.read_csv(paths.wheel, dataio.WHEEL_HEADER)
    if imu.shape[0] == 0:
        raise dataio.DataError("empty imu stream")
    intr, ext, rho_sg = dataio.load_calib(paths.calib)
    ds = Dataset(imu, wheel, intr, ext, rho_sg)
    if paths.gt.exists():
        ds.gt = dataio.read_csv(paths.gt, dataio.POSE_HEADER)
    if mode == "bearing":
        rows = dataio.read_csv(paths.bearings, dataio.BEARINGS_HEADER)
        frames: dict[float, list] = {}
        for row in rows:
            frames.setdefault(row[0], []).append(
                (int(row[1]), geom.bearing_from_dir(row[2:5])))
        ds.bearing_frames = sorted(frames.items())
    elif mode == "image":
        ds.image_frames = [(t, Path(root) / name)
                           for t, name in dataio.read_frames_csv(paths.frames_csv)]
    return ds


@dataclass
class RunResult:
    t: np.ndarray
    pos: np.ndarray
    quat: np.ndarray
    params_t: np.ndarray
    params: np.ndarray            # (m, 6)
    params_var: np.ndarray        # (m, 6) diagonal of S
    counters: dict
    min_eig_p: float
    min_eig_s: float
    elapsed_s: float

    def record(self) -> TrajectoryRecord:
        return TrajectoryRecord(self.t, self.pos, self.quat)


def run_filter(ds: Dataset, cfg: RunConfig) -> RunResult:
    """Drive the filter through the dataset in timestamp order."""
    start = time.time()
    init_params = GyroParams()
    if cfg.init_params:
        init_params = dataio.load_gyro_params(cfg.init_params)

    use_camera = not cfg.wheel_imu_only
    ekf = AdaptiveEkf(
        noise=cfg.noise,
        ext=ds.ext,
        intr=ds.intr,
        capacity=cfg.feature_slots if use_camera else 1,
        rho_sg=ds.rho_sg,
        calibrate=not cfg.disable_gyro_calibration,
        use_lateral=not cfg.disable_lateral_model,
        params=init_params,
    )

    t0 = ds.imu[0, 0] - np.median(np.diff(ds.imu[:, 0])) if ds.gt is None else ds.gt[0, 0]
    nav0 = NavState.identity()
    if ds.gt is not None:
        nav0.pos = ds.gt[0, 1:4].copy()
        nav0.quat = geom.quat_normalize(ds.gt[0, 4:8].copy())
    if ds.wheel.shape[0]:
        nav0.vel = np.array([ds.wheel[0, 1], 0.0, 0.0])
    ekf.initialize(t0, nav0)

    if cfg.wheel_imu_only:
        frame_times = []
        stride = max(1, int(round(0.1 / max(np.median(np.diff(ds.imu[:, 0])), 1e-3))))
        frame_times = [(ds.imu[k, 0], None) for k in range(stride - 1, ds.imu.shape[0], stride)]
    elif cfg.measurement_mode == "bearing":
        frame_times = [(t, ("bearing", obs)) for t, obs in ds.bearing_frames]
    else:
        frame_times = [(t, ("image", item)) for t, item in ds.image_frames]

    frame_idx = 0
    traj_rows = []
    param_rows = []
    min_eig_p = np.inf
    min_eig_s = np.inf

    def log_state(t):
        traj_rows.append((t, ekf.nav.pos.copy(), ekf.nav.quat.copy()))
        vec = ekf.params.as_vector()
        param_rows.append((t, vec, np.diag(ekf.param_cov).copy()))

    log_state(t0)
    for k in range(ds.imu.shape[0]):
        row = ds.imu[k]
        imu = ImuSample(row[0], row[1:4], row[4:7])
        ekf.predict(imu)
        if cfg.check_psd:
            pe, se = ekf.covariance_health()
            min_eig_p = min(min_eig_p, pe)
            min_eig_s = min(min_eig_s, se)
        if k < ds.wheel.shape[0]:
            ekf.note_wheel(ds.wheel[k, 0], ds.wheel[k, 1])
        while (frame_idx < len(frame_times)
               and frame_times[frame_idx][0] <= imu.t + 1e-9):
            ft, payload = frame_times[frame_idx]
            frame_idx += 1
            if abs(ft - imu.t) > 5e-3:
                continue  # frame without matching imu sample
            veh = VehicleVelocityMeasurement(
                ft, float(ds.wheel[k, 1]) if k < ds.wheel.shape[0] else 0.0,
                float(row[5]))
            if payload is None:
                groups = ekf.vehicle_groups(veh)
                if ekf.standstill_active(ft):
                    groups.append(ekf.zupt_group())
                ekf.update(groups)
            elif payload[0] == "bearing":
                ekf.process_bearing_frame(ft, payload[1], veh)
            else:
                item = payload[1]
                img = item if isinstance(item, Image) else load_pgm(item)
                ekf.process_image_frame(ft, img, veh)
            log_state(ft)
            if cfg.check_psd:
                pe, se = ekf.covariance_health()
                min_eig_p = min(min_eig_p, pe)
                min_eig_s = min(min_eig_s, se)
    if traj_rows[-1][0] < ds.imu[-1, 0]:
        log_state(ds.imu[-1, 0])

    return RunResult(
        np.array([r[0] for r in traj_rows]),
        np.array([r[1] for r in traj_rows]),
        np.array([r[2] for r in traj_rows]),
        np.array([r[0] for r in param_rows]),
        np.array([r[1] for r in param_rows]),
        np.array([r[2] for r in param_rows]),
        dict(ekf.counters),
        float(min_eig_p), float(min_eig_s),
        time.time() - start)


def cmd_run(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = load_dataset(cfg.dataset, cfg.measurement_mode)
    result = run_filter(ds, cfg)

    dataio.write_csv(out / "trajectory.csv", dataio.POSE_HEADER,
                     dataio.pose_rows(zip(result.t, result.pos, result.quat)))
    rows = []
    for t, vec, var in zip(result.params_t, result.params, result.params_var):
        rows.append([t, *vec, *var])
    dataio.write_csv(out / "params.csv", dataio.PARAMS_HEADER, rows)
    dataio.save_gyro_params(out / "final-params.txt",
                            GyroParams.from_vector(result.params[-1]))

    lines = ["run report", "=========="]
    lines.append(f"dataset: {cfg.dataset}")
    lines.append(f"mode: {cfg.measurement_mode}"
                 + (" (wheel-imu-only)" if cfg.wheel_imu_only else ""))
    lines.append(f"calibration: {'off' if cfg.disable_gyro_calibration else 'on'}"
                 f", lateral model: {'off' if cfg.disable_lateral_model else 'on'}")
    for key, val in sorted(result.counters.items()):
        lines.append(f"{key}: {val}")
    if cfg.check_psd:
        lines.append(f"min_eig_P: {result.min_eig_p:.3e}")
        lines.append(f"min_eig_S: {result.min_eig_s:.3e}")
    vec = result.params[-1]
    lines.append("final params: bias_dps = "
                 + " ".join(f"{np.rad2deg(b):.4f}" for b in vec[0:3])
                 + f", yaw_scale = {vec[3]:.6f}"
                 + f", misalign_deg = {np.rad2deg(vec[4]):.4f} {np.rad2deg(vec[5]):.4f}")
    lines.append(f"elapsed_s: {result.elapsed_s:.2f}")
    dataio.atomic_write_text(out / "report.txt", "\n".join(lines) + "\n")
    return out


# --- eval -----------------------------------------------------------------------

def load_pose_csv(path) -> TrajectoryRecord:
    arr = dataio.read_csv(path, dataio.POSE_HEADER)
    if arr.shape[0] == 0:
        raise dataio.DataError(f"{path}: empty trajectory")
    return TrajectoryRecord(arr[:, 0], arr[:, 1:4], arr[:, 4:8])


def cmd_eval(est_path, gt_path, segment_m: float = 100.0) -> str:
    est = load_pose_csv(est_path)
    gt = load_pose_csv(gt_path)
    report = rpe(est, gt, segment_m)
    rmse = ate_rmse(est, gt)
    text = [
        f"relative pose error over {segment_m:.0f} m segments"
        " (percentiles over segments)",
        f"  63rd percentile: {report.percentile_63:.4f} %",
        f"  95th percentile: {report.percentile_95:.4f} %",
        f"  maximum:         {report.maximum:.4f} %",
        f"  segments:        {report.segment_count}",
        f"absolute trajectory RMSE after rigid alignment: {rmse:.4f} m",
        "",
        f"rpe.p63 = {report.percentile_63:.6f}",
        f"rpe.p95 = {report.percentile_95:.6f}",
        f"rpe.max = {report.maximum:.6f}",
        f"rpe.segments = {report.segment_count}",
        f"ate.rmse = {rmse:.6f}",
    ]
    return "\n".join(text)
