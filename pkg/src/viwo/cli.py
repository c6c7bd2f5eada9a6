"""Command-line front-end: simulate, run, eval, jacobian-check.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  All flags can also be set in a `key = value` config file passed
via --config; explicit flags override file entries.
"""

import argparse
import sys

from . import dataio
from .pipeline import RunConfig, apply_config_overrides, cmd_eval, cmd_run, cmd_simulate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int, help="deterministic seed")
    p.add_argument("--feature-slots", type=int, dest="feature_slots")
    p.add_argument("--mode", choices=["bearing", "image"], dest="measurement_mode",
                   help="camera measurement mode")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="viwo",
        description="visual-inertial-wheel localization with online "
                    "gyroscope calibration")
    sub = ap.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate", help="synthesize a dataset directory")
    _add_common(ps)
    ps.add_argument("--out", required=True, dest="out_dir")
    ps.add_argument("--scenario", choices=["urban_loop", "highway", "mini_loop"])
    ps.add_argument("--laps", type=int)
    ps.add_argument("--rho-sg", type=float, dest="rho_sg")
    ps.add_argument("--zero-noise", action="store_true", dest="zero_noise",
                    default=None)
    ps.add_argument("--inject-bias", nargs=3, type=float, metavar=("BX", "BY", "BZ"),
                    dest="inject_bias_dps", help="gyro offsets to inject [deg/s]")
    ps.add_argument("--inject-yaw-scale", type=float, dest="inject_yaw_scale")
    ps.add_argument("--inject-misalign", nargs=2, type=float, metavar=("YX", "XY"),
                    dest="inject_misalign_deg", help="misalignments [deg]")

    pr = sub.add_parser("run", help="run the filter over a dataset")
    _add_common(pr)
    pr.add_argument("--dataset", required=True)
    pr.add_argument("--out", required=True, dest="out_dir")
    pr.add_argument("--disable-gyro-calibration", action="store_true",
                    dest="disable_gyro_calibration", default=None)
    pr.add_argument("--disable-lateral-model", action="store_true",
                    dest="disable_lateral_model", default=None)
    pr.add_argument("--wheel-imu-only", action="store_true",
                    dest="wheel_imu_only", default=None)
    pr.add_argument("--init-params", dest="init_params",
                    help="gyro-parameter file used as the initial estimate")
    pr.add_argument("--check-psd", action="store_true", dest="check_psd",
                    default=None)

    pe = sub.add_parser("eval", help="evaluate an estimate against ground truth")
    pe.add_argument("--estimate", required=True)
    pe.add_argument("--ground-truth", required=True)
    pe.add_argument("--segment-m", type=float, default=100.0)

    pj = sub.add_parser("jacobian-check",
                        help="finite-difference audit of all analytic Jacobians")
    pj.add_argument("--configs", type=int, default=1000)
    pj.add_argument("--seed", type=int, default=0)
    pj.add_argument("--tol", type=float, default=1e-4)
    return ap


def _config_from_args(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = apply_config_overrides(cfg, dataio.load_kv(args.config))
    for key in ("out_dir", "dataset", "scenario", "laps", "seed",
                "measurement_mode", "feature_slots", "rho_sg", "zero_noise",
                "disable_gyro_calibration", "disable_lateral_model",
                "wheel_imu_only", "init_params", "check_psd",
                "inject_yaw_scale"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    for key in ("inject_bias_dps", "inject_misalign_deg"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, tuple(val))
    if cfg.wheel_imu_only and not cfg.disable_gyro_calibration:
        # without camera rows the parameter channel still runs from vehicle
        # rows alone; that is a valid configuration, nothing to reject
        pass
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            cfg = _config_from_args(args)
            out = cmd_simulate(cfg)
            print(f"dataset written to {out}")
            return EXIT_OK
        if args.command == "run":
            cfg = _config_from_args(args)
            out = cmd_run(cfg)
            print((out / "report.txt").read_text(), end="")
            return EXIT_OK
        if args.command == "eval":
            print(cmd_eval(args.estimate, args.ground_truth, args.segment_m))
            return EXIT_OK
        if args.command == "jacobian-check":
            from .jacobian_check import format_report, run_audit
            worst = run_audit(args.configs, args.seed, args.tol)
            text, ok = format_report(worst, args.tol)
            print(text)
            return EXIT_OK if ok else EXIT_NUMERIC
    except (ValueError, dataio.DataError) as exc:
        if isinstance(exc, dataio.DataError):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
