"""Command-line front end: simulate, identify, study, sweep, showcase.

Configuration lives in a single YAML file (comment-friendly, hierarchical);
command-line flags override file values, and the effective merged config is
echoed into the output directory for a reproducibility audit trail.  Unknown
keys are rejected.

Exit codes: 0 success, 2 configuration/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys

import numpy as np
import yaml

from . import bench, ekbf, model as mdl
from .errors import ConfigError, KbidentError, NumericalError
from .nets import save_checkpoint
from .train import NetConfigs, TrainConfig, child_seed, identify

__all__ = ["main", "DEFAULT_CONFIG", "load_config", "merge_flags"]

DEFAULT_CONFIG = {
    "seed": 0,
    "out": "out",
    "jobs": 1,
    "simulate": {
        "theta": [0.6, 0.9, 0.57],   # null -> sampled from the protocol priors
        "x0": None,                  # null -> angles sampled, velocities zero
        "duration_s": 3.0,
        "frequency_hz": 1000.0,
        "noise_r": 0.25,
        "damping": 0.05,
        "sim_dt": 1e-4,
    },
    "nets": {
        "mean_hidden": [32, 32, 32],
        "cov_hidden": [32, 32, 32],
    },
    "loss": {
        "alpha": [1.0, 1.0, 1.0],
        "q0": 1e-2,
        "p0": None,                  # null -> the measurement covariance R
        "x0": None,                  # null -> sidecar truth, else first sample
        "ic_once": False,
        "squared_residuals": False,
    },
    "train": {
        "mode": "kbinn",
        "optimizer": "adam",
        "epochs": 20000,
        "learning_rate": 1e-3,
        "lr_decay": 1.0,
        "plateau_patience": 500,
        "grad_clip": None,
        "restarts": 0,
        "restart_loss_threshold": None,
        "extrapolate_tail": 0,
        "theta_warmup_epochs": 0,
        "lr_scale_theta": 1.0,
        "lr_scale_mean": 1.0,
        "lr_scale_cov": 1.0,
        "theta_init": "midpoint",
        "log_every": 1,
        "benchmark_profile": False,  # true -> the tuned study/sweep profile
    },
    "study": {
        "runs": 10,
        "methods": ["kbinn", "baseline"],
        "frequency_hz": 1000.0,
        "epochs": bench.BENCH_EPOCHS,
    },
    "sweep": {
        "frequencies_hz": [3.0, 10.0, 30.0, 100.0, 300.0, 1000.0],
        "scenarios": 5,
        "epochs": bench.BENCH_EPOCHS,
    },
    "showcase": {
        "theta": list(bench.SHOWCASE_THETA),
        "epochs": bench.BENCH_EPOCHS,
    },
}


def _check_keys(cfg, template, path=""):
    if not isinstance(cfg, dict):
        raise ConfigError(f"config section {path or '<root>'} must be a mapping")
    for key, value in cfg.items():
        if key not in template:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(template[key], dict):
            _check_keys(value, template[key], path=f"{path}{key}.")


def load_config(path=None) -> dict:
    """Defaults, optionally overlaid with a YAML file (typo-safe)."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from None
        _check_keys(user, DEFAULT_CONFIG)
        _merge(cfg, user)
    return cfg


def _merge(base: dict, over: dict) -> None:
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _merge(base[key], value)
        else:
            base[key] = value


def merge_flags(cfg: dict, args: argparse.Namespace) -> dict:
    """Apply command-line overrides on top of the file config."""
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    if getattr(args, "jobs", None) is not None:
        cfg["jobs"] = args.jobs
    if getattr(args, "frequency_hz", None) is not None:
        cfg["simulate"]["frequency_hz"] = args.frequency_hz
        cfg["study"]["frequency_hz"] = args.frequency_hz
    if getattr(args, "duration_s", None) is not None:
        cfg["simulate"]["duration_s"] = args.duration_s
    if getattr(args, "noise_r", None) is not None:
        cfg["simulate"]["noise_r"] = args.noise_r
    if getattr(args, "runs", None) is not None:
        cfg["study"]["runs"] = args.runs
    if getattr(args, "methods", None) is not None:
        cfg["study"]["methods"] = [m.strip() for m in args.methods.split(",") if m.strip()]
    if getattr(args, "mode", None) is not None:
        cfg["train"]["mode"] = args.mode
    if getattr(args, "epochs", None) is not None:
        cfg["train"]["epochs"] = args.epochs
        cfg["study"]["epochs"] = args.epochs
        cfg["sweep"]["epochs"] = args.epochs
        cfg["showcase"]["epochs"] = args.epochs
    if getattr(args, "lr", None) is not None:
        cfg["train"]["learning_rate"] = args.lr
    if getattr(args, "benchmark_profile", False):
        cfg["train"]["benchmark_profile"] = True
    return cfg


def _echo_config(cfg: dict, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=False)


def _train_config(cfg: dict, seed: int) -> TrainConfig:
    t = cfg["train"]
    if t.get("benchmark_profile"):
        tc = bench.benchmark_train_config(seed=seed, epochs=t["epochs"])
        tc.mode = t["mode"]
        return tc
    keys = ("mode", "optimizer", "epochs", "learning_rate", "lr_decay",
            "plateau_patience", "grad_clip", "restarts", "restart_loss_threshold",
            "extrapolate_tail", "theta_warmup_epochs", "lr_scale_theta",
            "lr_scale_mean", "lr_scale_cov", "theta_init", "log_every")
    return TrainConfig(seed=seed, **{k: t[k] for k in keys})


def _net_configs(cfg: dict) -> NetConfigs:
    return NetConfigs(mean_hidden=tuple(cfg["nets"]["mean_hidden"]),
                      cov_hidden=tuple(cfg["nets"]["cov_hidden"]))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: dict) -> int:
    out_dir = cfg["out"]
    _echo_config(cfg, out_dir)
    sim = cfg["simulate"]
    seed = cfg["seed"]
    if sim["theta"] is None:
        rng = np.random.default_rng(child_seed(seed, "theta", 0))
        theta = np.maximum(rng.uniform(0.0, 1.0, 3), 1e-3)
        theta[2] = min(theta[2], 1.0 - 1e-3)
    else:
        theta = np.asarray(sim["theta"], dtype=np.float64)
    if sim["x0"] is None:
        rng = np.random.default_rng(child_seed(seed, "x0", 0))
        x0 = np.array([rng.uniform(-np.pi / 4, np.pi / 4), 0.0,
                       rng.uniform(-np.pi / 4, np.pi / 4), 0.0])
    else:
        x0 = np.asarray(sim["x0"], dtype=np.float64)
    truth = mdl.double_pendulum(damping=sim["damping"])
    dt, steps = mdl.aligned_sim_dt(sim["frequency_hz"], sim["sim_dt"])
    traj = mdl.simulate(truth, theta, x0, sim["duration_s"], dt)
    n_samples = int(round(sim["duration_s"] * sim["frequency_hz"]))
    sample_times = np.arange(1, n_samples + 1) * (dt * steps)
    r_mat = sim["noise_r"] * np.eye(4)
    noise = mdl.NoiseSpec(Q=cfg["loss"]["q0"] * np.eye(4), R=r_mat,
                          seed=child_seed(seed, "noise", 0))
    series = mdl.measure(traj, truth, noise, sample_times)
    series.truth_theta = theta
    series.truth_x0 = x0
    path = os.path.join(out_dir, "measurements.csv")
    mdl.save_measurements(series, path)
    print(f"wrote {len(series)} samples at {sim['frequency_hz']:g} Hz to {path}")
    return 0


def cmd_identify(cfg: dict, measurements_path) -> int:
    out_dir = cfg["out"]
    _echo_config(cfg, out_dir)
    series = mdl.load_measurements(measurements_path)
    seed = cfg["seed"]
    model = mdl.double_pendulum(damping=0.0)
    if series.q != model.q:
        raise ConfigError(f"measurement width {series.q} does not match the "
                          f"model output dimension {model.q}")
    tc = _train_config(cfg, seed=child_seed(seed, "train", 0))
    loss = cfg["loss"]
    loss_cfg = None
    if tc.mode == "kbinn":
        if loss["x0"] is not None:
            x0 = np.asarray(loss["x0"], dtype=np.float64)
        elif series.truth_x0 is not None:
            x0 = series.truth_x0
        else:
            x0 = series.samples[0].copy()   # crude but serviceable fallback
        r_mat = (series.noise.R if series.noise is not None
                 else cfg["simulate"]["noise_r"] * np.eye(model.q))
        noise = mdl.NoiseSpec(Q=loss["q0"] * np.eye(model.n), R=r_mat,
                              seed=child_seed(seed, "filter", 0))
        if cfg["train"].get("benchmark_profile"):
            loss_cfg = bench.benchmark_loss_config(x0, r_mat[0, 0])
        else:
            alpha = loss["alpha"]
            loss_cfg = ekbf.KbinnLossConfig(
                x0=x0, noise=noise, P0=loss["p0"],
                alpha1=alpha[0], alpha2=alpha[1], alpha3=alpha[2],
                ic_once=loss["ic_once"],
                squared_residuals=loss["squared_residuals"])
    report, mean_net, cov_net = identify(
        series, model, loss_cfg, tc, _net_configs(cfg),
        log_path=os.path.join(out_dir, "training_log.jsonl"))
    save_checkpoint(mean_net, os.path.join(out_dir, "mean_net.json"))
    if cov_net is not None:
        save_checkpoint(cov_net, os.path.join(out_dir, "cov_net.json"))
    result = {
        "method": tc.mode,
        "theta_hat": {n: float(v) for n, v in zip(report.theta_names, report.theta_hat)},
        "converged": report.converged,
        "restarts_used": report.restarts_used,
        "best_epoch": report.best_epoch,
        "best_total": report.best_total,
        "wall_s": report.wall_s,
    }
    if series.truth_theta is not None:
        result["abs_errors"] = {
            n: float(abs(v - tr)) for n, v, tr in
            zip(report.theta_names, report.theta_hat, series.truth_theta)}
    with open(os.path.join(out_dir, "ident_result.json"), "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1)
        fh.write("\n")
    print(json.dumps(result, indent=1))
    return 0


def cmd_study(cfg: dict) -> int:
    out_dir = cfg["out"]
    _echo_config(cfg, out_dir)
    study = bench.StudyConfig(
        runs=cfg["study"]["runs"],
        frequency_hz=cfg["study"]["frequency_hz"],
        duration_s=cfg["simulate"]["duration_s"],
        noise_r=cfg["simulate"]["noise_r"],
        master_seed=cfg["seed"],
        methods=tuple(cfg["study"]["methods"]),
        jobs=cfg["jobs"],
        epochs=cfg["study"]["epochs"],
        sim_dt=cfg["simulate"]["sim_dt"],
        nets=_net_configs(cfg))
    result = bench.run_study(study, out_dir=out_dir)
    print(bench.format_study_table(result.aggregates))
    ok = [r for r in result.rows if not r["status"].startswith("failed")]
    return 0 if ok else 3


def cmd_sweep(cfg: dict) -> int:
    out_dir = cfg["out"]
    _echo_config(cfg, out_dir)
    study = bench.StudyConfig(
        runs=1,
        frequency_hz=cfg["study"]["frequency_hz"],
        duration_s=cfg["simulate"]["duration_s"],
        noise_r=cfg["simulate"]["noise_r"],
        master_seed=cfg["seed"],
        methods=("kbinn",),
        jobs=cfg["jobs"],
        epochs=cfg["sweep"]["epochs"],
        sim_dt=cfg["simulate"]["sim_dt"],
        nets=_net_configs(cfg))
    result = bench.run_frequency_sweep(cfg["sweep"]["frequencies_hz"],
                                       cfg["sweep"]["scenarios"],
                                       config=study, out_dir=out_dir)
    for freq, stats in result["boxplot"].items():
        print(f"{freq:>8} Hz: median mean-abs-err {stats['median']:.4f} "
              f"(q1 {stats['q1']:.4f}, q3 {stats['q3']:.4f})")
    ok = [r for r in result["rows"] if not r["status"].startswith("failed")]
    return 0 if ok else 3


def cmd_showcase(cfg: dict) -> int:
    out_dir = cfg["out"]
    _echo_config(cfg, out_dir)
    summary = bench.export_showcase(out_dir, theta=cfg["showcase"]["theta"],
                                    master_seed=cfg["seed"],
                                    epochs=cfg["showcase"]["epochs"],
                                    frequency_hz=cfg["simulate"]["frequency_hz"],
                                    duration_s=cfg["simulate"]["duration_s"],
                                    noise_r=cfg["simulate"]["noise_r"],
                                    nets=_net_configs(cfg))
    print(json.dumps(summary, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kbident",
        description="Noise-robust ODE parameter identification with "
                    "filter-informed neural networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_jobs=True):
        p.add_argument("--config", default=None, help="YAML configuration file")
        p.add_argument("--seed", type=int, default=None, help="master seed (default: 0)")
        p.add_argument("--out", default=None, help="output directory (default: out)")
        if with_jobs:
            p.add_argument("--jobs", type=int, default=None,
                           help="parallel benchmark workers (default: 1)")

    p_sim = sub.add_parser("simulate", help="generate a noisy measurement CSV")
    common(p_sim, with_jobs=False)
    p_sim.add_argument("--frequency-hz", type=float, default=None,
                       help="sampling frequency (default: 1000)")
    p_sim.add_argument("--duration-s", type=float, default=None,
                       help="record length in seconds (default: 3)")
    p_sim.add_argument("--noise-r", type=float, default=None,
                       help="measurement noise variance per channel (default: 0.25)")

    p_id = sub.add_parser("identify", help="identify parameters from a measurement CSV")
    common(p_id, with_jobs=False)
    p_id.add_argument("measurements", help="measurement CSV path")
    p_id.add_argument("--mode", choices=("kbinn", "pinn"), default=None,
                      help="identification mode (default: kbinn)")
    p_id.add_argument("--epochs", type=int, default=None,
                      help="training epochs (default: 20000)")
    p_id.add_argument("--lr", type=float, default=None,
                      help="learning rate (default: 0.001)")
    p_id.add_argument("--benchmark-profile", action="store_true",
                      help="use the tuned benchmark training profile")

    p_study = sub.add_parser("study", help="random-parameter identification study")
    common(p_study)
    p_study.add_argument("--runs", type=int, default=None,
                         help="number of identification runs (default: 10)")
    p_study.add_argument("--methods", default=None,
                         help="comma-separated methods: kbinn,baseline (default: both)")
    p_study.add_argument("--frequency-hz", type=float, default=None,
                         help="sampling frequency (default: 1000)")
    p_study.add_argument("--epochs", type=int, default=None,
                         help="training epochs per run (default: 12000)")

    p_sweep = sub.add_parser("sweep", help="sampling-frequency sweep")
    common(p_sweep)
    p_sweep.add_argument("--epochs", type=int, default=None,
                         help="training epochs per run (default: 12000)")

    p_show = sub.add_parser("showcase", help="train the showcase scenario and export bands")
    common(p_show, with_jobs=False)
    p_show.add_argument("--epochs", type=int, default=None,
                        help="training epochs (default: 12000)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = merge_flags(cfg, args)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "identify":
            return cmd_identify(cfg, args.measurements)
        if args.command == "study":
            return cmd_study(cfg)
        if args.command == "sweep":
            return cmd_sweep(cfg)
        if args.command == "showcase":
            return cmd_showcase(cfg)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except KbidentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
