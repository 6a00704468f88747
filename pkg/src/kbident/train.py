"""Joint gradient training of network weights and physical parameters.

One Adam optimizer drives the mean-net weights, covariance-net weights, and
the unconstrained parameter vector simultaneously (per-group learning-rate
multipliers are exposed).  Physical parameters live in an unconstrained raw
space via smooth bound transforms, so gradient steps can never leave the
admissible region.  The best-loss snapshot is returned, not the final epoch.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import ekbf
from .autodiff import Tape
from .errors import ConfigError, NumericalError
from .model import MeasurementSeries, StateSpaceModel
from .nets import CovNet, MeanNet

__all__ = [
    "TrainConfig", "NetConfigs", "ParamTransform", "TrainReport", "IdentResult",
    "AdamState", "adam_step", "identify", "extrapolate_tail", "child_seed",
]


def child_seed(master: int, label: str, index: int = 0) -> int:
    """Deterministic seed fan-out; adding runs never perturbs earlier streams."""
    import hashlib
    digest = hashlib.blake2b(f"{master}:{label}:{index}".encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


@dataclass
class TrainConfig:
    """Optimizer settings and training-time mitigation switches."""

    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 20000
    lr_decay: float = 1.0              # multiplicative factor per plateau
    plateau_patience: int = 500
    grad_clip: Optional[float] = None  # global gradient max-norm
    seed: int = 0
    restarts: int = 0
    restart_loss_threshold: Optional[float] = None
    extrapolate_tail: int = 0          # constant-slope hold horizon (samples)
    ic_once: bool = False
    squared_residuals: bool = False
    mode: str = "kbinn"                # "kbinn" or "pinn"
    theta_warmup_epochs: int = 0
    lr_scale_theta: float = 1.0
    lr_scale_mean: float = 1.0
    lr_scale_cov: float = 1.0
    theta_init: object = "midpoint"    # "midpoint" | "random" | explicit vector
    log_every: int = 1

    def __post_init__(self):
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.mode not in ("kbinn", "pinn"):
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.extrapolate_tail < 0:
            raise ConfigError("extrapolation horizon must be >= 0")


@dataclass
class NetConfigs:
    """Hidden-layer widths for the two networks."""

    mean_hidden: tuple = (32, 32, 32)
    cov_hidden: tuple = (32, 32, 32)


class ParamTransform:
    """Smooth bijections between bounded parameters and unconstrained reals."""

    def __init__(self, param_meta: Sequence):
        self.meta = tuple(param_meta)
        self.kinds = []
        for spec in self.meta:
            lo, hi = spec.lower, spec.upper
            if lo is None and hi is None:
                self.kinds.append("identity")
            elif hi is None:
                self.kinds.append("positive")
            elif lo is None:
                self.kinds.append("negative")
            else:
                self.kinds.append("unit_interval")

    def __len__(self):
        return len(self.meta)

    def raw_from(self, theta) -> np.ndarray:
        """Map admissible parameters to raw space (inverse transform)."""
        theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
        raw = np.empty_like(theta)
        for j, (kind, spec) in enumerate(zip(self.kinds, self.meta)):
            v = theta[j]
            if kind == "identity":
                raw[j] = v
            elif kind == "positive":
                if v <= spec.lower:
                    raise ConfigError(f"{spec.name} must exceed {spec.lower}")
                raw[j] = math.log(v - spec.lower)
            elif kind == "negative":
                if v >= spec.upper:
                    raise ConfigError(f"{spec.name} must be below {spec.upper}")
                raw[j] = math.log(spec.upper - v)
            else:
                lo, hi = spec.lower, spec.upper
                if not lo < v < hi:
                    raise ConfigError(f"{spec.name} must lie in ({lo}, {hi})")
                z = (v - lo) / (hi - lo)
                raw[j] = math.log(z / (1.0 - z))
        return raw

    def theta_from(self, raw) -> np.ndarray:
        """Raw space back to admissible parameters (numpy).

        Overflowing raw values map to inf rather than raising, so divergence
        detection stays with the training loop.
        """
        raw = np.atleast_1d(np.asarray(raw, dtype=np.float64))
        out = np.empty_like(raw)
        with np.errstate(over="ignore"):
            for j, (kind, spec) in enumerate(zip(self.kinds, self.meta)):
                r = raw[j]
                if kind == "identity":
                    out[j] = r
                elif kind == "positive":
                    out[j] = spec.lower + np.exp(r)
                elif kind == "negative":
                    out[j] = spec.upper - np.exp(r)
                else:
                    out[j] = spec.lower + (spec.upper - spec.lower) / (1.0 + np.exp(-r))
        return out

    def constrain(self, raw_var) -> list:
        """Raw-space tape vector to a list of constrained parameter nodes."""
        out = []
        for j, (kind, spec) in enumerate(zip(self.kinds, self.meta)):
            r = raw_var[j]
            if kind == "identity":
                out.append(r * 1.0)
            elif kind == "positive":
                out.append(spec.lower + ad.exp(r))
            elif kind == "negative":
                out.append(spec.upper - ad.exp(r))
            else:
                out.append(spec.lower + (spec.upper - spec.lower)
                           / (1.0 + ad.exp(-r)))
        return out

    def default_init(self) -> np.ndarray:
        return np.array([spec.init for spec in self.meta], dtype=np.float64)

    def random_init(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        out = np.empty(len(self.meta))
        for j, (kind, spec) in enumerate(zip(self.kinds, self.meta)):
            if kind == "unit_interval":
                out[j] = spec.lower + (spec.upper - spec.lower) * rng.uniform(0.05, 0.95)
            elif kind == "positive":
                out[j] = spec.lower + rng.uniform(0.05, 1.0)
            elif kind == "negative":
                out[j] = spec.upper - rng.uniform(0.05, 1.0)
            else:
                out[j] = rng.uniform(-1.0, 1.0)
        return out


@dataclass
class AdamState:
    """First/second moment accumulators for a list of parameter arrays."""

    m: list
    v: list
    t: int = 0

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params], t=0)


def adam_step(grads, state: AdamState, lr, params, *, betas=(0.9, 0.999),
              eps=1e-8, lr_scales=None):
    """One bias-corrected Adam update; mutates ``params`` and ``state``."""
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ConfigError("adam state/gradient dimensions do not match parameters")
    b1, b2 = betas
    state.t += 1
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for i, g in enumerate(grads):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        scale = lr if lr_scales is None else lr * lr_scales[i]
        params[i] -= scale * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def extrapolate_tail(series: MeasurementSeries, horizon: int) -> MeasurementSeries:
    """Append ``horizon`` constant-slope points per channel after the last sample.

    Appended points carry a synthetic flag and are excluded from error
    statistics.
    """
    if horizon < 0:
        raise ConfigError("extrapolation horizon must be >= 0")
    if horizon == 0:
        return series
    if len(series) < 2:
        raise ConfigError("tail extrapolation needs at least two samples")
    t = series.times
    y = series.samples
    dt = t[-1] - t[-2]
    slope = (y[-1] - y[-2]) / dt
    ks = np.arange(1, horizon + 1)
    t_new = t[-1] + ks * dt
    y_new = y[-1][None, :] + ks[:, None] * dt * slope[None, :]
    mask = np.concatenate([
        series.synthetic_mask if series.synthetic_mask is not None
        else np.zeros(len(series), dtype=bool),
        np.ones(horizon, dtype=bool)])
    return MeasurementSeries(np.concatenate([t, t_new]),
                             np.vstack([y, y_new]),
                             frequency_hz=series.frequency_hz,
                             noise=series.noise,
                             truth_theta=series.truth_theta,
                             truth_x0=series.truth_x0,
                             synthetic_mask=mask)


@dataclass
class TrainReport:
    """Outcome of one identification run."""

    theta_hat: np.ndarray
    theta_names: tuple
    loss_history: np.ndarray    # epochs x 4: l1, l2, l3, total
    theta_history: np.ndarray   # epochs x d
    wall_s: float
    converged: bool
    restarts_used: int
    best_epoch: int
    best_total: float
    mode: str = "kbinn"

    @property
    def epochs_run(self) -> int:
        return self.loss_history.shape[0]


@dataclass
class IdentResult:
    """Estimated parameters with optional truth-referenced absolute errors."""

    method: str
    theta_hat: np.ndarray
    theta_names: tuple
    abs_errors: Optional[np.ndarray]
    converged: bool
    wall_s: float
    final_loss: float
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "theta_hat": {n: float(v) for n, v in zip(self.theta_names, self.theta_hat)},
            "converged": self.converged,
            "wall_s": self.wall_s,
            "final_loss": self.final_loss,
            "diagnostics": self.diagnostics,
        }
        if self.abs_errors is not None:
            out["abs_errors"] = {n: float(v) for n, v in
                                 zip(self.theta_names, self.abs_errors)}
        return out


def _flatten_params(mean_weights, cov_weights, raw_theta):
    params, scales_key = [], []
    for w, b in mean_weights:
        params.extend([w.copy(), b.copy()])
        scales_key.extend(["mean", "mean"])
    for w, b in cov_weights:
        params.extend([w.copy(), b.copy()])
        scales_key.extend(["cov", "cov"])
    if raw_theta is not None:
        params.append(raw_theta.copy())
        scales_key.append("theta")
    return params, scales_key


def _training_attempt(series, model, loss_config, cfg: TrainConfig,
                      nets_cfg: NetConfigs, attempt: int, lr0: float,
                      log_fh):
    """One full training run; returns (best_total, report pieces, nets, theta)."""
    d = model.d
    transform = ParamTransform(model.param_meta)
    seed_m = child_seed(cfg.seed, "mean-init", attempt)
    seed_c = child_seed(cfg.seed, "cov-init", attempt)
    time_scale = (0.0, float(series.times[-1]))
    mean_net = MeanNet(model.n, hidden=nets_cfg.mean_hidden,
                       time_scale=time_scale, seed=seed_m)
    cov_net = None
    if cfg.mode == "kbinn":
        cov_net = CovNet(model.n, hidden=nets_cfg.cov_hidden,
                         time_scale=time_scale, seed=seed_c)

    if isinstance(cfg.theta_init, str) and cfg.theta_init == "midpoint":
        theta0 = transform.default_init()
    elif isinstance(cfg.theta_init, str) and cfg.theta_init == "random":
        theta0 = transform.random_init(child_seed(cfg.seed, "theta-init", attempt))
    elif isinstance(cfg.theta_init, str):
        raise ConfigError(f"unknown theta_init {cfg.theta_init!r}")
    else:
        theta0 = np.atleast_1d(np.asarray(cfg.theta_init, dtype=np.float64))
        if theta0.shape != (d,):
            raise ConfigError(f"theta_init must have {d} entries")
    raw0 = transform.raw_from(theta0) if d else None

    n_mean = 2 * len(mean_net.weights)
    cov_weights = cov_net.weights if cov_net is not None else []
    params, group = _flatten_params(mean_net.weights, cov_weights, raw0)
    lr_scales = np.array([{"mean": cfg.lr_scale_mean, "cov": cfg.lr_scale_cov,
                           "theta": cfg.lr_scale_theta}[g] for g in group])
    state = AdamState.for_params(params)
    theta_idx = len(params) - 1 if d else None

    epochs = cfg.epochs
    history = np.empty((epochs, 4))
    theta_hist = np.empty((epochs, d)) if d else np.empty((epochs, 0))
    best_total = math.inf
    best_epoch = -1
    best_params = [p.copy() for p in params]
    lr = lr0
    nonfinite_streak = 0
    since_best = 0

    for epoch in range(epochs):
        tape = Tape()
        lifted = [tape.leaf(p) for p in params]
        mean_params = [(lifted[2 * i], lifted[2 * i + 1])
                       for i in range(len(mean_net.weights))]
        if cov_net is not None:
            off = n_mean
            cov_params = [(lifted[off + 2 * i], lifted[off + 2 * i + 1])
                          for i in range(len(cov_net.weights))]
        theta_vars = transform.constrain(lifted[theta_idx]) if d else []
        theta_now = transform.theta_from(params[theta_idx]) if d else np.empty(0)

        if cfg.mode == "kbinn":
            bd = ekbf.loss_total(mean_net, cov_net, theta_vars, series, model,
                                 loss_config, mean_params=mean_params,
                                 cov_params=cov_params, tape=tape)
            total_node = bd.node
            row = (bd.l1_sum, bd.l2_sum, bd.l3_sum, bd.total)
        else:
            total_node = ekbf.loss_pinn(mean_net, theta_vars, series, model,
                                        mean_params=mean_params, tape=tape)
            tv = float(ad.value_of(total_node))
            row = (tv, 0.0, 0.0, tv)
        history[epoch] = row
        if d:
            theta_hist[epoch] = theta_now

        total_value = row[3]
        if not math.isfinite(total_value):
            nonfinite_streak += 1
            if nonfinite_streak >= 10:
                raise NumericalError(
                    "loss non-finite for 10 consecutive epochs; "
                    "try a lower learning rate")
        else:
            nonfinite_streak = 0
            if total_value < best_total:
                best_total = total_value
                best_epoch = epoch
                best_params = [p.copy() for p in params]
                since_best = 0
            else:
                since_best += 1

        store = ad.backward(tape, total_node)
        grads = [store.grad(v) for v in lifted]
        if d and epoch < cfg.theta_warmup_epochs:
            grads[theta_idx] = np.zeros_like(grads[theta_idx])
        if cfg.grad_clip is not None:
            gnorm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if gnorm > cfg.grad_clip:
                scale = cfg.grad_clip / gnorm
                grads = [g * scale for g in grads]
        adam_step(grads, state, lr, params, lr_scales=lr_scales)

        if cfg.lr_decay < 1.0 and since_best >= cfg.plateau_patience:
            lr *= cfg.lr_decay
            since_best = 0

        if log_fh is not None and (epoch % cfg.log_every == 0 or epoch == epochs - 1):
            log_fh.write(json.dumps({
                "epoch": epoch, "l1": row[0], "l2": row[1], "l3": row[2],
                "total": row[3], "theta_hat": [float(v) for v in theta_now],
                "lr": lr}) + "\n")

    # restore the best snapshot
    params = best_params
    mean_net.weights = [(params[2 * i], params[2 * i + 1])
                        for i in range(len(mean_net.weights))]
    if cov_net is not None:
        off = n_mean
        cov_net.weights = [(params[off + 2 * i], params[off + 2 * i + 1])
                           for i in range(len(cov_net.weights))]
    theta_best = transform.theta_from(params[theta_idx]) if d else np.empty(0)
    return best_total, best_epoch, history, theta_hist, mean_net, cov_net, theta_best


def identify(series: MeasurementSeries, model: StateSpaceModel,
             loss_config: Optional[ekbf.KbinnLossConfig],
             train_config: TrainConfig,
             net_configs: Optional[NetConfigs] = None, *,
             log_path=None):
    """Fit networks and parameters to one measurement series.

    Returns (TrainReport, MeanNet, CovNet); the covariance net is None in
    plain-PINN mode.  Deterministic given the config seed.
    """
    if len(series) == 0:
        raise ConfigError("measurement series is empty")
    nets_cfg = net_configs or NetConfigs()
    cfg = train_config
    if cfg.mode == "kbinn":
        if loss_config is None:
            raise ConfigError("kbinn mode requires a loss configuration")
        loss_config = replace(loss_config, ic_once=cfg.ic_once,
                              squared_residuals=cfg.squared_residuals)
    if cfg.extrapolate_tail:
        series = extrapolate_tail(series, cfg.extrapolate_tail)

    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    started = time.perf_counter()
    try:
        attempt = 0
        lr = cfg.learning_rate
        while True:
            # divergence is detected by the non-finite-loss counter, not by
            # intermediate overflow warnings
            with np.errstate(over="ignore", invalid="ignore"):
                (best_total, best_epoch, history, theta_hist,
                 mean_net, cov_net, theta_best) = _training_attempt(
                    series, model, loss_config, cfg, nets_cfg, attempt, lr, log_fh)
            converged = math.isfinite(best_total)
            if cfg.restart_loss_threshold is not None:
                converged = best_total <= cfg.restart_loss_threshold
            if converged or attempt >= cfg.restarts:
                break
            # restart with fresh weights and a bigger step width
            attempt += 1
            lr *= 2.0
    finally:
        if log_fh is not None:
            log_fh.close()
    wall = time.perf_counter() - started
    report = TrainReport(theta_hat=theta_best,
                         theta_names=tuple(s.name for s in model.param_meta),
                         loss_history=history, theta_history=theta_hist,
                         wall_s=wall, converged=converged,
                         restarts_used=attempt, best_epoch=best_epoch,
                         best_total=best_total, mode=cfg.mode)
    return report, mean_net, cov_net
