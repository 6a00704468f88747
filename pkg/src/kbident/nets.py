"""Fully-connected networks for the state mean and state covariance.

Both take the scalar time as input, normalized affinely to [-1, 1].  The
forward pass returns the output together with its exact time derivative
(forward-mode tangent seeded on the time input, so the normalization chain
rule is included).  The covariance network emits the packed upper triangle of
a factor U and assembles P = U^T U, which is symmetric positive semidefinite
for every weight setting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ConfigError, NumericalError

__all__ = [
    "MlpConfig", "Mlp", "MeanNet", "CovNet",
    "init_weights", "assemble_psd",
    "save_checkpoint", "load_checkpoint",
]

_CHECKPOINT_FORMAT = "kbident-net-v1"


@dataclass
class MlpConfig:
    """Architecture of one fully-connected network."""

    input_dim: int = 1
    hidden_layers: tuple = (32, 32, 32)
    output_dim: int = 1
    hidden_activation: str = "tanh"
    output_activation: str = "linear"

    def __post_init__(self):
        self.hidden_layers = tuple(int(h) for h in self.hidden_layers)
        if self.input_dim < 1 or self.output_dim < 1 or any(h < 1 for h in self.hidden_layers):
            raise ConfigError("all layer sizes must be >= 1")
        if self.hidden_activation != "tanh":
            raise ConfigError(f"unsupported hidden activation {self.hidden_activation!r}")
        if self.output_activation != "linear":
            raise ConfigError(f"unsupported output activation {self.output_activation!r}")

    @property
    def layer_sizes(self) -> tuple:
        return (self.input_dim, *self.hidden_layers, self.output_dim)


def init_weights(config: MlpConfig, seed: int) -> list:
    """Symmetric scaled-uniform weights, bound sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    sizes = config.layer_sizes
    weights = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        weights.append((w, np.zeros(fan_out)))
    return weights


def assemble_psd(raw, n: int):
    """P = U^T U with U upper-triangular filled row-major from ``raw``.

    Differentiable; the explicit symmetrization makes P bitwise symmetric.
    """
    u = ad.triu_matrix(raw, n)
    p = ad.matmul(ad.transpose_last2(u), u)
    return (p + ad.transpose_last2(p)) * 0.5


class Mlp:
    """MLP over scalar time with exact forward-mode time derivatives."""

    def __init__(self, config: MlpConfig, time_scale=(0.0, 1.0), seed: int = 0, weights=None):
        self.config = config
        t_min, t_max = float(time_scale[0]), float(time_scale[1])
        if not t_max > t_min:
            raise ConfigError("time_scale must satisfy t_max > t_min")
        self.time_scale = (t_min, t_max)
        self.weights = weights if weights is not None else init_weights(config, seed)
        for w, b in self.weights:
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ConfigError("network weights must be finite")

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.weights)

    def _raw_forward(self, t, weights=None, tape=None):
        """Shared trunk: returns the dual output node and the owning tape."""
        ws = self.weights if weights is None else weights
        if tape is None:
            for w, b in ws:
                if isinstance(w, Var):
                    tape = w.tape
                    break
        if isinstance(t, Var):
            tape = t.tape
            tv = t
            n_t = np.shape(tv.value)[0]
        else:
            t_arr = np.atleast_1d(np.asarray(t, dtype=np.float64))
            if t_arr.ndim != 1:
                raise ConfigError("time input must be scalar or 1-D")
            if tape is None:
                tape = Tape()
            tv = tape.leaf(t_arr, tangent=np.ones_like(t_arr))
            n_t = t_arr.shape[0]
        t_min, t_max = self.time_scale
        x = ad.reshape(tv, (n_t, 1))
        h = (x - t_min) * (2.0 / (t_max - t_min)) - 1.0
        last = len(ws) - 1
        for idx, (w, b) in enumerate(ws):
            if idx == last:
                h = ad.matmul(h, w) + b
            else:
                h = ad.dense_tanh(h, w, b)
            if not np.all(np.isfinite(ad.value_of(h))):
                raise NumericalError(f"non-finite activation in layer {idx}")
        return h, tape

    def forward(self, t, weights=None, tape=None):
        """Evaluate at time(s) ``t``; returns (value, exact d/dt).

        With plain-array weights and times the result is numpy (scalar ``t``
        gives unbatched shapes); with tape nodes anywhere the result stays on
        that tape.
        """
        on_tape = tape is not None or isinstance(t, Var) or (
            weights is not None and any(isinstance(w, Var) for w, _ in weights))
        out, _tape = self._raw_forward(t, weights=weights, tape=tape)
        value = ad.stop_tangent(out)
        deriv = ad.tangent_of(out)
        value, deriv = self._shape_output(value, deriv)
        if on_tape:
            return value, deriv
        v, d = ad.value_of(value), ad.value_of(deriv)
        if np.isscalar(t) or np.ndim(t) == 0:
            return v[0], d[0]
        return v, d

    def _shape_output(self, value, deriv):
        return value, deriv

    def extrapolation_mask(self, t) -> np.ndarray:
        """True where an evaluation time lies outside the fitted span."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        t_min, t_max = self.time_scale
        return (t < t_min) | (t > t_max)


class MeanNet(Mlp):
    """State-mean network: time -> R^n."""

    kind = "mean"

    def __init__(self, state_dim: int, hidden=(32, 32, 32), time_scale=(0.0, 1.0),
                 seed: int = 0, weights=None):
        self.state_dim = int(state_dim)
        cfg = MlpConfig(input_dim=1, hidden_layers=tuple(hidden), output_dim=self.state_dim)
        super().__init__(cfg, time_scale=time_scale, seed=seed, weights=weights)


class CovNet(Mlp):
    """State-covariance network: time -> PSD matrix in R^{n x n}."""

    kind = "cov"

    def __init__(self, state_dim: int, hidden=(32, 32, 32), time_scale=(0.0, 1.0),
                 seed: int = 0, weights=None):
        self.state_dim = int(state_dim)
        out = (self.state_dim + 1) * self.state_dim // 2
        cfg = MlpConfig(input_dim=1, hidden_layers=tuple(hidden), output_dim=out)
        super().__init__(cfg, time_scale=time_scale, seed=seed, weights=weights)

    def forward(self, t, weights=None, tape=None):
        on_tape = tape is not None or isinstance(t, Var) or (
            weights is not None and any(isinstance(w, Var) for w, _ in weights))
        out, _tape = self._raw_forward(t, weights=weights, tape=tape)
        # assembling on the raw dual output sends the time derivative through
        # the same U^T U + symmetrization chain
        p = assemble_psd(out, self.state_dim)
        value = ad.stop_tangent(p)
        deriv = ad.tangent_of(p)
        if on_tape:
            return value, deriv
        v, d = ad.value_of(value), ad.value_of(deriv)
        if np.isscalar(t) or np.ndim(t) == 0:
            return v[0], d[0]
        return v, d


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _floats_to_hex(arr) -> list:
    return [v.hex() for v in np.asarray(arr, dtype=np.float64).ravel().tolist()]


def _hex_to_floats(entries, shape) -> np.ndarray:
    return np.array([float.fromhex(e) for e in entries], dtype=np.float64).reshape(shape)


def save_checkpoint(net: Mlp, path) -> None:
    """Write a versioned, bit-exact weight checkpoint."""
    payload = {
        "format": _CHECKPOINT_FORMAT,
        "kind": getattr(net, "kind", "mlp"),
        "state_dim": getattr(net, "state_dim", net.config.output_dim),
        "hidden_layers": list(net.config.hidden_layers),
        "hidden_activation": net.config.hidden_activation,
        "output_activation": net.config.output_activation,
        "time_scale": [net.time_scale[0].hex(), net.time_scale[1].hex()],
        "layers": [
            {"shape": list(w.shape), "w": _floats_to_hex(w), "b": _floats_to_hex(b)}
            for w, b in net.weights
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path) -> Mlp:
    """Load a checkpoint written by :func:`save_checkpoint`."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != _CHECKPOINT_FORMAT:
        raise ConfigError(f"unknown checkpoint format {payload.get('format')!r} in {path}")
    kind = payload["kind"]
    time_scale = tuple(float.fromhex(h) for h in payload["time_scale"])
    weights = []
    for layer in payload["layers"]:
        shape = tuple(layer["shape"])
        w = _hex_to_floats(layer["w"], shape)
        b = _hex_to_floats(layer["b"], (shape[1],))
        weights.append((w, b))
    cls = {"mean": MeanNet, "cov": CovNet}.get(kind)
    if cls is None:
        raise ConfigError(f"unknown network kind {kind!r} in {path}")
    return cls(payload["state_dim"], hidden=payload["hidden_layers"],
               time_scale=time_scale, seed=0, weights=weights)
