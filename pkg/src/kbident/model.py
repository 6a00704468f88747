"""State-space models, the double-pendulum benchmark, and measurement data.

Model right-hand sides are written against the autodiff facade, so the same
``f``/``g`` code runs on plain floats (fast RK4 simulation), numpy arrays
(vectorized evaluation at many time points) and tape nodes (training).
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, NumericalError

__all__ = [
    "ParamSpec", "StateSpaceModel", "NoiseSpec", "DoublePendulumParams",
    "MeasurementSeries", "GRAVITY",
    "dp_rhs", "double_pendulum", "scalar_linear", "pendulum_energy",
    "simulate", "measure", "save_measurements", "load_measurements",
    "aligned_sim_dt",
]

GRAVITY = 9.81


@dataclass(frozen=True)
class ParamSpec:
    """One identifiable model parameter with its admissible range."""

    name: str
    unit: str = ""
    lower: Optional[float] = None
    upper: Optional[float] = None
    init: float = 0.5


@dataclass
class StateSpaceModel:
    """Continuous-time nonlinear state-space model.

    ``f(x, u, w, t, theta)`` returns the state derivative, ``g(x, u, v, t)``
    the output; both take sequences of scalars (floats, arrays, or tape
    nodes) and must be composed of autodiff-supported operations.  ``g``
    with zero noise is deterministic in ``(x, u, t)``.

    ``output_matrix`` declares a linear-additive measurement y = C x + v,
    which enables closed-form moment propagation and constant measurement
    linearizations.  ``additive_process_noise`` declares f = f0(x,u,t,th) + w.
    """

    n: int
    p: int
    q: int
    d: int
    f: Callable
    g: Callable
    param_meta: tuple = ()
    u: Callable = lambda t: ()
    output_matrix: Optional[np.ndarray] = None
    additive_process_noise: bool = True
    name: str = "model"

    def __post_init__(self):
        if len(self.param_meta) != self.d:
            raise ConfigError("param_meta length must equal parameter count d")
        if self.output_matrix is not None:
            c = np.asarray(self.output_matrix, dtype=np.float64)
            if c.shape != (self.q, self.n):
                raise ConfigError(f"output_matrix must be {self.q}x{self.n}")
            self.output_matrix = c

    def f_at(self, x, t, theta, w=None):
        """Evaluate f with the model input signal and (default zero) noise."""
        if w is None:
            w = (0.0,) * self.n
        return self.f(x, self.u(t), w, t, theta)

    def g_at(self, x, t, v=None):
        if v is None:
            v = (0.0,) * self.q
        return self.g(x, self.u(t), v, t)


@dataclass
class NoiseSpec:
    """Process and measurement noise covariances plus the sampling seed.

    R = 0 is admitted here so noise-free data generation works; the filter
    equations re-check invertibility where R actually gets inverted.
    """

    Q: np.ndarray
    R: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=np.float64))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=np.float64))
        for name, m in (("Q", self.Q), ("R", self.R)):
            if m.shape[0] != m.shape[1]:
                raise ConfigError(f"{name} must be square")
            if not np.allclose(m, m.T):
                raise ConfigError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(m)) < -1e-12:
                raise ConfigError(f"{name} must be positive semidefinite")


@dataclass
class DoublePendulumParams:
    """Physical double-pendulum parameters; M = m2/(m1+m2)."""

    l1: float
    l2: float
    M: float
    gravity: float = GRAVITY
    damping: float = 0.0

    @classmethod
    def from_masses(cls, l1, l2, m1, m2, gravity=GRAVITY, damping=0.0):
        return cls(l1=l1, l2=l2, M=m2 / (m1 + m2), gravity=gravity, damping=damping)

    def __post_init__(self):
        if self.l1 <= 0 or self.l2 <= 0:
            raise ConfigError("rod lengths must be positive")
        if not 0.0 < self.M < 1.0:
            raise ConfigError("mass ratio M must lie in (0, 1)")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.l1, self.l2, self.M])


def dp_rhs(state, params: DoublePendulumParams):
    """Double-pendulum state derivative [dphi1, ddphi1, dphi2, ddphi2].

    The two angular accelerations are defined implicitly (each appears in
    the other's equation); the underlying 2x2 linear system is solved in
    closed form, which keeps the map differentiable.
    """
    phi1, dphi1, phi2, dphi2 = state
    acc1, acc2 = _dp_acc(phi1, dphi1, phi2, dphi2,
                         params.l1, params.l2, params.M,
                         params.gravity, params.damping)
    return [dphi1, acc1, dphi2, acc2]


def _dp_acc(phi1, dphi1, phi2, dphi2, l1, l2, m_ratio, gravity, damping):
    d12 = phi1 - phi2
    c12 = ad.cos(d12)
    s12 = ad.sin(d12)
    a = m_ratio * (l2 / l1) * c12
    b = (l1 / l2) * c12
    r1 = -m_ratio * (l2 / l1) * dphi2 * dphi2 * s12 - (gravity / l1) * ad.sin(phi1) - damping * dphi1
    r2 = (l1 / l2) * dphi1 * dphi1 * s12 - (gravity / l2) * ad.sin(phi2) - damping * dphi2
    det = 1.0 - a * b
    det_min = np.min(np.abs(ad.value_of(det)))
    if det_min < 1e-12:
        raise NumericalError("singular pendulum configuration: |1 - a*b| < 1e-12")
    acc1 = (r1 - a * r2) / det
    acc2 = (r2 - b * r1) / det
    return acc1, acc2


def pendulum_energy(states, params: DoublePendulumParams) -> np.ndarray:
    """Mechanical energy per unit total mass; conserved when damping is 0."""
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    phi1, dphi1, phi2, dphi2 = s[:, 0], s[:, 1], s[:, 2], s[:, 3]
    l1, l2, m, g = params.l1, params.l2, params.M, params.gravity
    kin = (0.5 * l1 ** 2 * dphi1 ** 2 + 0.5 * m * l2 ** 2 * dphi2 ** 2
           + m * l1 * l2 * dphi1 * dphi2 * np.cos(phi1 - phi2))
    pot = -g * l1 * np.cos(phi1) - m * g * l2 * np.cos(phi2)
    e = kin + pot
    return e if np.ndim(states) > 1 else float(e[0])


def double_pendulum(damping: float = 0.0, gravity: float = GRAVITY) -> StateSpaceModel:
    """Fully-observed double pendulum; theta = [l1, l2, M], y = x + v."""

    def f(x, u, w, t, theta):
        l1, l2, m_ratio = theta
        phi1, dphi1, phi2, dphi2 = x
        acc1, acc2 = _dp_acc(phi1, dphi1, phi2, dphi2, l1, l2, m_ratio, gravity, damping)
        return [dphi1 + w[0], acc1 + w[1], dphi2 + w[2], acc2 + w[3]]

    def g(x, u, v, t):
        return [x[j] + v[j] for j in range(4)]

    meta = (
        ParamSpec("l1", "m", lower=0.0, upper=None, init=0.5),
        ParamSpec("l2", "m", lower=0.0, upper=None, init=0.5),
        ParamSpec("M", "", lower=0.0, upper=1.0, init=0.5),
    )
    return StateSpaceModel(n=4, p=0, q=4, d=3, f=f, g=g, param_meta=meta,
                           output_matrix=np.eye(4), name="double_pendulum")


def scalar_linear(c: float = 1.0) -> StateSpaceModel:
    """Scalar linear system dx = theta*x + w, y = c*x + v (one free rate)."""

    def f(x, u, w, t, theta):
        return [theta[0] * x[0] + w[0]]

    def g(x, u, v, t):
        return [c * x[0] + v[0]]

    meta = (ParamSpec("a", "1/s", lower=None, upper=None, init=0.0),)
    return StateSpaceModel(n=1, p=0, q=1, d=1, f=f, g=g, param_meta=meta,
                           output_matrix=np.array([[c]]), name="scalar_linear")


def fixed_scalar_linear(a: float, c: float = 1.0) -> StateSpaceModel:
    """Scalar linear system with a known rate constant (no free parameters)."""

    def f(x, u, w, t, theta):
        return [a * x[0] + w[0]]

    def g(x, u, v, t):
        return [c * x[0] + v[0]]

    return StateSpaceModel(n=1, p=0, q=1, d=0, f=f, g=g, param_meta=(),
                           output_matrix=np.array([[c]]), name="fixed_scalar_linear")


# ---------------------------------------------------------------------------
# simulation and measurement
# ---------------------------------------------------------------------------

def simulate(model: StateSpaceModel, theta, x0, duration: float, dt: float):
    """Classical fixed-step RK4 integration; returns (times, states).

    States are recorded at every step including t = 0.
    """
    if dt <= 0:
        raise ConfigError("dt must be positive")
    if duration < dt:
        raise ConfigError("duration must be at least one step")
    theta = tuple(float(v) for v in np.atleast_1d(theta)) if model.d else ()
    x = tuple(float(v) for v in x0)
    if len(x) != model.n:
        raise ConfigError(f"x0 must have length {model.n}")
    n_steps = int(round(duration / dt))
    states = np.empty((n_steps + 1, model.n))
    states[0] = x
    rhs = model.f_at
    for k in range(n_steps):
        t = k * dt
        try:
            k1 = rhs(x, t, theta)
            k2 = rhs(_axpy(x, k1, 0.5 * dt), t + 0.5 * dt, theta)
            k3 = rhs(_axpy(x, k2, 0.5 * dt), t + 0.5 * dt, theta)
            k4 = rhs(_axpy(x, k3, dt), t + dt, theta)
        except (ValueError, OverflowError):
            # a stage received inf/nan before the post-step check could fire
            raise NumericalError(
                f"state diverged at step {k + 1} (t = {(k + 1) * dt:.6g} s)") from None
        x = tuple(x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
                  for j in range(model.n))
        if not all(math.isfinite(v) for v in x):
            raise NumericalError(f"state diverged at step {k + 1} (t = {(k + 1) * dt:.6g} s)")
        states[k + 1] = x
    times = np.arange(n_steps + 1) * dt
    return times, states


def _axpy(x, k, h):
    return tuple(x[j] + h * k[j] for j in range(len(x)))


def aligned_sim_dt(frequency_hz: float, target_dt: float = 1e-4) -> tuple:
    """Simulator step that divides the sample period exactly.

    Returns (dt, steps_per_sample) with dt <= target_dt.
    """
    if frequency_hz <= 0:
        raise ConfigError("sampling frequency must be positive")
    period = 1.0 / frequency_hz
    k = max(1, int(math.ceil(period / target_dt - 1e-12)))
    return period / k, k


@dataclass
class MeasurementSeries:
    """Timestamped noisy output samples, the training data."""

    times: np.ndarray
    samples: np.ndarray
    frequency_hz: Optional[float] = None
    noise: Optional[NoiseSpec] = None
    truth_theta: Optional[np.ndarray] = None
    truth_x0: Optional[np.ndarray] = None
    synthetic_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.samples.shape[0] != self.times.shape[0]:
            raise ConfigError("times and samples must have the same length")
        if self.times.ndim != 1 or len(self.times) == 0:
            raise ConfigError("times must be a non-empty 1-D array")
        if np.any(np.diff(self.times) <= 0):
            raise ConfigError("times must be strictly increasing")
        if not (np.all(np.isfinite(self.times)) and np.all(np.isfinite(self.samples))):
            raise ConfigError("measurement series contains non-finite entries")
        if self.truth_theta is not None:
            self.truth_theta = np.asarray(self.truth_theta, dtype=np.float64)
        if self.truth_x0 is not None:
            self.truth_x0 = np.asarray(self.truth_x0, dtype=np.float64)
        if self.synthetic_mask is not None:
            self.synthetic_mask = np.asarray(self.synthetic_mask, dtype=bool)
            if self.synthetic_mask.shape != self.times.shape:
                raise ConfigError("synthetic mask must match times")

    def __len__(self):
        return len(self.times)

    @property
    def q(self) -> int:
        return self.samples.shape[1]

    @property
    def span(self) -> tuple:
        return float(self.times[0]), float(self.times[-1])

    def measured(self) -> "MeasurementSeries":
        """The series without any appended synthetic tail points."""
        if self.synthetic_mask is None or not self.synthetic_mask.any():
            return self
        keep = ~self.synthetic_mask
        return MeasurementSeries(self.times[keep], self.samples[keep],
                                 frequency_hz=self.frequency_hz, noise=self.noise,
                                 truth_theta=self.truth_theta, truth_x0=self.truth_x0)


def measure(trajectory, model: StateSpaceModel, noise: NoiseSpec,
            sample_times) -> MeasurementSeries:
    """Sample noisy outputs g(x(t_i)) + v_i on instants aligned with the grid.

    Refuses to interpolate: every sample instant must coincide with a
    trajectory step.
    """
    times, states = trajectory
    sample_times = np.asarray(sample_times, dtype=np.float64)
    dt = times[1] - times[0]
    idx_f = sample_times / dt
    idx = np.rint(idx_f).astype(int)
    if np.any(np.abs(idx_f - idx) > 1e-6) or np.any(idx < 0) or np.any(idx >= len(times)):
        raise ConfigError("sample instants are not aligned with the simulation grid")
    x_at = states[idx]
    if model.output_matrix is not None:
        y_clean = x_at @ model.output_matrix.T
    else:
        cols = [x_at[:, j] for j in range(model.n)]
        zeros = (0.0,) * model.q
        y_list = model.g(cols, model.u(sample_times), zeros, sample_times)
        y_clean = np.stack([np.broadcast_to(ad.value_of(c), (len(idx),)) for c in y_list], axis=-1)
    rng = np.random.default_rng(noise.seed)
    try:
        factor = np.linalg.cholesky(noise.R) if np.any(noise.R) else np.zeros_like(noise.R)
    except np.linalg.LinAlgError:
        evals, evecs = np.linalg.eigh(noise.R)
        factor = evecs * np.sqrt(np.maximum(evals, 0.0))
    v = rng.standard_normal((len(idx), model.q)) @ factor.T
    freq = 1.0 / (sample_times[1] - sample_times[0]) if len(sample_times) > 1 else None
    return MeasurementSeries(sample_times, y_clean + v, frequency_hz=freq, noise=noise)


# ---------------------------------------------------------------------------
# CSV interchange
# ---------------------------------------------------------------------------

def _meta_path(path) -> str:
    return f"{path}.meta.json"


def save_measurements(series: MeasurementSeries, path) -> None:
    """Write a measurement CSV (header t,y1..yq; 17 significant digits)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        cols = ",".join(f"y{j + 1}" for j in range(series.q))
        fh.write(f"t,{cols}\n")
        for t, row in zip(series.times, series.samples):
            vals = ",".join(f"{v:.17g}" for v in row)
            fh.write(f"{t:.17g},{vals}\n")
    meta = {}
    if series.frequency_hz is not None:
        meta["frequency_hz"] = series.frequency_hz
    if series.noise is not None:
        meta["noise"] = {"Q": series.noise.Q.tolist(), "R": series.noise.R.tolist(),
                         "seed": series.noise.seed}
    if series.truth_theta is not None:
        meta["truth_theta"] = series.truth_theta.tolist()
    if series.truth_x0 is not None:
        meta["truth_x0"] = series.truth_x0.tolist()
    if meta:
        with open(_meta_path(path), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=1)
            fh.write("\n")


def load_measurements(path) -> MeasurementSeries:
    """Parse a measurement CSV; errors carry the offending line number."""
    times = []
    rows = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        if not header or header[0].strip() != "t":
            raise ConfigError(f"{path}: line 1: header must start with 't'")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise ConfigError(f"{path}: line {lineno}: expected {width} columns, got {len(row)}")
            try:
                vals = [float(v) for v in row]
            except ValueError as e:
                raise ConfigError(f"{path}: line {lineno}: non-numeric cell ({e})") from None
            if times and vals[0] <= times[-1]:
                raise ConfigError(f"{path}: line {lineno}: timestamps must be strictly increasing")
            times.append(vals[0])
            rows.append(vals[1:])
    if not times:
        raise ConfigError(f"{path}: no data rows")
    kwargs = {}
    meta_file = _meta_path(path)
    if os.path.exists(meta_file):
        with open(meta_file, encoding="utf-8") as fh:
            meta = json.load(fh)
        if "noise" in meta:
            kwargs["noise"] = NoiseSpec(Q=np.asarray(meta["noise"]["Q"]),
                                        R=np.asarray(meta["noise"]["R"]),
                                        seed=meta["noise"].get("seed", 0))
        if "truth_theta" in meta:
            kwargs["truth_theta"] = np.asarray(meta["truth_theta"])
        if "truth_x0" in meta:
            kwargs["truth_x0"] = np.asarray(meta["truth_x0"])
        if "frequency_hz" in meta:
            kwargs["frequency_hz"] = meta["frequency_hz"]
    series = MeasurementSeries(np.asarray(times), np.asarray(rows), **kwargs)
    if series.frequency_hz is None and len(series) > 1:
        series.frequency_hz = 1.0 / float(np.median(np.diff(series.times)))
    return series
