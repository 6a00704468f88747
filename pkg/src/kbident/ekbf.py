"""Filter-residual losses for training the mean and covariance networks.

The mean network must satisfy the filter's mean ODE (its time derivative
matches the model drift plus a Kalman-gain measurement correction), the
covariance network the matrix Riccati ODE, and both together a Gaussian
likelihood of the raw measurements.  The three residual families are summed
over all measurement instants with positive weights; initial-condition terms
appear inside every per-point term exactly as the equations are stated, with
an ``ic_once`` switch to count them once instead.

Linearizations of the model about the current mean estimate ride on the
autodiff tape, so loss gradients include their second-order contributions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ConfigError, NumericalError, UnsupportedMeasurementError
from .model import MeasurementSeries, NoiseSpec, StateSpaceModel

__all__ = [
    "FilterMatrices", "KbinnLossConfig", "LossBreakdown",
    "linearize", "kalman_gain", "propagate_moments",
    "loss_l1", "loss_l2", "loss_l3", "loss_total", "loss_pinn",
]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class FilterMatrices:
    """Model linearizations at one mean estimate (arrays or tape nodes)."""

    a_hat: object   # df/dx,   (..., n, n)
    c_hat: object   # dg/dx,   (..., q, n)
    g_hat: object   # df/dw,   (..., n, n)
    v_hat: object   # dg/dv,   (..., q, q)
    q_hat: object   # G Q G^T
    r_hat: object   # V R V^T
    r_hat_inv: object

    def values(self) -> "FilterMatrices":
        return FilterMatrices(*(ad.value_of(getattr(self, f)) for f in
                                ("a_hat", "c_hat", "g_hat", "v_hat",
                                 "q_hat", "r_hat", "r_hat_inv")))


@dataclass
class KbinnLossConfig:
    """Loss weights, initial filter conditions, and noise covariances."""

    x0: np.ndarray
    noise: NoiseSpec
    P0: Optional[np.ndarray] = None
    alpha1: float = 1.0
    alpha2: float = 1.0
    alpha3: float = 1.0
    ic_once: bool = False
    squared_residuals: bool = False

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=np.float64))
        if min(self.alpha1, self.alpha2, self.alpha3) <= 0:
            raise ConfigError("loss weights alpha_j must be positive")
        if np.min(np.linalg.eigvalsh(self.noise.R)) <= 0:
            raise ConfigError("measurement covariance R must be invertible")
        if self.P0 is None:
            self.P0 = self.noise.R.copy()
        self.P0 = np.atleast_2d(np.asarray(self.P0, dtype=np.float64))
        if np.min(np.linalg.eigvalsh(self.P0)) < -1e-12:
            raise ConfigError("initial covariance P0 must be positive semidefinite")


@dataclass
class LossBreakdown:
    """Weighted loss total with per-term sums and optional per-point matrix."""

    total: float
    l1_sum: float
    l2_sum: float
    l3_sum: float
    per_point: Optional[np.ndarray] = None
    ic_l1: float = 0.0
    ic_l2: float = 0.0
    ic_once: bool = False
    node: object = None  # scalar tape node of `total` when evaluated on-tape

    def to_dict(self) -> dict:
        out = {"total": self.total, "l1_sum": self.l1_sum,
               "l2_sum": self.l2_sum, "l3_sum": self.l3_sum,
               "ic_l1": self.ic_l1, "ic_l2": self.ic_l2, "ic_once": self.ic_once}
        if self.per_point is not None:
            out["per_point"] = self.per_point.tolist()
        return out


def _lift(tape: Tape, x):
    return x if isinstance(x, Var) else tape.leaf(x, const=True)


def _tape_of(*candidates) -> Optional[Tape]:
    for x in candidates:
        if isinstance(x, Var):
            return x.tape
        if isinstance(x, (list, tuple)):
            for e in x:
                if isinstance(e, Var):
                    return e.tape
    return None


def _columns(x, n: int):
    nd = np.ndim(ad.value_of(x))
    if nd == 1:
        return [x[j] if isinstance(x, Var) else ad.value_of(x)[j] for j in range(n)]
    return [ad.getitem(x, (Ellipsis, j)) if isinstance(x, Var) else np.asarray(x)[..., j]
            for j in range(n)]


def _stack_outputs(tape: Tape, outs, axis=-1):
    outs = [o if isinstance(o, Var) else _lift(tape, o) for o in outs]
    return ad.stack(outs, axis=axis)


def _directional_jacobian(tape: Tape, fn, x_cols, n_out: int):
    """Stacked Jacobian of ``fn`` via one forward pass with a batch of seeds.

    Input values are viewed as trailing-singleton columns whose tangents hold
    one-hot direction batches, so a single dual evaluation yields all columns
    at once.  Entries stay on the tape, so downstream gradients see the
    linearization's dependence on the evaluation point.

    Returns (jacobian, primal_outputs); the primal list carries the
    (..., 1)-shaped function values from the same pass.
    """
    n_in = len(x_cols)
    seeded = []
    for k in range(n_in):
        xk = _lift(tape, x_cols[k])
        v = ad.value_of(xk)
        xk = ad.reshape(xk, (1,) if np.ndim(v) == 0 else (np.shape(v)[0], 1))
        seed = np.zeros(n_in)
        seed[k] = 1.0
        seeded.append(ad.with_tangent(xk, seed))
    outs = [_lift(tape, o) for o in fn(seeded)]
    rows = [ad.tangent_of(o) for o in outs]
    return ad.stack(rows, axis=-2), outs


def _linearize_full(model: StateSpaceModel, mean, t, theta_hat,
                    noise: NoiseSpec):
    """Linearizations plus the drift primal from the same dual pass."""
    tape = _tape_of(mean, theta_hat)
    if tape is None:
        tape = Tape()
    mean = _lift(tape, np.asarray(ad.value_of(mean), dtype=np.float64)
                 if not isinstance(mean, Var) else mean)
    n, q = model.n, model.q
    x_cols = _columns(mean, n)
    theta = [_lift(tape, th) if isinstance(th, Var) else th
             for th in (theta_hat if model.d else [])]
    u = model.u(t)
    zeros_w = (0.0,) * n
    zeros_v = (0.0,) * q

    a_hat, f_primal = _directional_jacobian(
        tape, lambda xs: model.f(xs, u, zeros_w, t, theta), x_cols, n)

    if model.output_matrix is not None:
        c_hat = model.output_matrix
        v_hat = np.eye(q)
        r_hat = noise.R
    else:
        c_hat, _ = _directional_jacobian(
            tape, lambda xs: model.g(xs, u, zeros_v, t), x_cols, q)
        stopped = [ad.stop_tangent(c) if isinstance(c, Var) else c for c in x_cols]
        v_seed = [_lift(tape, 0.0) for _ in range(q)]
        v_hat, _ = _directional_jacobian(
            tape, lambda vs: model.g(stopped, u, vs, t), v_seed, q)
        r_hat = ad.matmul(ad.matmul(v_hat, noise.R), ad.transpose_last2(v_hat))

    if model.additive_process_noise:
        g_hat = np.eye(n)
        q_hat = noise.Q
    else:
        stopped = [ad.stop_tangent(c) if isinstance(c, Var) else c for c in x_cols]
        w_seed = [_lift(tape, 0.0) for _ in range(n)]
        g_hat, _ = _directional_jacobian(
            tape, lambda ws: model.f(stopped, u, ws, t, theta), w_seed, n)
        q_hat = ad.matmul(ad.matmul(g_hat, noise.Q), ad.transpose_last2(g_hat))

    if isinstance(r_hat, Var):
        r_inv = ad.inv(r_hat)
    else:
        try:
            r_inv = np.linalg.inv(r_hat)
        except np.linalg.LinAlgError:
            raise ConfigError("mapped measurement covariance R_hat is singular; "
                              "choose an invertible R") from None
    mats = FilterMatrices(a_hat=a_hat, c_hat=c_hat, g_hat=g_hat, v_hat=v_hat,
                          q_hat=q_hat, r_hat=r_hat, r_hat_inv=r_inv)
    return mats, f_primal


def linearize(model: StateSpaceModel, mean, t, theta_hat,
              noise: NoiseSpec) -> FilterMatrices:
    """Jacobians of f and g about the mean, plus mapped noise covariances.

    Declared structure is exploited: a linear-additive measurement gives
    constant C/V, additive process noise gives G = I; both keep gradients
    exact because the true Jacobians are constant in those cases.
    """
    mats, _ = _linearize_full(model, mean, t, theta_hat, noise)
    return mats


def kalman_gain(P, mats: FilterMatrices):
    """K = P C^T R^{-1}; differentiable in P (and in C, R when on-tape)."""
    ct = ad.transpose_last2(mats.c_hat) if isinstance(mats.c_hat, Var) else np.asarray(mats.c_hat).T
    return ad.matmul(ad.matmul(P, ct), mats.r_hat_inv)


def propagate_moments(mean, cov, model: StateSpaceModel, noise: NoiseSpec):
    """Output mean and per-channel variance for x ~ N(mean, cov).

    Closed form for declared linear-additive measurements:
    mu = C mean, sigma2_j = (C cov C^T)_jj + R_jj.
    """
    if model.output_matrix is None:
        raise UnsupportedMeasurementError(
            "closed-form moment propagation requires a declared linear-additive "
            "measurement (y = C x + v)")
    c = model.output_matrix
    single = np.ndim(ad.value_of(mean)) == 1
    if single:
        mean = ad.reshape(mean, (1, model.n)) if isinstance(mean, Var) else np.asarray(mean)[None, :]
        cov = ad.reshape(cov, (1, model.n, model.n)) if isinstance(cov, Var) else np.asarray(cov)[None, ...]
    mu = ad.matmul(mean, c.T)
    inner = ad.matmul(np.ascontiguousarray(c), ad.matmul(cov, c.T))
    sigma2 = ad.diag_last2(inner) + np.diag(noise.R)
    if np.min(ad.value_of(sigma2)) <= 0:
        raise NumericalError("non-positive predictive variance")
    if single:
        mu = ad.getitem(mu, 0) if isinstance(mu, Var) else mu[0]
        sigma2 = ad.getitem(sigma2, 0) if isinstance(sigma2, Var) else sigma2[0]
    return mu, sigma2


def loss_l3(mu, sigma2, y_bar):
    """Exact Gaussian negative log likelihood summed over output channels."""
    if np.min(ad.value_of(sigma2)) <= 0:
        raise NumericalError("Gaussian NLL needs positive variances")
    diff = mu - y_bar if isinstance(mu, Var) else np.asarray(mu) - np.asarray(y_bar)
    nll = (ad.log(sigma2 * (2.0 * math.pi)) + diff * diff / sigma2) * 0.5
    return ad.vsum(nll, axis=-1)


# ---------------------------------------------------------------------------
# batched residual core
# ---------------------------------------------------------------------------

def _norm_or_squared(x, axis, squared: bool):
    if squared:
        sq = x * x
        return ad.vsum(sq, axis=axis)
    return ad.norm2(x, axis=axis)


def _mean_residual(xi, xid, times, ybar, model, theta, mats, gain, config,
                   f_primal=None):
    """|| xi_dot - f(xi) - K (ybar - yhat) || at every instant."""
    n = model.n
    x_cols = _columns(xi, n)
    u = model.u(times)
    zeros_w = (0.0,) * n
    tape = _tape_of(xi, xid, theta) or Tape()
    if f_primal is not None:
        n_batch = np.shape(ad.value_of(xi))[0]
        cols = [ad.reshape(ad.stop_tangent(o), (n_batch,)) for o in f_primal]
        f_val = ad.stack(cols, axis=-1)
    else:
        f_val = _stack_outputs(tape, model.f(x_cols, u, zeros_w, times, theta))
    if model.output_matrix is not None:
        yhat = ad.matmul(xi, model.output_matrix.T)
    else:
        zeros_v = (0.0,) * model.q
        yhat = _stack_outputs(tape, model.g(x_cols, u, zeros_v, times))
    innov = ybar - yhat if isinstance(yhat, Var) else np.asarray(ybar) - yhat
    nbatch = np.shape(ad.value_of(innov))[0]
    innov_col = ad.reshape(innov, (nbatch, model.q, 1))
    corr = ad.reshape(ad.matmul(gain, innov_col), (nbatch, n))
    res = xid - (f_val + corr)
    return _norm_or_squared(res, -1, config.squared_residuals)


def _cov_residual(P, Pd, mats, config):
    """|| P_dot - (A P + P A^T - P C^T R^-1 C P + Q) ||_F at every instant."""
    a = mats.a_hat
    ap = ad.matmul(a, P)
    pat = ad.matmul(P, ad.transpose_last2(a) if isinstance(a, Var) else np.swapaxes(a, -1, -2))
    if isinstance(mats.c_hat, Var) or isinstance(mats.r_hat_inv, Var):
        ct = ad.transpose_last2(mats.c_hat) if isinstance(mats.c_hat, Var) else np.asarray(mats.c_hat).T
        mid = ad.matmul(ad.matmul(ct, mats.r_hat_inv), mats.c_hat)
    else:
        mid = np.asarray(mats.c_hat).T @ np.asarray(mats.r_hat_inv) @ np.asarray(mats.c_hat)
    pcp = ad.matmul(ad.matmul(P, mid), P)
    psi = ap + pat - pcp + mats.q_hat
    res = Pd - psi
    return _norm_or_squared(res, (-2, -1), config.squared_residuals)


def _evaluate_kbinn(mean_net, cov_net, theta_hat, series: MeasurementSeries,
                    model: StateSpaceModel, config: KbinnLossConfig, *,
                    mean_params=None, cov_params=None, tape=None):
    """Evaluate every per-point loss term over the whole series on one tape."""
    if tape is None:
        tape = _tape_of(theta_hat, mean_params and mean_params[0][0]) or Tape()
    times = series.times
    ybar = series.samples
    theta = list(theta_hat) if model.d else []

    xi, xid = mean_net.forward(times, weights=mean_params, tape=tape)
    xi0, _ = mean_net.forward(np.array([0.0]), weights=mean_params, tape=tape)
    P, Pd = cov_net.forward(times, weights=cov_params, tape=tape)
    P0net, _ = cov_net.forward(np.array([0.0]), weights=cov_params, tape=tape)

    mats, f_primal = _linearize_full(model, xi, times, theta, config.noise)
    gain = kalman_gain(P, mats)

    res1 = _mean_residual(xi, xid, times, ybar, model, theta, mats, gain, config,
                          f_primal=f_primal)
    res2 = _cov_residual(P, Pd, mats, config)
    ic1 = _norm_or_squared(ad.reshape(xi0, (model.n,)) - config.x0, -1,
                           config.squared_residuals)
    ic2 = _norm_or_squared(ad.getitem(P0net, 0) - config.P0, (-2, -1),
                           config.squared_residuals)

    mu, sigma2 = propagate_moments(xi, P, model, config.noise)
    l3_i = loss_l3(mu, sigma2, ybar)
    return tape, res1, res2, ic1, ic2, l3_i


def loss_l1(mean_net, cov_net, theta_hat, series, model, config,
            t_i, y_bar_i):
    """Mean-ODE residual term at instant(s) ``t_i`` (IC norm included)."""
    sub = MeasurementSeries(np.atleast_1d(np.asarray(t_i, dtype=np.float64)),
                            np.atleast_2d(np.asarray(y_bar_i, dtype=np.float64)))
    _, res1, _, ic1, _, _ = _evaluate_kbinn(mean_net, cov_net, theta_hat, sub,
                                            model, config)
    out = res1 + ic1
    vals = ad.value_of(out)
    return float(vals[0]) if np.shape(vals) == (1,) else vals


def loss_l2(cov_net, mats: FilterMatrices, config: KbinnLossConfig, t_i):
    """Covariance-Riccati residual term at instant(s) ``t_i``."""
    t_arr = np.atleast_1d(np.asarray(t_i, dtype=np.float64))
    P, Pd = cov_net.forward(t_arr)
    tape = _tape_of(mats.a_hat, mats.c_hat, mats.q_hat, mats.r_hat_inv) or Tape()
    P = tape.leaf(P)
    Pd = tape.leaf(Pd)
    res2 = _cov_residual(P, Pd, mats, config)
    P0net, _ = cov_net.forward(np.array([0.0]))
    ic2 = _norm_or_squared(tape.leaf(P0net[0]) - config.P0, (-2, -1),
                           config.squared_residuals)
    out = res2 + ic2
    vals = ad.value_of(out)
    return float(vals[0]) if np.shape(vals) == (1,) else vals


def loss_total(mean_net, cov_net, theta_hat, series: MeasurementSeries,
               model: StateSpaceModel, config: KbinnLossConfig, *,
               mean_params=None, cov_params=None, tape=None,
               want_per_point: bool = False) -> LossBreakdown:
    """Weighted sum of all three loss families over every collocation point.

    The returned breakdown carries the scalar tape node in ``.node``;
    gradients with respect to any lifted parameters flow through it.
    """
    tape, res1, res2, ic1, ic2, l3_i = _evaluate_kbinn(
        mean_net, cov_net, theta_hat, series, model, config,
        mean_params=mean_params, cov_params=cov_params, tape=tape)
    n_pts = float(len(series))
    if config.ic_once:
        l1_i, l2_i = res1, res2
        l1_sum = ad.vsum(res1) + ic1
        l2_sum = ad.vsum(res2) + ic2
    else:
        l1_i = res1 + ic1
        l2_i = res2 + ic2
        l1_sum = ad.vsum(res1) + n_pts * ic1
        l2_sum = ad.vsum(res2) + n_pts * ic2
    l3_sum = ad.vsum(l3_i)
    total = config.alpha1 * l1_sum + config.alpha2 * l2_sum + config.alpha3 * l3_sum
    per_point = None
    if want_per_point:
        per_point = np.stack([ad.value_of(l1_i), ad.value_of(l2_i),
                              ad.value_of(l3_i)], axis=-1)
    return LossBreakdown(
        total=float(ad.value_of(total)),
        l1_sum=float(ad.value_of(l1_sum)),
        l2_sum=float(ad.value_of(l2_sum)),
        l3_sum=float(ad.value_of(l3_sum)),
        per_point=per_point,
        ic_l1=float(ad.value_of(ic1)),
        ic_l2=float(ad.value_of(ic2)),
        ic_once=config.ic_once,
        node=total)


def loss_pinn(mean_net, theta_hat, series: MeasurementSeries,
              model: StateSpaceModel, *, mean_params=None, tape=None):
    """Noise-free squared-residual loss: ODE residual plus data misfit.

    Returns the scalar tape node; its ``.value`` is the loss.
    """
    if tape is None:
        tape = _tape_of(theta_hat, mean_params and mean_params[0][0]) or Tape()
    times = series.times
    xi, xid = mean_net.forward(times, weights=mean_params, tape=tape)
    theta = list(theta_hat) if model.d else []
    x_cols = _columns(xi, model.n)
    u = model.u(times)
    f_val = _stack_outputs(tape, model.f(x_cols, u, (0.0,) * model.n, times, theta))
    if model.output_matrix is not None:
        yhat = ad.matmul(xi, model.output_matrix.T)
    else:
        yhat = _stack_outputs(tape, model.g(x_cols, u, (0.0,) * model.q, times))
    res_ode = xid - f_val
    res_data = yhat - series.samples
    return ad.vsum(res_ode * res_ode) + ad.vsum(res_data * res_data)
