"""Independent numerical oracles used by the test suite.

Everything here is deliberately dumb and self-contained (finite differences,
generic RK4, dense linear solves) so it cannot share a bug with the library
code paths it checks.
"""

import numpy as np


def fd_gradient(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp.flat[j] += h
        xm.flat[j] -= h
        g.flat[j] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def fd_jacobian(f, x, h=1e-6):
    """Central finite-difference Jacobian of a vector function."""
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(f(x), dtype=np.float64)
    jac = np.zeros((f0.size, x.size))
    for j in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[j] += h
        xm[j] -= h
        jac[:, j] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2.0 * h)
    return jac


def rk4_path(rhs, x0, t_grid):
    """Generic fixed-grid RK4 integrator: rhs(x, t) -> dx/dt (ndarray)."""
    x = np.asarray(x0, dtype=np.float64).copy()
    out = np.empty((len(t_grid), x.size))
    out[0] = x
    for k in range(len(t_grid) - 1):
        t, dt = t_grid[k], t_grid[k + 1] - t_grid[k]
        k1 = rhs(x, t)
        k2 = rhs(x + 0.5 * dt * k1, t + 0.5 * dt)
        k3 = rhs(x + 0.5 * dt * k2, t + 0.5 * dt)
        k4 = rhs(x + dt * k3, t + dt)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[k + 1] = x
    return out


def riccati_reference(a, c, q, r, p0, t_grid):
    """Scalar Riccati ODE dP = 2aP - c^2 P^2 / r + q integrated with RK4."""
    def rhs(p, t):
        return np.array([2.0 * a * p[0] - (c * c) * p[0] * p[0] / r + q])
    return rk4_path(rhs, [p0], t_grid)[:, 0]


def riccati_steady_state(a, c, q, r):
    """Positive root of 2aP - c^2 P^2/r + q = 0 by the quadratic formula."""
    return (a * r + r * np.sqrt(a * a + c * c * q / r)) / (c * c)


def ekbf_mean_reference(a, c, q, r, x0, p0, y_times, y_vals, t_grid):
    """Scalar extended (here linear) Kalman-Bucy mean with interpolated data.

    dx = a x + P c / r (y(t) - c x), with P from the Riccati reference.
    """
    p_path = riccati_reference(a, c, q, r, p0, t_grid)

    def y_at(t):
        return np.interp(t, y_times, y_vals)

    def p_at(t):
        return np.interp(t, t_grid, p_path)

    def rhs(x, t):
        gain = p_at(t) * c / r
        return np.array([a * x[0] + gain * (y_at(t) - c * x[0])])

    return rk4_path(rhs, [x0], t_grid)[:, 0], p_path


def dp_acc_oracle(state, l1, l2, m_ratio, gravity=9.81, damping=0.0):
    """Double-pendulum accelerations via a generic dense 2x2 solve."""
    phi1, dphi1, phi2, dphi2 = state
    c12 = np.cos(phi1 - phi2)
    s12 = np.sin(phi1 - phi2)
    a_mat = np.array([[1.0, m_ratio * (l2 / l1) * c12],
                      [(l1 / l2) * c12, 1.0]])
    rhs = np.array([
        -m_ratio * (l2 / l1) * dphi2 ** 2 * s12 - (gravity / l1) * np.sin(phi1) - damping * dphi1,
        (l1 / l2) * dphi1 ** 2 * s12 - (gravity / l2) * np.sin(phi2) - damping * dphi2,
    ])
    return np.linalg.solve(a_mat, rhs)


def quantiles_inclusive(values):
    """Reference five-number summary with linear interpolation (R-7)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    n = len(v)

    def q(p):
        h = (n - 1) * p
        lo = int(np.floor(h))
        hi = min(lo + 1, n - 1)
        return v[lo] + (h - lo) * (v[hi] - v[lo])

    return {"min": v[0], "q1": q(0.25), "median": q(0.5), "q3": q(0.75), "max": v[-1]}
