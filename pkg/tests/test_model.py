"""Double-pendulum dynamics, RK4 simulation, and measurement I/O checks."""

import numpy as np
import pytest

from kbident import autodiff as ad
from kbident.errors import ConfigError, NumericalError
from kbident.model import (DoublePendulumParams, MeasurementSeries, NoiseSpec,
                           aligned_sim_dt, double_pendulum, dp_rhs,
                           load_measurements, measure, pendulum_energy,
                           save_measurements, simulate)

from helpers import dp_acc_oracle, fd_jacobian

rng = np.random.default_rng(501)

SHOWCASE = DoublePendulumParams(l1=0.6, l2=0.9, M=4.0 / 7.0)


class TestDpRhs:
    def test_hanging_equilibrium(self):
        out = dp_rhs((0.0, 0.0, 0.0, 0.0), SHOWCASE)
        assert out == [0.0, 0.0, 0.0, 0.0]

    def test_inverted_equilibrium(self):
        # sin(pi) is ~1.2e-16 in floats, so the accelerations are zero up to
        # that representation error scaled by g/l
        out = np.array(dp_rhs((np.pi, 0.0, np.pi, 0.0), SHOWCASE))
        assert np.allclose(out, 0.0, atol=1e-13)

    def test_against_dense_solve_oracle(self):
        state = (0.1, 0.0, -0.05, 0.0)
        mine = dp_rhs(state, SHOWCASE)
        acc = dp_acc_oracle(state, 0.6, 0.9, 4.0 / 7.0)
        assert mine[0] == 0.0 and mine[2] == 0.0
        assert mine[1] == pytest.approx(acc[0], rel=1e-12)
        assert mine[3] == pytest.approx(acc[1], rel=1e-12)
        # small-angle cross-check: accelerations close to the linearization
        lin = -np.linalg.solve(
            np.array([[1.0, SHOWCASE.M * 0.9 / 0.6], [0.6 / 0.9, 1.0]]),
            np.array([9.81 / 0.6 * state[0], 9.81 / 0.9 * state[2]]))
        assert np.allclose([mine[1], mine[3]], lin, rtol=0.05)

    def test_random_states_match_oracle(self):
        for _ in range(50):
            state = tuple(rng.uniform(-1.0, 1.0, 4) * np.array([2.0, 6.0, 2.0, 6.0]))
            params = DoublePendulumParams(
                l1=rng.uniform(0.05, 1.0), l2=rng.uniform(0.05, 1.0),
                M=rng.uniform(0.05, 0.95), damping=rng.choice([0.0, 0.05]))
            mine = dp_rhs(state, params)
            acc = dp_acc_oracle(state, params.l1, params.l2, params.M,
                                damping=params.damping)
            assert mine[1] == pytest.approx(acc[0], rel=1e-10, abs=1e-12)
            assert mine[3] == pytest.approx(acc[1], rel=1e-10, abs=1e-12)

    def test_odd_symmetry_exact(self):
        for _ in range(20):
            state = rng.uniform(-1.0, 1.0, 4) * np.array([2.0, 5.0, 2.0, 5.0])
            f_pos = np.array(dp_rhs(tuple(state), SHOWCASE))
            f_neg = np.array(dp_rhs(tuple(-state), SHOWCASE))
            assert np.array_equal(f_neg, -f_pos)

    def test_implicit_equation_residual(self):
        # plug the closed-form accelerations back into both coupled equations
        for _ in range(30):
            state = rng.uniform(-1.0, 1.0, 4) * np.array([2.0, 6.0, 2.0, 6.0])
            p = DoublePendulumParams(l1=rng.uniform(0.05, 1.0),
                                     l2=rng.uniform(0.05, 1.0),
                                     M=rng.uniform(0.05, 0.95))
            phi1, dphi1, phi2, dphi2 = state
            _, a1, _, a2 = dp_rhs(tuple(state), p)
            c12 = np.cos(phi1 - phi2)
            s12 = np.sin(phi1 - phi2)
            r1 = a1 + p.M * (p.l2 / p.l1) * (a2 * c12 + dphi2 ** 2 * s12) \
                + (p.gravity / p.l1) * np.sin(phi1)
            r2 = a2 + (p.l1 / p.l2) * (a1 * c12 - dphi1 ** 2 * s12) \
                + (p.gravity / p.l2) * np.sin(phi2)
            scale = max(1.0, abs(a1), abs(a2))
            assert abs(r1) / scale < 1e-12
            assert abs(r2) / scale < 1e-12

    def test_jacobian_matches_finite_differences(self):
        model = double_pendulum(damping=0.0)
        theta = (0.6, 0.9, 4.0 / 7.0)
        for _ in range(100):
            x = rng.uniform(-1.0, 1.0, 4) * np.array([1.5, 4.0, 1.5, 4.0])
            jac = ad.jacobian(
                lambda xs: model.f(xs, (), (0.0,) * 4, 0.0, theta), x)
            fd = fd_jacobian(
                lambda v: np.array(model.f(list(v), (), (0.0,) * 4, 0.0, theta)),
                x, h=1e-6)
            scale = max(1.0, float(np.max(np.abs(fd))))
            assert np.max(np.abs(jac - fd)) / scale < 1e-5

    def test_origin_jacobian_vs_finite_differences(self):
        model = double_pendulum(damping=0.0)
        theta = (0.6, 0.9, 4.0 / 7.0)
        jac = ad.jacobian(lambda xs: model.f(xs, (), (0.0,) * 4, 0.0, theta),
                          np.zeros(4))
        fd = fd_jacobian(lambda v: np.array(model.f(list(v), (), (0.0,) * 4, 0.0, theta)),
                         np.zeros(4), h=1e-6)
        assert np.max(np.abs(jac - fd)) / max(1.0, np.max(np.abs(fd))) < 1e-5

    def test_invalid_params_rejected(self):
        with pytest.raises(ConfigError):
            DoublePendulumParams(l1=0.0, l2=1.0, M=0.5)
        with pytest.raises(ConfigError):
            DoublePendulumParams(l1=1.0, l2=1.0, M=1.0)


class TestSimulate:
    def test_zero_dynamics_constant_trajectory(self):
        from kbident.model import fixed_scalar_linear
        model = fixed_scalar_linear(a=0.0)
        times, states = simulate(model, (), [0.0], 1.0, 0.01)
        assert np.array_equal(states, np.zeros((101, 1)))
        assert times[0] == 0.0 and times[-1] == pytest.approx(1.0)

    def test_undamped_energy_conserved(self):
        model = double_pendulum(damping=0.0)
        x0 = [0.5, 0.0, -0.35, 0.0]
        _, states = simulate(model, SHOWCASE.theta, x0, 3.0, 1e-4)
        e = pendulum_energy(states, SHOWCASE)
        drift = np.max(np.abs(e - e[0])) / abs(e[0])
        assert drift < 1e-6

    def test_damped_energy_monotone(self):
        model = double_pendulum(damping=0.05)
        params = DoublePendulumParams(l1=0.6, l2=0.9, M=4.0 / 7.0, damping=0.05)
        _, states = simulate(model, params.theta, [0.5, 0.0, -0.35, 0.0], 3.0, 1e-3)
        e = pendulum_energy(states, params)
        assert np.all(np.diff(e) <= 1e-12)

    def test_fourth_order_convergence_witness(self):
        # halving dt shrinks the 3 s energy drift by at least 8x
        model = double_pendulum(damping=0.0)
        x0 = [0.6, 0.0, -0.4, 0.0]

        def drift(dt):
            _, states = simulate(model, SHOWCASE.theta, x0, 3.0, dt)
            e = pendulum_energy(states, SHOWCASE)
            return np.max(np.abs(e - e[0]))

        d1, d2 = drift(4e-3), drift(2e-3)
        assert d1 / d2 >= 8.0

    def test_divergence_reports_step(self):
        from kbident.model import fixed_scalar_linear
        model = fixed_scalar_linear(a=50.0)
        with pytest.raises(NumericalError) as err:
            with np.errstate(over="ignore"):
                simulate(model, (), [1.0], 100.0, 0.1)
        assert "step" in str(err.value)

    def test_arguments_validated(self):
        model = double_pendulum()
        with pytest.raises(ConfigError):
            simulate(model, SHOWCASE.theta, [0, 0, 0, 0], 1.0, -0.1)
        with pytest.raises(ConfigError):
            simulate(model, SHOWCASE.theta, [0, 0, 0, 0], 0.001, 0.01)


class TestMeasure:
    def _trajectory(self, freq=100.0, duration=2.0):
        model = double_pendulum(damping=0.05)
        dt, steps = aligned_sim_dt(freq, 1e-3)
        traj = simulate(model, SHOWCASE.theta, [0.4, 0.0, -0.3, 0.0], duration, dt)
        n = int(round(duration * freq))
        t_s = np.arange(1, n + 1) * (dt * steps)
        return model, traj, t_s

    def test_zero_noise_equals_truth(self):
        model, traj, t_s = self._trajectory()
        noise = NoiseSpec(Q=np.zeros((4, 4)), R=np.zeros((4, 4)), seed=0)
        series = measure(traj, model, noise, t_s)
        idx = np.rint(t_s / (traj[0][1] - traj[0][0])).astype(int)
        assert np.array_equal(series.samples, traj[1][idx])

    def test_sample_variance_matches_r(self):
        # constant trajectory + R = 0.25 I: per-channel variance in [0.24, 0.26]
        from kbident.model import fixed_scalar_linear, StateSpaceModel
        model = double_pendulum(damping=0.0)
        times = np.arange(100_001) * 1e-3
        states = np.zeros((100_001, 4))
        noise = NoiseSpec(Q=np.zeros((4, 4)), R=0.25 * np.eye(4), seed=99)
        series = measure((times, states), model, noise, times[1:])
        var = series.samples.var(axis=0)
        assert np.all(var > 0.24) and np.all(var < 0.26)

    def test_seed_determinism(self):
        model, traj, t_s = self._trajectory()
        noise = NoiseSpec(Q=np.zeros((4, 4)), R=0.25 * np.eye(4), seed=123)
        s1 = measure(traj, model, noise, t_s)
        s2 = measure(traj, model, noise, t_s)
        assert np.array_equal(s1.samples, s2.samples)

    def test_misaligned_grid_refused(self):
        model, traj, _ = self._trajectory()
        with pytest.raises(ConfigError):
            measure(traj, model, NoiseSpec(Q=np.zeros((4, 4)), R=np.eye(4)),
                    np.array([0.0105]))


class TestSeriesInvariants:
    def test_strictly_increasing_required(self):
        with pytest.raises(ConfigError):
            MeasurementSeries(np.array([0.0, 0.1, 0.1]), np.zeros((3, 2)))

    def test_finite_required(self):
        with pytest.raises(ConfigError):
            MeasurementSeries(np.array([0.0, 0.1]), np.array([[1.0], [np.nan]]))


class TestCsvRoundTrip:
    def _series(self, n=200, q=4, freq=1000.0):
        times = np.arange(1, n + 1) / freq
        samples = rng.standard_normal((n, q))
        return MeasurementSeries(times, samples,
                                 truth_theta=np.array([0.6, 0.9, 0.57]),
                                 truth_x0=np.array([0.1, 0.0, -0.2, 0.0]),
                                 noise=NoiseSpec(Q=np.eye(4) * 1e-2,
                                                 R=np.eye(4) * 0.25, seed=5))

    def test_round_trip_bitwise(self, tmp_path):
        series = self._series()
        path = tmp_path / "m.csv"
        save_measurements(series, path)
        loaded = load_measurements(path)
        assert np.array_equal(loaded.times, series.times)
        assert np.array_equal(loaded.samples, series.samples)
        assert np.array_equal(loaded.truth_theta, series.truth_theta)
        assert np.array_equal(loaded.truth_x0, series.truth_x0)

    def test_header_columns(self, tmp_path):
        path = tmp_path / "m.csv"
        save_measurements(self._series(q=4), path)
        header = path.read_text().splitlines()[0]
        assert header == "t,y1,y2,y3,y4"

    def test_decreasing_timestamps_flagged_with_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,y1\n0.1,1.0\n0.05,2.0\n")
        with pytest.raises(ConfigError) as err:
            load_measurements(path)
        assert "line 3" in str(err.value)

    def test_ragged_row_flagged(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,y1,y2\n0.1,1.0,2.0\n0.2,1.0\n")
        with pytest.raises(ConfigError) as err:
            load_measurements(path)
        assert "line 3" in str(err.value)

    def test_non_numeric_cell_flagged(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("t,y1\n0.1,1.0\n0.2,oops\n")
        with pytest.raises(ConfigError) as err:
            load_measurements(path)
        assert "line 3" in str(err.value)

    def test_khz_file_frequency_inferred(self, tmp_path):
        series = self._series(n=3000, freq=1000.0)
        path = tmp_path / "m.csv"
        # drop the sidecar to force inference from timestamps
        save_measurements(MeasurementSeries(series.times, series.samples), path)
        loaded = load_measurements(path)
        assert len(loaded) == 3000
        assert loaded.frequency_hz == pytest.approx(1000.0, rel=1e-9)


class TestAlignedDt:
    def test_divides_sample_period(self):
        for freq in (3.0, 10.0, 30.0, 100.0, 300.0, 1000.0):
            dt, steps = aligned_sim_dt(freq, 1e-4)
            assert dt <= 1e-4 + 1e-15
            assert steps * dt == pytest.approx(1.0 / freq, rel=1e-15)
