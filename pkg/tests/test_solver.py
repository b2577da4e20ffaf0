import math

import numpy as np
import pytest

from analog_dam.core import ActivationResult, DenseAMModel, SystemState
from analog_dam.solver import (
    NonConvergenceError,
    SimulationError,
    SolverConfig,
    measure_convergence_time,
    power_bound,
    power_weights,
    simulate,
)
from analog_dam.tasks import XorSpec, build_xor

from conftest import random_model


def _decay_model(tau_v=1.0, tau_h=0.5, n=3):
    return DenseAMModel(xi=np.zeros((2, n)), a=np.zeros(n), b=np.zeros(2), tau_v=tau_v, tau_h=tau_h)


class TestSolverConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            SolverConfig(method="midpoint")
        with pytest.raises(ValueError):
            SolverConfig(dt=0.0)
        with pytest.raises(ValueError):
            SolverConfig(record_stride=0)

    def test_stability_guard(self):
        m = _decay_model(tau_v=1.0, tau_h=0.1)
        with pytest.raises(ValueError):
            simulate(m, SystemState.zeros(m), SolverConfig(dt=0.02))

    def test_defaults_for_model(self):
        cfg = SolverConfig.for_model(_decay_model(tau_v=2.0, tau_h=0.1))
        assert cfg.dt == pytest.approx(1e-3)
        assert cfg.t_max == pytest.approx(100.0)


class TestSimulate:
    @pytest.mark.parametrize("method,tol", [("rk4", 1e-9), ("euler", 1e-2)])
    def test_exponential_decay(self, method, tol):
        m = _decay_model()
        v0 = np.array([1.0, -2.0, 0.5])
        cfg = SolverConfig(method=method, dt=0.01, t_max=2.0, conv_eps=0.0, record_stride=1)
        traj = simulate(m, SystemState(v0, np.zeros(2)), cfg)
        expected = v0[None, :] * np.exp(-traj.times[:, None] / m.tau_v)
        np.testing.assert_allclose(traj.v_series, expected, rtol=tol, atol=tol)

    def test_rk4_error_is_fourth_order(self):
        m = _decay_model()
        v0 = np.ones(3)
        errs = []
        for dt in (0.02, 0.01):
            traj = simulate(m, SystemState(v0, np.zeros(2)), SolverConfig(method="rk4", dt=dt, t_max=1.0, conv_eps=0.0))
            errs.append(abs(traj.final_state.v[0] - math.exp(-1.0)))
        assert 12 < errs[0] / errs[1] < 20

    def test_euler_and_rk4_agree_to_first_order(self, rng):
        m = random_model(rng, 4, 3, beta=1.0, tau_h=0.2)
        init = SystemState(rng.normal(size=3), np.zeros(4))
        ref = simulate(m, init, SolverConfig(method="rk4", dt=1e-3, t_max=1.0, conv_eps=0.0)).final_state.v
        err = []
        for dt in (2e-3, 1e-3):
            v = simulate(m, init, SolverConfig(method="euler", dt=dt, t_max=1.0, conv_eps=0.0)).final_state.v
            err.append(np.max(np.abs(v - ref)))
        assert 1.6 < err[0] / err[1] < 2.4

    def test_series_shapes_and_times(self, rng):
        m = random_model(rng, 4, 3, tau_h=0.2)
        traj = simulate(m, SystemState(rng.normal(size=3), np.zeros(4)), SolverConfig(dt=1e-3, t_max=0.5, record_stride=7))
        n = len(traj.times)
        assert traj.v_series.shape == (n, 3) and traj.h_series.shape == (n, 4)
        assert traj.energy_series.shape == (n,) and traj.power_series.shape == (n,)
        assert np.all(np.diff(traj.times) > 0)

    def test_clamped_entries_never_move(self, rng):
        m = random_model(rng, 4, 3, tau_h=0.2)
        v0 = rng.normal(size=3)
        traj = simulate(m, SystemState(v0, np.zeros(4), clamp_mask=[True, False, True]), SolverConfig(dt=1e-3, t_max=2.0))
        assert np.max(np.abs(traj.v_series[:, [0, 2]] - v0[[0, 2]])) == 0.0

    @pytest.mark.parametrize("tau_h", [0.0, 0.1])
    def test_energy_non_increasing(self, rng, tau_h):
        for _ in range(5):
            m = random_model(rng, 6, 4, beta=3.0, tau_h=tau_h, distance=True)
            cfg = SolverConfig.for_model(m, t_max=5.0, record_stride=1)
            e = simulate(m, SystemState(rng.normal(size=4), np.zeros(6)), cfg).energy_series
            assert np.all(np.diff(e) <= 1e-9 * np.abs(e[:-1]))

    def test_xor_converges_to_one(self):
        m = build_xor(XorSpec())
        traj = simulate(m, SystemState([1, 0, 0.5], np.zeros(4), clamp_mask=[True, True, False]), SolverConfig.for_model(m))
        assert traj.converged
        assert abs(traj.final_state.v[2] - 1.0) < 0.05

    def test_convergence_criterion_holds_at_stop(self, rng):
        m = random_model(rng, 5, 3, beta=1.0, tau_h=0.1)
        cfg = SolverConfig.for_model(m, conv_eps=1e-6, record_stride=1)
        traj = simulate(m, SystemState(rng.normal(size=3), np.zeros(5)), cfg)
        assert traj.converged
        from analog_dam.core import rhs_full
        dv, dh = rhs_full(m, traj.final_state)
        assert np.max(np.abs(m.tau_v * dv)) <= 1e-6 and np.max(np.abs(m.tau_h * dh)) <= 1e-6

    def test_non_finite_state_reports_step(self):
        m = DenseAMModel(xi=np.array([[3.0]]), a=[0.0], b=[0.0], tau_v=1.0, tau_h=1.0,
                         hidden_activation="relu")
        with pytest.raises(SimulationError) as err:
            simulate(m, SystemState([1.0], [1.0]), SolverConfig(dt=0.05, t_max=1e4))
        assert err.value.step is not None

    def test_trajectory_csv(self, rng, tmp_path):
        m = random_model(rng, 2, 2, tau_h=0.2)
        traj = simulate(m, SystemState(rng.normal(size=2), np.zeros(2)), SolverConfig(dt=1e-3, t_max=0.05))
        text = traj.to_csv(tmp_path / "t.csv")
        lines = text.splitlines()
        assert lines[0] == "t,v_0,v_1,h_0,h_1,energy,power"
        assert len(lines) == len(traj.times) + 1
        assert (tmp_path / "t.csv").read_text() == text


class TestPower:
    def test_zero_when_voltages_match(self):
        m = DenseAMModel(xi=np.diag([1.0, 2.0, 3.0]), a=np.zeros(3), b=np.zeros(3))
        g = np.array([0.1, 0.2, 0.7])
        assert power_weights(m, ActivationResult(g=g, f=g), kappa=1.0) == pytest.approx(0.0, abs=1e-15)

    def test_single_resistor(self):
        m = DenseAMModel(xi=np.array([[2.0]]), a=[0.0], b=[0.0])
        assert power_weights(m, ActivationResult(g=np.array([1.0]), f=np.array([0.0])), kappa=1.0) == 2.0
        assert power_weights(m, ActivationResult(g=np.array([1.0]), f=np.array([0.0])), kappa=3.0) == 18.0

    def test_matches_direct_sum(self, rng):
        xi = rng.uniform(size=(4, 3))
        m = DenseAMModel(xi=xi, a=np.zeros(3), b=np.zeros(4))
        g, f = rng.normal(size=3), rng.uniform(size=4)
        direct = sum(xi[mu, i] * (g[i] - f[mu]) ** 2 for mu in range(4) for i in range(3))
        assert power_weights(m, ActivationResult(g, f), 1.0) == pytest.approx(direct, rel=1e-12)

    def test_bounded_along_trajectories(self, rng):
        for _ in range(10):
            xi = rng.uniform(size=(6, 5))
            m = DenseAMModel(xi=xi, a=np.zeros(5), b=-0.5 * np.sum(xi**2, axis=1), tau_h=0.1, beta=2.0,
                             hardware_realizable=True)
            traj = simulate(m, SystemState(rng.uniform(size=5), np.zeros(6)), SolverConfig.for_model(m, t_max=5.0))
            assert np.all(traj.power_series <= power_bound(m))

    def test_kappa_must_be_positive(self):
        m = DenseAMModel(xi=np.array([[1.0]]), a=[0.0], b=[0.0])
        with pytest.raises(ValueError):
            power_weights(m, ActivationResult(np.ones(1), np.ones(1)), kappa=0.0)


class TestConvergenceTime:
    def test_already_converged(self):
        m = build_xor(XorSpec(beta=200.0, tau_h=0.0))
        init = SystemState(m.xi[2].copy(), np.zeros(4))
        assert measure_convergence_time(m, init, SolverConfig.for_model(m)) == 0.0

    def test_low_beta_bound(self, rng):
        for _ in range(10):
            xi = rng.uniform(size=(5, 4))
            xi /= np.linalg.norm(xi, axis=1, keepdims=True)
            beta = 0.5
            alpha = 1.0 - beta * np.max(np.sum(xi**2, axis=1))
            m = DenseAMModel(xi=xi, a=np.zeros(4), b=-0.5 * np.ones(5), tau_v=1.0, tau_h=0.0, beta=beta)
            eps = 1e-3
            t = measure_convergence_time(m, SystemState(rng.uniform(size=4), np.zeros(5)),
                                         SolverConfig.for_model(m, conv_eps=1e-10), eps)
            assert t <= m.tau_v / (2 * alpha) * math.log(1 / eps)

    def test_no_convergence_raises(self, rng):
        m = random_model(rng, 3, 2, tau_h=0.0)
        with pytest.raises(NonConvergenceError):
            measure_convergence_time(m, SystemState(5 * np.ones(2), np.zeros(3)), SolverConfig(dt=0.01, t_max=0.1))
