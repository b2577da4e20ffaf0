import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from analog_dam.core import (
    DenseAMModel,
    DimensionError,
    SystemState,
    activations,
    energy_effective,
    energy_global,
    rhs_effective,
    rhs_full,
    softmax,
    steady_hidden,
)
from analog_dam.tasks import XorSpec, build_xor

from conftest import central_grad, random_model


def _zero_model(n_h=4, n_v=3, **kw):
    return DenseAMModel(xi=np.zeros((n_h, n_v)), a=np.zeros(n_v), b=np.zeros(n_h), **kw)


class TestModelValidation:
    def test_rejects_bad_shapes(self):
        with pytest.raises(DimensionError):
            DenseAMModel(xi=np.ones((2, 3)), a=np.zeros(2), b=np.zeros(2))
        with pytest.raises(DimensionError):
            DenseAMModel(xi=np.ones((2, 3)), a=np.zeros(3), b=np.zeros(3))

    def test_rejects_non_finite_weights(self):
        xi = np.ones((2, 2))
        xi[0, 0] = np.nan
        with pytest.raises(ValueError):
            DenseAMModel(xi=xi, a=np.zeros(2), b=np.zeros(2))

    def test_hardware_models_need_non_negative_weights(self):
        with pytest.raises(ValueError):
            DenseAMModel(xi=-np.ones((2, 2)), a=np.zeros(2), b=np.zeros(2), hardware_realizable=True)

    @pytest.mark.parametrize("kw", [dict(tau_v=0.0), dict(tau_h=-1.0), dict(beta=0.0)])
    def test_rejects_bad_constants(self, kw):
        with pytest.raises(ValueError):
            _zero_model(**kw)

    def test_clamp_mask_length(self):
        with pytest.raises(DimensionError):
            SystemState(v=np.zeros(3), h=np.zeros(4), clamp_mask=[True, False])


class TestActivations:
    def test_uniform_softmax_at_zero(self):
        m = _zero_model(beta=1.0)
        act = activations(m, SystemState.zeros(m))
        np.testing.assert_allclose(act.f, 0.25)
        np.testing.assert_array_equal(act.g, np.zeros(3))

    def test_analytic_softmax(self):
        m = _zero_model(n_h=2, n_v=1, beta=1.0)
        act = activations(m, SystemState(v=[0.0], h=[math.log(3), 0.0]))
        np.testing.assert_allclose(act.f, [0.75, 0.25], rtol=1e-14)

    def test_softmax_stable_for_large_arguments(self):
        f = softmax(np.array([1e4, 1e4 - 1.0, -1e4]), beta=50.0)
        assert np.all(np.isfinite(f))
        np.testing.assert_allclose(f.sum(), 1.0, atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=20), st.floats(0.01, 100))
    def test_softmax_normalized(self, h, beta):
        f = softmax(np.array(h), beta=beta)
        assert np.all(f >= 0) and np.all(f <= 1)
        assert abs(f.sum() - 1.0) <= 1e-12

    def test_xor_fixed_point_selects_memory_three(self):
        m = build_xor(XorSpec(beta=4.0))
        v = np.array([1.0, 0.0, 1.0])
        act = activations(m, SystemState(v=v, h=steady_hidden(m, v)))
        assert act.f[2] > 0.9
        assert np.all(np.delete(act.f, 2) < 0.1)

    def test_relu_visible(self):
        m = _zero_model(visible_activation="relu")
        act = activations(m, SystemState(v=[-1.0, 0.0, 2.0], h=np.zeros(4)))
        np.testing.assert_array_equal(act.g, [0.0, 0.0, 2.0])

    def test_non_finite_input_rejected(self):
        m = _zero_model()
        with pytest.raises(ValueError):
            SystemState(v=[np.inf, 0, 0], h=np.zeros(4))
        with pytest.raises(DimensionError):
            activations(m, SystemState(v=np.zeros(2), h=np.zeros(4)))


class TestRhsFull:
    def test_pure_decay(self, rng):
        m = _zero_model(tau_v=2.0, tau_h=0.5)
        v, h = rng.normal(size=3), rng.normal(size=4)
        dv, dh = rhs_full(m, SystemState(v, h))
        np.testing.assert_allclose(dv, -v / 2.0)
        np.testing.assert_allclose(dh, -h / 0.5)

    def test_zero_at_fixed_point(self):
        m = build_xor(XorSpec(beta=8.0))
        v = np.array([1.0, 0.0, 0.5])
        for _ in range(20000):
            h = steady_hidden(m, v)
            f = activations(m, SystemState(v, h)).f
            v = m.xi.T @ f + m.a
        dv, dh = rhs_full(m, SystemState(v, steady_hidden(m, v)))
        assert np.max(np.abs(dv)) < 1e-10 and np.max(np.abs(dh)) < 1e-10

    def test_clamped_entries_have_zero_derivative(self, rng):
        m = random_model(rng, 5, 3)
        dv, _ = rhs_full(m, SystemState(rng.normal(size=3), rng.normal(size=5), clamp_mask=[True, False, True]))
        assert dv[0] == 0.0 and dv[2] == 0.0

    def test_requires_positive_tau_h(self):
        m = _zero_model(tau_h=0.0)
        with pytest.raises(ValueError):
            rhs_full(m, SystemState.zeros(m))

    def test_visible_force_is_energy_gradient(self, rng):
        # with h at its steady value, dE/dv of the global energy reduces to the visible force
        for _ in range(10):
            m = random_model(rng, 5, 3, beta=1.5, tau_v=0.7)
            v = rng.normal(size=3)
            h = steady_hidden(m, v)
            f = activations(m, SystemState(v, h)).f

            def e_at_fixed_f(x):
                return 0.5 * x @ x - x @ m.a - f @ (m.xi @ x)

            dv, _ = rhs_full(m, SystemState(v, h))
            np.testing.assert_allclose(dv, -central_grad(e_at_fixed_f, v) / m.tau_v, rtol=1e-6, atol=1e-8)
            grad = central_grad(lambda x: energy_global(m, SystemState(x, h)), v)
            np.testing.assert_allclose(dv, -grad / m.tau_v, rtol=1e-5, atol=1e-7)


class TestRhsEffective:
    def test_memory_is_fixed_point_at_high_beta(self, rng):
        m = random_model(rng, 4, 3, beta=200.0, tau_h=0.0, distance=True)
        assert np.max(np.abs(rhs_effective(m, m.xi[1]))) < 1e-8

    def test_xor_output_flows_up(self):
        m = build_xor(XorSpec(beta=4.0, tau_h=0.0))
        dv = rhs_effective(m, np.array([1.0, 0.0, 0.5]), clamp_mask=np.array([True, True, False]))
        assert dv[2] > 0 and dv[0] == 0 and dv[1] == 0

    def test_wrong_activation_rejected(self):
        m = _zero_model(hidden_activation="relu")
        with pytest.raises(ValueError):
            rhs_effective(m, np.zeros(3))

    @pytest.mark.parametrize("distance", [True, False])
    def test_gradient_flow_small(self, rng, distance):
        m = random_model(rng, 4, 3, beta=2.0, tau_v=0.5, tau_h=0.0, distance=distance)
        v = rng.normal(size=3)
        grad = central_grad(lambda x: energy_effective(m, x), v)
        np.testing.assert_allclose(rhs_effective(m, v), -grad / m.tau_v, rtol=1e-6, atol=1e-9)

    def test_gradient_flow_over_random_instances(self, rng):
        worst = 0.0
        for k in range(120):
            n_h, n_v = rng.integers(1, 9), rng.integers(1, 7)
            m = random_model(rng, n_h, n_v, beta=float(rng.uniform(0.1, 5.0)),
                             tau_v=float(rng.uniform(0.1, 3.0)), tau_h=0.0, distance=bool(k % 2))
            v = rng.normal(size=n_v)
            dv = rhs_effective(m, v)
            ref = -central_grad(lambda x: energy_effective(m, x), v) / m.tau_v
            worst = max(worst, np.max(np.abs(dv - ref)) / max(np.max(np.abs(ref)), 1e-3))
        assert worst < 1e-5


class TestEnergy:
    def test_zero_model_energy(self):
        m = _zero_model(beta=2.0)
        assert energy_global(m, SystemState.zeros(m)) == pytest.approx(-math.log(4) / 2.0, rel=1e-14)

    def test_single_memory_is_quadratic(self, rng):
        m = random_model(rng, 1, 5, distance=True, tau_h=0.0)
        v = rng.normal(size=5)
        np.testing.assert_allclose(energy_effective(m, v), 0.5 * np.sum((m.xi[0] - v) ** 2), rtol=1e-12)

    def test_distance_and_general_forms_agree(self, rng):
        m = random_model(rng, 6, 4, beta=3.0, distance=True, tau_h=0.0)
        for _ in range(10):
            v = rng.normal(size=4)
            np.testing.assert_allclose(energy_effective(m, v, "distance"), energy_effective(m, v, "general"),
                                       rtol=1e-10, atol=1e-12)

    def test_distance_form_needs_distance_biases(self, rng):
        m = random_model(rng, 3, 2)
        with pytest.raises(ValueError):
            energy_effective(m, np.zeros(2), form="distance")

    def test_effective_is_global_at_steady_hidden(self, rng):
        m = random_model(rng, 6, 4, beta=0.8)
        for _ in range(10):
            v = rng.normal(size=4)
            e_glob = energy_global(m, SystemState(v, steady_hidden(m, v)))
            np.testing.assert_allclose(e_glob, energy_effective(m, v, "general"), rtol=1e-10)

    def test_large_beta_does_not_overflow(self, rng):
        m = random_model(rng, 4, 3, beta=500.0, distance=True, tau_h=0.0)
        assert np.isfinite(energy_effective(m, 10 * rng.normal(size=3)))

    def test_xor_landscape_minimum_near_one(self):
        m = build_xor(XorSpec(beta=4.0, tau_h=0.0))
        grid = np.linspace(0, 1, 201)
        e = [energy_effective(m, np.array([1.0, 0.0, x])) for x in grid]
        assert grid[int(np.argmin(e))] > 0.9

    def test_fixed_point_has_vanishing_effective_gradient(self):
        m = build_xor(XorSpec(beta=8.0, tau_h=0.0))
        v = np.array([0.0, 1.0, 0.3])
        for _ in range(20000):
            v = v + 0.5 * rhs_effective(m, v)
        h = steady_hidden(m, v)
        dv, dh = rhs_full(m.replace(tau_h=0.1), SystemState(v, h))
        assert max(np.max(np.abs(dv)), np.max(np.abs(dh))) < 1e-10
        grad = central_grad(lambda x: energy_effective(m, x), v, step=1e-5)
        assert np.max(np.abs(grad)) < 1e-8

    def test_euler_trajectory_energy_non_increasing(self, rng):
        for _ in range(5):
            m = random_model(rng, 5, 4, beta=2.0, tau_v=1.0, tau_h=0.1)
            v, h = rng.normal(size=4), rng.normal(size=5)
            dt = 0.1 / 100
            e_prev = energy_global(m, SystemState(v, h))
            for _ in range(3000):
                dv, dh = rhs_full(m, SystemState(v, h))
                v, h = v + dt * dv, h + dt * dh
                e = energy_global(m, SystemState(v, h))
                assert e <= e_prev + 1e-9 * abs(e_prev)
                e_prev = e
