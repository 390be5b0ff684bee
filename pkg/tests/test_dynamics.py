import numpy as np
import pytest

from qtransfer.dynamics import (
    fluid_transition,
    holding_cost_linear_vec,
    holding_cost_period,
    holding_cost_quadrature,
    non_idleness_index,
)
from qtransfer.model import DomainError, LinearHolding, NetworkModel, PiecewiseAffineHolding
from qtransfer.rates import PiecewiseConstantRate


def euler_transition(y, model, period, t, steps=200000):
    """Independent oracle: fine-step forward Euler on the fluid ODE."""
    a, _ = model.period_window(period)
    x = np.asarray(y, dtype=float).copy()
    dt = t / steps
    for k in range(steps):
        s = a + k * dt
        for i in range(model.n_queues):
            rate = model.lam[i].value(s) - (model.effective_mu[i] if x[i] > 0 else 0.0)
            x[i] = max(x[i] + rate * dt, 0.0)
    return x


def single_queue(lam, mu=1.0, tau=1.0, horizon=1, servers=1):
    return NetworkModel([lam], [mu], tau, horizon, [servers])


class TestFluidTransition:
    def test_drain_matches_euler(self):
        model = single_queue(0.5)
        got = fluid_transition([2.0], model, 0, 1.0)
        assert got[0] == pytest.approx(1.5, abs=1e-12)
        oracle = euler_transition([2.0], model, 0, 1.0)
        assert got[0] == pytest.approx(oracle[0], abs=1e-4)

    def test_empties_and_stays_empty(self):
        model = single_queue(0.5)
        got = fluid_transition([0.3], model, 0, 1.0)
        assert got[0] == pytest.approx(0.0, abs=1e-12)
        oracle = euler_transition([0.3], model, 0, 1.0)
        assert got[0] == pytest.approx(oracle[0], abs=1e-4)

    def test_zero_elapsed_time_is_identity(self):
        model = single_queue(0.9, tau=5.0)
        y = np.array([1.7])
        assert fluid_transition(y, model, 0, 0.0)[0] == y[0]

    def test_refill_after_emptying(self):
        # rate jumps above service mid-period, so the queue restarts from zero
        rate = PiecewiseConstantRate([0.0, 1.0], [0.0, 2.0])
        model = single_queue(rate, mu=1.0, tau=2.0)
        got = fluid_transition([0.5], model, 0, 2.0)
        assert got[0] == pytest.approx(1.0, abs=1e-12)
        oracle = euler_transition([0.5], model, 0, 2.0)
        assert got[0] == pytest.approx(oracle[0], abs=1e-4)

    def test_negative_input_rejected(self):
        model = single_queue(0.5)
        with pytest.raises(DomainError):
            fluid_transition([-0.1], model, 0, 1.0)

    def test_servers_scale_the_drain(self):
        model = single_queue(0.5, mu=1.0, servers=3)
        got = fluid_transition([4.0], model, 0, 1.0)
        assert got[0] == pytest.approx(4.0 + 0.5 - 3.0, abs=1e-12)

    def test_monotone_and_convex_in_state(self):
        rng = np.random.default_rng(7)
        configs = [
            single_queue(0.5, tau=2.0),
            single_queue(PiecewiseConstantRate([0.0, 0.7, 1.3], [1.4, 0.2, 0.9]), tau=2.0),
            NetworkModel(
                [PiecewiseConstantRate([0.0, 1.0], [0.3, 1.6]), 0.8],
                [1.0, 1.2],
                2.0,
                1,
            ),
        ]
        for model in configs:
            for _ in range(200):
                y1 = rng.uniform(0, 4, model.n_queues)
                y2 = rng.uniform(0, 4, model.n_queues)
                alpha = rng.uniform()
                t = rng.uniform(0, model.tau)
                fa = fluid_transition(alpha * y1 + (1 - alpha) * y2, model, 0, t)
                fb = alpha * fluid_transition(y1, model, 0, t) + (1 - alpha) * fluid_transition(
                    y2, model, 0, t
                )
                assert np.all(fa <= fb + 1e-9)
                lo = np.minimum(y1, y2)
                assert np.all(
                    fluid_transition(lo, model, 0, t) <= fluid_transition(np.maximum(y1, y2), model, 0, t) + 1e-12
                )


class TestHoldingCost:
    def test_boundary_case_quadratic(self):
        # y equals tau*(mu - lambda): the queue empties exactly at the period end
        model = single_queue(0.7, tau=5.0)
        holding = [LinearHolding(1.0)]
        got = holding_cost_period([1.5], model, holding, 0)
        # frozen from the quadrature oracle; equals h*y^2 / (2(mu-lambda))
        assert got == pytest.approx(3.75, abs=1e-9)
        assert got == pytest.approx(holding_cost_quadrature([1.5], model, holding, 0), abs=1e-7)

    def test_busy_whole_period(self):
        model = single_queue(0.7, tau=5.0)
        holding = [LinearHolding(1.0)]
        got = holding_cost_period([3.0], model, holding, 0)
        # h*(y*tau + (lambda-mu)*tau^2/2)
        assert got == pytest.approx(11.25, abs=1e-9)
        assert got == pytest.approx(holding_cost_quadrature([3.0], model, holding, 0), abs=1e-7)

    def test_empty_queue_no_arrivals(self):
        model = single_queue(0.0, tau=5.0)
        assert holding_cost_period([0.0], model, [LinearHolding(4.0)], 0) == 0.0

    def test_closed_form_equals_quadrature_on_grid(self):
        rate = PiecewiseConstantRate([0.0, 2.0], [0.4, 1.1])
        model = single_queue(rate, mu=1.0, tau=5.0)
        holding = [LinearHolding(2.5)]
        for y in np.linspace(0.0, 6.0, 100):
            exact = holding_cost_period([y], model, holding, 0)
            quad = holding_cost_quadrature([y], model, holding, 0)
            assert abs(exact - quad) <= 1e-7

    def test_piecewise_affine_matches_quadrature(self):
        model = single_queue(0.6, tau=4.0)
        spec = PiecewiseAffineHolding([(0.0, 0.0), (2.0, -3.0)])
        for y in [0.0, 0.8, 1.9, 3.5, 6.0]:
            got = holding_cost_period([y], model, [spec], 0)
            quad = holding_cost_quadrature([y], model, [spec], 0)
            assert got == pytest.approx(quad, abs=1e-6)

    def test_convex_monotone_in_state(self):
        rng = np.random.default_rng(11)
        rate = PiecewiseConstantRate([0.0, 1.5], [0.9, 0.3])
        model = single_queue(rate, tau=3.0)
        holding = [LinearHolding(1.3)]
        for _ in range(200):
            a, b = sorted(rng.uniform(0, 5, 2))
            mid = holding_cost_period([(a + b) / 2], model, holding, 0)
            ends = holding_cost_period([a], model, holding, 0) + holding_cost_period([b], model, holding, 0)
            assert mid <= ends / 2 + 1e-8
            assert holding_cost_period([a], model, holding, 0) <= holding_cost_period([b], model, holding, 0) + 1e-8

    def test_vectorized_matches_scalar(self):
        rate = PiecewiseConstantRate([0.0, 1.0], [0.2, 1.4])
        model = single_queue(rate, tau=2.5)
        ys = np.linspace(0, 4, 17)
        vec = holding_cost_linear_vec(ys, model, 0, 0, 1.0)
        for y, v in zip(ys, vec):
            assert v == pytest.approx(holding_cost_period([y], model, [LinearHolding(1.0)], 0), abs=1e-12)


class TestNonIdlenessIndex:
    def test_paper_value(self):
        model = single_queue(0.7, tau=5.0)
        assert non_idleness_index(model, [0.7])[0] == pytest.approx(1.5)

    def test_overloaded_queue_is_zero(self):
        model = single_queue(1.2, tau=5.0)
        assert non_idleness_index(model, [1.2])[0] == 0.0

    def test_direct_arithmetic(self):
        model = single_queue(0.9, tau=5.0)
        assert non_idleness_index(model, [0.9])[0] == pytest.approx(0.5)
