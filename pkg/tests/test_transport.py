import itertools

import numpy as np
import pytest

from qtransfer.model import ConservationError, GeneralSetup, JointSetup, TransferCostSpec
from qtransfer.transport import (
    TransferCostOracle,
    total_transfer_cost,
    total_transfer_cost_matrix,
    variable_transfer_cost,
)


def brute_force_transport(z, r, unit=1):
    """Enumerate integer transport plans (in multiples of ``unit``)."""
    n = len(z)
    senders = [i for i in range(n) if z[i] < 0]
    receivers = [j for j in range(n) if z[j] > 0]
    arcs = [(i, j) for i in senders for j in receivers]
    supply = {i: -z[i] for i in senders}
    demand = {j: z[j] for j in receivers}
    best = None
    ranges = [range(0, int(min(supply[i], demand[j])) + 1, unit) for i, j in arcs]
    for combo in itertools.product(*ranges):
        u = np.zeros((n, n))
        for (i, j), q in zip(arcs, combo):
            u[i, j] = q
        if any(abs(u[i, :].sum() + z[i]) > 1e-9 for i in senders):
            continue
        if any(abs(u[:, j].sum() - z[j]) > 1e-9 for j in receivers):
            continue
        cost = float((r * u).sum())
        if best is None or cost < best:
            best = cost
    return best


class TestVariableCost:
    def test_two_queue_example(self):
        costs = TransferCostSpec.symmetric_pair(1.0)
        cost, u = variable_transfer_cost([-2.0, 2.0], costs)
        assert cost == pytest.approx(2.0)
        assert u[0, 1] == pytest.approx(2.0)
        assert brute_force_transport([-2, 2], costs.variable) == pytest.approx(2.0)

    def test_direct_beats_relay(self):
        r = np.array([[0.0, 2.0, 4.0], [2.0, 0.0, 3.0], [4.0, 3.0, 0.0]])
        costs = TransferCostSpec(r)
        cost, u = variable_transfer_cost([-1.0, 0.0, 1.0], costs)
        assert cost == pytest.approx(4.0)
        assert u[0, 2] == pytest.approx(1.0)
        assert brute_force_transport([-1, 0, 1], r) == pytest.approx(4.0)

    def test_zero_vector(self):
        costs = TransferCostSpec.symmetric_pair(1.0)
        cost, u = variable_transfer_cost([0.0, 0.0], costs)
        assert cost == 0.0
        assert not u.any()

    def test_nonzero_sum_rejected(self):
        costs = TransferCostSpec.symmetric_pair(1.0)
        with pytest.raises(ConservationError):
            variable_transfer_cost([1.0, 1.0], costs)

    def test_matches_brute_force_random(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            n = rng.integers(2, 5)
            base = rng.integers(1, 6, size=(n, n)).astype(float)
            r = np.minimum(base, base.T)
            # enforce the triangle inequality by metric closure
            for l in range(n):
                r = np.minimum(r, r[:, [l]] + r[[l], :])
            np.fill_diagonal(r, 0.0)
            costs = TransferCostSpec(r)
            z = np.zeros(n)
            k = rng.integers(1, 4)
            for _ in range(k):
                i, j = rng.choice(n, 2, replace=False)
                q = rng.integers(1, 3)
                z[i] -= q
                z[j] += q
            cost, u = variable_transfer_cost(z, costs)
            expected = brute_force_transport(z, r)
            assert cost == pytest.approx(expected, abs=1e-9)
            net = u.sum(axis=0) - u.sum(axis=1)
            assert np.allclose(net, z, atol=1e-9)

    def test_efficiency_no_queue_sends_and_receives(self):
        rng = np.random.default_rng(5)
        r = np.array(
            [[0.0, 1.0, 2.0, 2.5], [1.0, 0.0, 1.5, 2.0], [2.0, 1.5, 0.0, 1.0], [2.5, 2.0, 1.0, 0.0]]
        )
        costs = TransferCostSpec(r)
        for _ in range(50):
            z = rng.integers(-3, 4, size=4).astype(float)
            z[-1] -= z.sum()
            _, u = variable_transfer_cost(z, costs)
            for i, j, l in itertools.product(range(4), repeat=3):
                assert u[i, j] * u[j, l] == 0.0

    def test_homogeneity_subadditivity_convexity(self):
        rng = np.random.default_rng(9)
        r = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.5], [2.0, 1.5, 0.0]])
        costs = TransferCostSpec(r)

        def R(z):
            return variable_transfer_cost(z, costs)[0]

        for _ in range(100):
            z1 = rng.normal(size=3)
            z1 -= z1.mean()
            z2 = rng.normal(size=3)
            z2 -= z2.mean()
            t = rng.uniform(0, 3)
            th = rng.uniform()
            assert R(t * z1) == pytest.approx(t * R(z1), abs=1e-9)
            assert R(z1 + z2) <= R(z1) + R(z2) + 1e-9
            assert R(th * z1 + (1 - th) * z2) <= th * R(z1) + (1 - th) * R(z2) + 1e-9


class TestTotalCost:
    def test_joint_setup_decomposition(self):
        costs = TransferCostSpec.symmetric_pair(1.0, JointSetup(5.0))
        assert total_transfer_cost([-2.0, 2.0], costs) == pytest.approx(7.0)

    def test_zero_transfer_no_setup(self):
        costs = TransferCostSpec.symmetric_pair(1.0, JointSetup(5.0))
        assert total_transfer_cost([0.0, 0.0], costs) == 0.0

    def test_general_single_arc(self):
        setup = GeneralSetup(0.0, np.array([[0.0, 1.0], [1.0, 0.0]]))
        costs = TransferCostSpec.symmetric_pair(1.0, setup)
        assert total_transfer_cost([-1.0, 1.0], costs) == pytest.approx(2.0)

    def test_general_relay_beats_direct(self):
        r = np.array([[0.0, 1.0, 2.0], [1.0, 0.0, 1.0], [2.0, 1.0, 0.0]])
        arc = np.array([[0.0, 0.1, 10.0], [0.1, 0.0, 0.1], [10.0, 0.1, 0.0]])
        costs = TransferCostSpec(r, GeneralSetup(0.0, arc))
        cost, u = total_transfer_cost_matrix([-1.0, 0.0, 1.0], costs)
        assert cost == pytest.approx(1.0 + 1.0 + 0.2)
        assert u[0, 1] == pytest.approx(1.0)
        assert u[1, 2] == pytest.approx(1.0)

    def test_joint_setup_properties(self):
        kappa = JointSetup(5.0)
        rng = np.random.default_rng(13)
        for _ in range(50):
            x = rng.integers(-2, 3, size=3).astype(float)
            y = rng.integers(-2, 3, size=3).astype(float)
            kx = kappa.cost if np.any(x != 0) else 0.0
            ky = kappa.cost if np.any(y != 0) else 0.0
            kxy = kappa.cost if np.any(x + y != 0) else 0.0
            assert kxy <= kx + ky
            assert (kappa.cost if np.any(-x != 0) else 0.0) == kx
            c = rng.uniform(0.5, 3.0)
            assert (kappa.cost if np.any(c * x != 0) else 0.0) == kx

    def test_oracle_caches(self):
        costs = TransferCostSpec.symmetric_pair(1.0, JointSetup(2.0))
        oracle = TransferCostOracle(costs)
        assert oracle([-1.0, 1.0]) == pytest.approx(3.0)
        assert oracle([-1.0, 1.0]) == pytest.approx(3.0)
        assert len(oracle._cache) == 1


class TestSpecValidation:
    def test_triangle_violation_rejected(self):
        r = np.array([[0.0, 1.0, 5.0], [1.0, 0.0, 1.0], [5.0, 1.0, 0.0]])
        with pytest.raises(ValueError):
            TransferCostSpec(r)
