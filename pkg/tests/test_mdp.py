import numpy as np
import pytest

from qtransfer.mdp import (
    MdpInstance,
    evaluate_discrete_policy,
    exact_discrete_dp,
    mdp_policy_fn,
    no_transfer_fn,
    no_transfer_sets_contiguous,
    queue_period_kernel,
    simulate_cost_to_empty,
    solve_mdp,
)
from qtransfer.model import JointSetup, LinearHolding, NetworkModel, TransferCostSpec, UnsupportedScaleError


def small_instance(K=1.0, n_bar=20):
    return MdpInstance(0.5, 0.6, 1.0, 1.0, 1.0, 1.3, 1.0, K, n_bar)


def mc_no_transfer_cost(inst, x0, paths, seed):
    """Independent Monte Carlo cost-to-empty under no transfers."""
    rng = np.random.default_rng(seed)
    Lam = inst.uniform_rate
    x1 = np.full(paths, x0[0], dtype=int)
    x2 = np.full(paths, x0[1], dtype=int)
    cost = np.zeros(paths)
    alive = (x1 + x2) > 0
    while alive.any():
        dt = rng.exponential(1.0 / Lam, size=paths)
        mark = rng.random(paths)
        cost += np.where(alive, (inst.h1 * x1 + inst.h2 * x2) * dt, 0.0)
        tot = x1 + x2
        a1 = (mark < inst.lam1 / Lam) & (tot < inst.n_bar)
        a2 = (mark >= inst.lam1 / Lam) & (mark < (inst.lam1 + inst.lam2) / Lam) & (tot < inst.n_bar)
        d1 = (mark >= (inst.lam1 + inst.lam2) / Lam) & (
            mark < (inst.lam1 + inst.lam2 + inst.mu1) / Lam
        ) & (x1 > 0)
        d2 = (mark >= (inst.lam1 + inst.lam2 + inst.mu1) / Lam) & (x2 > 0)
        x1 += np.where(alive, a1.astype(int) - d1.astype(int), 0)
        x2 += np.where(alive, a2.astype(int) - d2.astype(int), 0)
        alive = (x1 + x2) > 0
    return cost


class TestSolveMdp:
    def test_empty_state_value_zero(self):
        sol = solve_mdp(small_instance(), tol=1e-8)
        assert sol.values[0, 0] == 0.0
        assert sol.action(0, 0) == 0

    def test_huge_setup_disables_transfers_and_matches_mc(self):
        inst = small_instance(K=1e6)
        sol = solve_mdp(inst)
        assert not sol.actions.any()
        x0 = (3, 2)
        mc = mc_no_transfer_cost(inst, x0, paths=100000, seed=11)
        se = mc.std(ddof=1) / np.sqrt(len(mc))
        assert abs(sol.values[5, 2] - mc.mean()) <= 3 * se

    def test_residuals_monotone_after_burn_in(self):
        sol = solve_mdp(small_instance(), tol=1e-8)
        r = np.asarray(sol.residuals[10:])
        assert np.all(np.diff(r) <= 1e-12)

    def test_benchmark_structure_contiguous_no_transfer_sets(self):
        inst = MdpInstance(0.9, 1.5, 1.5, 2.5, 1.3, 1.0, 1.0, 1.0, n_bar=40)
        sol = solve_mdp(inst)
        assert no_transfer_sets_contiguous(sol)
        # constant order-up-to points per diagonal
        for n in range(2, 41):
            post = [i + sol.actions[n, i] for i in range(n + 1) if sol.actions[n, i] > 0]
            assert len(set(post)) <= 1
            post2 = [i + sol.actions[n, i] for i in range(n + 1) if sol.actions[n, i] < 0]
            assert len(set(post2)) <= 1

    def test_policy_monotone_value(self):
        sol = solve_mdp(small_instance())
        nb = sol.instance.n_bar
        for n in range(nb):
            for i in range(n + 1):
                assert sol.values[n + 1, i] >= sol.values[n, i] - 1e-9


class TestCostToEmpty:
    def test_identical_policies_zero_gap(self):
        inst = small_instance(K=2.0)
        sol = solve_mdp(inst)
        fn = mdp_policy_fn(sol)
        costs = simulate_cost_to_empty(inst, {"a": fn, "b": fn, "none": no_transfer_fn}, (6, 5), 200, seed=3)
        assert np.array_equal(costs["a"], costs["b"])

    def test_transfers_help_imbalanced_start(self):
        inst = MdpInstance(0.7, 0.9, 1.0, 1.0, 1.0, 1.0, 2.0, 5.0, n_bar=40)
        sol = solve_mdp(inst)
        costs = simulate_cost_to_empty(
            inst, {"mdp": mdp_policy_fn(sol), "none": no_transfer_fn}, (2, 14), 3000, seed=5
        )
        assert costs["mdp"].mean() < costs["none"].mean()


class TestPeriodKernel:
    def test_rows_are_distributions(self):
        P, hold = queue_period_kernel(0.8, 1.0, 1.0, 15)
        assert np.allclose(P.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(P >= -1e-15)
        assert np.all(hold >= 0)

    def test_against_direct_simulation(self):
        lam, mu, tau = 0.9, 1.3, 1.5
        P, hold = queue_period_kernel(lam, mu, tau, 25)
        rng = np.random.default_rng(17)
        paths = 200000
        x = np.full(paths, 4, dtype=int)
        t = np.zeros(paths)
        integral = np.zeros(paths)
        Lam = lam + mu
        active = np.ones(paths, dtype=bool)
        while active.any():
            dt = rng.exponential(1.0 / Lam, size=paths)
            step_end = np.minimum(t + dt, tau)
            integral += np.where(active, x * (step_end - t), 0.0)
            t = np.where(active, t + dt, t)
            active = t < tau
            mark = rng.random(paths)
            arr = mark < lam / Lam
            dep = ~arr & (x > 0)
            x = np.where(active, x + arr.astype(int) - dep.astype(int), x)
            x = np.maximum(x, 0)
        emp_mean_end = x.mean()
        kernel_mean_end = float(P[4] @ np.arange(26))
        se = x.std(ddof=1) / np.sqrt(paths)
        assert abs(emp_mean_end - kernel_mean_end) <= 4 * se + 1e-6
        se_i = integral.std(ddof=1) / np.sqrt(paths)
        assert abs(integral.mean() - hold[4]) <= 4 * se_i + 1e-6


class TestExactDiscreteDp:
    def make(self, lam=(0.4, 0.6), mu=(1.0, 1.0), tau=1.0, M=2):
        model = NetworkModel(list(lam), list(mu), tau, M)
        costs = TransferCostSpec.symmetric_pair(0.3, JointSetup(0.4))
        holding = [LinearHolding(1.0), LinearHolding(1.0)]
        return model, costs, holding

    def test_zero_horizon_returns_nothing(self):
        model, costs, holding = self.make(M=1)
        sol = exact_discrete_dp(model, costs, holding, n_max=4, horizon=0)
        assert sol.values == []

    def test_scale_caps_enforced(self):
        model, costs, holding = self.make()
        with pytest.raises(UnsupportedScaleError):
            exact_discrete_dp(model, costs, holding, n_max=12, horizon=2)

    def test_symmetric_instance_symmetric_values(self):
        model = NetworkModel([0.5, 0.5], [1.0, 1.0], 1.0, 2)
        costs = TransferCostSpec.symmetric_pair(0.0, JointSetup(0.0))
        holding = [LinearHolding(1.0), LinearHolding(1.0)]
        sol = exact_discrete_dp(model, costs, holding, n_max=5, horizon=2)
        for (x1, x2), v in sol.values[0].items():
            assert v == pytest.approx(sol.values[0][(x2, x1)], abs=1e-9)

    def test_dp_beats_no_transfer_and_matches_self_evaluation(self):
        model, costs, holding = self.make()
        sol = exact_discrete_dp(model, costs, holding, n_max=6, horizon=2)

        def dp_policy(m, x):
            return sol.policy[m].get((x[0], x[1]), x)

        def none_policy(m, x):
            return x

        J_dp = evaluate_discrete_policy(model, costs, holding, dp_policy, 6, 2, n_cap=sol.n_cap)
        J_none = evaluate_discrete_policy(model, costs, holding, none_policy, 6, 2, n_cap=sol.n_cap)
        for (x1, x2), v in sol.values[0].items():
            assert J_dp[x1, x2] == pytest.approx(v, abs=1e-9)
            assert v <= J_none[x1, x2] + 1e-9
