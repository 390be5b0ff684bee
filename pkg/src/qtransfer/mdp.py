"""Two-queue continuous-control MDP benchmark and exact small-scale DPs.

The continuous-control problem is uniformized at rate
Lambda = lam1 + lam2 + mu1 + mu2 with the empty state absorbing: service
events at an empty queue and arrivals at the truncation cap self-loop.
States are (n, i) with n the total head count and i the queue-2 count;
actions move a in {-i, ..., n-i} customers from queue 1 to 2.

Also houses a brute-force finite-horizon DP for the discrete-control
problem at tiny scale, with per-period transition kernels computed exactly
by conditioning on uniformized event counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import UnsupportedScaleError
from .streams import EventStreamBundle


@dataclass
class MdpInstance:
    lam1: float
    lam2: float
    mu1: float
    mu2: float
    h1: float
    h2: float
    r: float
    K: float
    n_bar: int = 40

    def __post_init__(self):
        if self.mu1 + self.mu2 <= self.lam1 + self.lam2:
            raise ValueError("stability requires mu1 + mu2 > lam1 + lam2")

    @property
    def uniform_rate(self) -> float:
        return self.lam1 + self.lam2 + self.mu1 + self.mu2

    def scaled(self, eta: float) -> "MdpInstance":
        """Fluid scaling: rates and the fixed cost scale, unit costs do not."""
        return MdpInstance(
            self.lam1 * eta, self.lam2 * eta, self.mu1 * eta, self.mu2 * eta,
            self.h1, self.h2, self.r, self.K * eta, int(math.ceil(self.n_bar * eta)),
        )


class ConvergenceError(RuntimeError):
    def __init__(self, residual, sweeps):
        super().__init__(f"value iteration residual {residual:.3e} after {sweeps} sweeps")
        self.residual = residual


@dataclass
class MdpSolution:
    instance: MdpInstance
    values: np.ndarray  # (n_bar+1, n_bar+1), entry (n, i) valid for i <= n
    actions: np.ndarray  # optimal transfer from queue 1 to 2
    sweeps: int
    residuals: list = field(default_factory=list)

    def action(self, x1: int, x2: int) -> int:
        return int(self.actions[x1 + x2, x2])

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("n,i,V,a\n")
            nb = self.instance.n_bar
            for n in range(nb + 1):
                for i in range(n + 1):
                    fh.write(f"{n},{i},{self.values[n, i]:.10g},{int(self.actions[n, i])}\n")


def _expected_next(V, inst: MdpInstance):
    """W(n, j): unnormalized expected next value after one uniformized event.

    Fictitious events (service at an empty queue, arrival at the cap)
    self-loop; W(0, 0) = 0 makes the empty state absorbing.
    """
    nb = inst.n_bar
    idx_n = np.arange(nb + 1)[:, None]
    idx_j = np.arange(nb + 1)[None, :]
    valid = idx_j <= idx_n
    Vs = np.where(valid, V, 0.0)

    up = np.vstack([Vs[1:], Vs[-1]])  # V[min(n+1, nb), j]
    arr1 = up
    arr2 = np.hstack([up[:, 1:], up[:, -1:]])  # V[min(n+1, nb), min(j+1, nb)]
    down = np.vstack([Vs[:1], Vs[:-1]])  # V[n-1, j] (row 0 unused)
    down_shift = np.hstack([np.zeros((nb + 1, 1)), down[:, :-1]])  # V[n-1, j-1]

    q1_empty = idx_j == idx_n
    q2_empty = idx_j == 0
    dep1 = np.where(q1_empty, Vs, down)
    dep2 = np.where(q2_empty, Vs, down_shift)
    W = inst.lam1 * arr1 + inst.lam2 * arr2 + inst.mu1 * dep1 + inst.mu2 * dep2
    W[0, 0] = 0.0
    return np.where(valid, W, np.inf)


def _stage_costs(inst: MdpInstance):
    nb = inst.n_bar
    idx_n = np.arange(nb + 1)[:, None]
    idx_j = np.arange(nb + 1)[None, :]
    return (idx_n - idx_j) * inst.h1 + idx_j * inst.h2


def _row_minimize(G, inst: MdpInstance):
    """V(n, i) = min_a K 1{a != 0} + r|a| + G(n, i + a), vectorized over rows."""
    nb = inst.n_bar
    j = np.arange(nb + 1)[None, :]
    valid = j <= np.arange(nb + 1)[:, None]
    Gm = np.where(valid, G, np.inf)
    left = np.full_like(Gm, np.inf)
    run = np.minimum.accumulate(Gm - inst.r * j, axis=1)
    left[:, 1:] = run[:, :-1] + inst.r * j[:, 1:]
    right = np.full_like(Gm, np.inf)
    run = np.minimum.accumulate((Gm + inst.r * j)[:, ::-1], axis=1)[:, ::-1]
    right[:, :-1] = run[:, 1:] - inst.r * j[:, :-1]
    move = np.minimum(left, right) + inst.K
    V = np.minimum(Gm, move)
    V[0, 0] = min(V[0, 0], 0.0)
    return np.where(valid, V, 0.0)


def solve_mdp(inst: MdpInstance, tol: float = 1e-8, max_sweeps: int = 10**6) -> MdpSolution:
    """Value iteration to sup-norm tolerance; actions tie-break to smallest |a|."""
    nb = inst.n_bar
    Lam = inst.uniform_rate
    hold = _stage_costs(inst)
    V = np.zeros((nb + 1, nb + 1))
    residuals = []
    sweeps = 0
    while True:
        W = _expected_next(V, inst)
        G = (hold + np.where(np.isfinite(W), W, 0.0)) / Lam
        G = np.where(np.isfinite(W), G, np.inf)
        G[0, 0] = 0.0
        V_new = _row_minimize(G, inst)
        resid = float(np.max(np.abs(V_new - V)))
        residuals.append(resid)
        V = V_new
        sweeps += 1
        if resid <= tol:
            break
        if sweeps >= max_sweeps:
            raise ConvergenceError(resid, sweeps)

    actions = _recover_actions(V, inst)
    return MdpSolution(inst, V, actions, sweeps, residuals)


def _recover_actions(V, inst: MdpInstance):
    nb = inst.n_bar
    Lam = inst.uniform_rate
    hold = _stage_costs(inst)
    W = _expected_next(V, inst)
    G = (hold + np.where(np.isfinite(W), W, 0.0)) / Lam
    actions = np.zeros((nb + 1, nb + 1), dtype=int)
    for n in range(nb + 1):
        g = G[n, : n + 1]
        for i in range(n + 1):
            best = g[i]
            best_a = 0
            for j in range(n + 1):
                if j == i:
                    continue
                c = inst.K + inst.r * abs(j - i) + g[j]
                a = j - i
                if c < best - 1e-12 or (
                    c <= best + 1e-12
                    and best_a != 0
                    and (abs(a), a) < (abs(best_a), best_a)
                ):
                    best = min(best, c)
                    best_a = a
            actions[n, i] = best_a
    return actions


def no_transfer_sets_contiguous(sol: MdpSolution) -> bool:
    """True when {i: a*(n, i) = 0} is an interval for every diagonal n."""
    nb = sol.instance.n_bar
    for n in range(nb + 1):
        zeros = np.flatnonzero(sol.actions[n, : n + 1] == 0)
        if zeros.size == 0:
            return False
        if not np.all(np.diff(zeros) == 1):
            return False
    return True


# ---------------------------------------------------------------------------
# continuous-time cost-to-empty simulation with CRN pairing
# ---------------------------------------------------------------------------


def simulate_cost_to_empty(
    inst: MdpInstance,
    policies: dict,
    x0,
    paths: int,
    seed: int,
    ic_tag: int = 0,
    max_steps: int = 2_000_000,
):
    """Expected total cost until absorption at (0,0) under each policy.

    All policies share the identical exogenous event stream: step k of path p
    reads the same (dt, mark) pair regardless of policy, which pairs the
    comparison and makes identical policies produce identical costs.
    """
    Lam = inst.uniform_rate
    p_arr1 = inst.lam1 / Lam
    p_arr2 = inst.lam2 / Lam
    p_mu1 = inst.mu1 / Lam
    bundle = EventStreamBundle(seed)
    names = list(policies)
    x1 = {nm: np.full(paths, int(x0[0]), dtype=int) for nm in names}
    x2 = {nm: np.full(paths, int(x0[1]), dtype=int) for nm in names}
    cost = {nm: np.zeros(paths) for nm in names}
    alive = {nm: np.ones(paths, dtype=bool) for nm in names}

    def act(nm):
        pol = policies[nm]
        a = pol(x1[nm], x2[nm])
        live = alive[nm]
        x1[nm] -= np.where(live, a, 0)
        x2[nm] += np.where(live, a, 0)
        cost[nm] += np.where(live & (a != 0), inst.K + inst.r * np.abs(a), 0.0)

    for nm in names:
        act(nm)
        done = (x1[nm] == 0) & (x2[nm] == 0)
        alive[nm] &= ~done

    step = 0
    while any(alive[nm].any() for nm in names):
        gen = bundle.substream(ic_tag, 0, step, 0)
        dt = gen.exponential(1.0 / Lam, size=paths)
        mark = gen.random(size=paths)
        for nm in names:
            live = alive[nm]
            if not live.any():
                continue
            hold_rate = inst.h1 * x1[nm] + inst.h2 * x2[nm]
            cost[nm] += np.where(live, hold_rate * dt, 0.0)
            n_tot = x1[nm] + x2[nm]
            is_a1 = (mark < p_arr1) & (n_tot < inst.n_bar)
            is_a2 = (mark >= p_arr1) & (mark < p_arr1 + p_arr2) & (n_tot < inst.n_bar)
            is_d1 = (mark >= p_arr1 + p_arr2) & (mark < p_arr1 + p_arr2 + p_mu1) & (x1[nm] > 0)
            is_d2 = (mark >= p_arr1 + p_arr2 + p_mu1) & (x2[nm] > 0)
            x1[nm] += np.where(live, is_a1.astype(int) - is_d1.astype(int), 0)
            x2[nm] += np.where(live, is_a2.astype(int) - is_d2.astype(int), 0)
            act(nm)
            done = (x1[nm] == 0) & (x2[nm] == 0)
            alive[nm] &= ~done
        step += 1
        if step > max_steps:
            raise RuntimeError("cost-to-empty simulation did not absorb")
    return {nm: cost[nm] for nm in names}


def mdp_policy_fn(sol: MdpSolution):
    A = sol.actions

    def fn(x1, x2):
        return A[x1 + x2, x2]

    return fn


def fluid_policy_fn(artifact):
    """Integer transfer-to-queue-2 action from a stationary grid artifact."""
    pg = artifact.periods[0]
    states = artifact.states
    targets = pg.targets
    n_states = len(states)
    act = np.zeros(n_states, dtype=int)
    for k in range(n_states):
        act[k] = states[targets[k], 1] - states[k, 1]
    lut = {}
    for k, s in enumerate(states.tolist()):
        lut[(s[0], s[1])] = act[k]
    max_tot = int(artifact.states.sum(axis=1).max())
    table = np.zeros((max_tot + 1, max_tot + 1), dtype=int)
    for (a, b), v in lut.items():
        table[a + b, b] = v

    def fn(x1, x2):
        return table[np.minimum(x1 + x2, max_tot), np.minimum(x2, max_tot)]

    return fn


def no_transfer_fn(x1, x2):
    return np.zeros_like(x1)


@dataclass
class GapStatistics:
    eta: float
    per_ic_gap: np.ndarray
    per_ic_vs_none: np.ndarray

    @property
    def mean_gap(self):
        return float(self.per_ic_gap.mean())

    @property
    def min_gap(self):
        return float(self.per_ic_gap.min())

    @property
    def max_gap(self):
        return float(self.per_ic_gap.max())

    @property
    def mean_vs_none(self):
        return float(self.per_ic_vs_none.mean())


def optimality_gap(
    inst: MdpInstance,
    eta: float,
    fluid_artifact,
    n_initial: int = 20,
    paths: int = 1000,
    seed: int = 0,
) -> GapStatistics:
    """Fluid-policy optimality gap versus the MDP policy under scaling eta.

    Initial conditions are sampled with total mass in [10, 20] before
    scaling; both policies (plus no-transfer) run on CRN-paired event
    streams from each scaled initial condition until the system empties.
    """
    scaled = inst.scaled(eta)
    mdp_sol = solve_mdp(scaled)
    policies = {
        "mdp": mdp_policy_fn(mdp_sol),
        "fluid": fluid_policy_fn(fluid_artifact),
        "none": no_transfer_fn,
    }
    gen = EventStreamBundle(seed).scalar_stream(7)
    gaps = []
    vs_none = []
    for ic in range(n_initial):
        total = gen.uniform(10.0, 20.0)
        frac = gen.uniform()
        x0 = np.array([total * frac, total * (1 - frac)])
        x0s = np.maximum(np.round(eta * x0).astype(int), 0)
        if x0s.sum() == 0:
            x0s = np.array([1, 1])
        costs = simulate_cost_to_empty(scaled, policies, x0s, paths, seed + 1, ic_tag=ic)
        c_mdp = costs["mdp"].mean()
        c_fluid = costs["fluid"].mean()
        c_none = costs["none"].mean()
        gaps.append(c_fluid / c_mdp - 1.0)
        vs_none.append(c_fluid / c_none - 1.0)
    return GapStatistics(eta, np.asarray(gaps), np.asarray(vs_none))


# ---------------------------------------------------------------------------
# exact finite-horizon DP for the discrete-control problem at tiny scale
# ---------------------------------------------------------------------------


def _tail_quantile_poisson(mean, eps=1e-12):
    k, p, cum = 0, math.exp(-mean), math.exp(-mean)
    while cum < 1.0 - eps and k < 10000:
        k += 1
        p *= mean / k
        cum += p
    return k


def queue_period_kernel(lam: float, mu_eff: float, tau: float, n_cap: int):
    """Exact one-period M/M/1-type kernel and expected head-count integral.

    Conditions on the number of uniformized events in the period, truncating
    the Poisson tail below 1e-12 and renormalizing. Returns (P, hold) where
    P[j, k] is the end-of-period distribution from head count j and hold[j]
    is the expected integral of the head count over the period.
    """
    Lam = lam + mu_eff
    if Lam <= 0:
        P = np.eye(n_cap + 1)
        return P, np.arange(n_cap + 1, dtype=float) * tau
    T = np.zeros((n_cap + 1, n_cap + 1))
    for j in range(n_cap + 1):
        up = lam / Lam
        down = mu_eff / Lam if j > 0 else 0.0
        if j < n_cap:
            T[j, j + 1] += up
        else:
            T[j, j] += up
        if j > 0:
            T[j, j - 1] += down
        T[j, j] += 1.0 - up - down
    mean = Lam * tau
    n_terms = _tail_quantile_poisson(mean)
    weights = np.zeros(n_terms + 1)
    p = math.exp(-mean)
    weights[0] = p
    for k in range(1, n_terms + 1):
        p *= mean / k
        weights[k] = p
    weights /= weights.sum()
    # survival S[k] = P(N >= k+1) for the expected sojourn between events
    surv = 1.0 - np.cumsum(weights)
    ids = np.arange(n_cap + 1, dtype=float)
    P = np.zeros_like(T)
    hold = np.zeros(n_cap + 1)
    Mk = np.eye(n_cap + 1)
    for k in range(n_terms + 1):
        P += weights[k] * Mk
        hold += max(surv[k], 0.0) / Lam * (Mk @ ids)
        if k < n_terms:
            Mk = Mk @ T
    return P, hold


@dataclass
class DiscreteDpSolution:
    values: list  # per period m: dict keyed (x1, x2)
    policy: list  # per period m: dict keyed (x1, x2) -> (y1, y2)
    n_cap: int


def exact_discrete_dp(model, costs, holding, n_max: int, horizon: int) -> DiscreteDpSolution:
    """Brute-force optimal policy for the two-queue discrete-control problem.

    Valid only at tiny scale (n_max <= 8, horizon <= 3); the state box is
    expanded so that within-horizon arrivals stay below the cap with
    probability mass >= 1 - 1e-12 per period.
    """
    if model.n_queues != 2:
        raise UnsupportedScaleError("exact DP supports exactly two queues")
    if n_max > 8 or horizon > 3:
        raise UnsupportedScaleError("exact DP caps: n_max <= 8, horizon <= 3")
    lam = [model.lam[i].average(0.0, model.tau) for i in range(2)]
    mu_eff = model.effective_mu
    grow = max(_tail_quantile_poisson(l * model.tau * horizon) for l in lam)
    n_cap = n_max + grow + 2
    kernels = [queue_period_kernel(lam[i], float(mu_eff[i]), model.tau, n_cap) for i in range(2)]
    h_rates = [holding[i].rate for i in range(2)]
    hold_vec = [h_rates[i] * kernels[i][1] for i in range(2)]
    from .transport import TransferCostOracle

    C = TransferCostOracle(costs)
    J = np.zeros((n_cap + 1, n_cap + 1))
    values, policy = [], []
    for m in range(horizon - 1, -1, -1):
        B = kernels[0][0] @ J @ kernels[1][0].T
        stage = hold_vec[0][:, None] + hold_vec[1][None, :] + B
        Jm = np.zeros_like(J)
        pol_m = {}
        val_m = {}
        for n in range(2 * n_cap + 1):
            ys = [(y1, n - y1) for y1 in range(max(0, n - n_cap), min(n, n_cap) + 1)]
            if not ys:
                continue
            stage_vals = np.array([stage[y] for y in ys])
            for x1, x2 in ys:
                best = np.inf
                best_y = (x1, x2)
                for (y, sv) in zip(ys, stage_vals):
                    c = sv + C(np.array([y[0] - x1, y[1] - x2], dtype=float))
                    move = (abs(y[0] - x1), y)
                    if c < best - 1e-12 or (c <= best + 1e-12 and move < (abs(best_y[0] - x1), best_y)):
                        best = min(best, c)
                        best_y = y
                Jm[x1, x2] = best
                pol_m[(x1, x2)] = best_y
                val_m[(x1, x2)] = best
        J = Jm
        values.insert(0, val_m)
        policy.insert(0, pol_m)
    return DiscreteDpSolution(values, policy, n_cap)


def evaluate_discrete_policy(model, costs, holding, policy_fn, n_max: int, horizon: int, n_cap=None):
    """Exact expected cost of an arbitrary policy under the same kernels."""
    lam = [model.lam[i].average(0.0, model.tau) for i in range(2)]
    mu_eff = model.effective_mu
    if n_cap is None:
        grow = max(_tail_quantile_poisson(l * model.tau * horizon) for l in lam)
        n_cap = n_max + grow + 2
    kernels = [queue_period_kernel(lam[i], float(mu_eff[i]), model.tau, n_cap) for i in range(2)]
    hold_vec = [holding[i].rate * kernels[i][1] for i in range(2)]
    from .transport import TransferCostOracle

    C = TransferCostOracle(costs)
    J = np.zeros((n_cap + 1, n_cap + 1))
    for m in range(horizon - 1, -1, -1):
        B = kernels[0][0] @ J @ kernels[1][0].T
        stage = hold_vec[0][:, None] + hold_vec[1][None, :] + B
        Jm = np.zeros_like(J)
        for x1 in range(n_cap + 1):
            for x2 in range(n_cap + 1):
                y = policy_fn(m, (x1, x2))
                y = (min(max(int(y[0]), 0), n_cap), min(max(int(y[1]), 0), n_cap))
                if y[0] + y[1] != x1 + x2:
                    y = (x1, x2)
                Jm[x1, x2] = stage[y] + C(np.array([y[0] - x1, y[1] - x2], dtype=float))
        J = Jm
    return J
