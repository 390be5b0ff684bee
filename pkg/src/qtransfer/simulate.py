"""Discrete-event simulation of the stochastic transfer system.

Transfers are applied instantaneously at period starts; between decisions
each queue evolves independently. Exponential-service queues are driven by a
uniformized exogenous event grid (non-homogeneous arrivals via thinning,
state-dependent service acceptance), which makes the randomness a pure
function of the stream coordinates and vectorizes across replications.
Log-normal single-server queues advance a FCFS start-time recursion instead.
Holding costs integrate exactly between events.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .model import LinearHolding, NetworkModel, TransferCostSpec, net_transfer
from .streams import EventStreamBundle


class PolicyContractError(RuntimeError):
    """A policy emitted an inadmissible transfer matrix."""


@dataclass
class ExponentialService:
    mu: float


@dataclass
class LogNormalService:
    mean: float
    std: float

    @property
    def sigma_log(self) -> float:
        return float(np.sqrt(np.log(1.0 + (self.std / self.mean) ** 2)))

    @property
    def mu_log(self) -> float:
        return float(np.log(self.mean) - 0.5 * self.sigma_log**2)

    @property
    def rate(self) -> float:
        return 1.0 / self.mean


def default_service(model: NetworkModel):
    return [ExponentialService(float(mu)) for mu in model.mu]


def no_transfer_policy(period, x):
    n = len(x)
    return np.zeros((n, n), dtype=int)


@dataclass
class SimOptions:
    cap: float | None = None  # per-queue net transfer bound, applied by policies
    capacities: np.ndarray | None = None  # for over-capacity bookkeeping
    sim_model: NetworkModel | None = None  # true arrival rates, if perturbed


@dataclass
class ReplicationRecord:
    holding_cost: float = 0.0
    transfer_cost: float = 0.0
    moved: int = 0
    over_capacity: float = 0.0
    trajectory: list = field(default_factory=list)

    @property
    def total_cost(self) -> float:
        return self.holding_cost + self.transfer_cost


def _check_policy_matrix(U, x, period):
    U = np.asarray(U)
    if np.any(U < 0) or np.any(np.diag(U) != 0):
        raise PolicyContractError(f"negative or diagonal transfer in period {period}")
    if np.any(U.sum(axis=1) > x):
        raise PolicyContractError(f"row sums exceed state in period {period}")
    return U.astype(int)


class _ExpQueueChunk:
    """Vectorized single-queue dynamics over one period for many paths."""

    def __init__(self, bundle, reps, queue, period, lam, mu_eff_rate, t0, t1):
        lam_max = lam.max_value(t0, t1)
        self.total = lam_max + mu_eff_rate
        self.lam_max = lam_max
        self.lam = lam
        self.t0, self.t1 = t0, t1
        grids = [
            bundle.uniformized_grid(rep, queue, period, self.total, t0, t1) for rep in reps
        ]
        width = max((len(t) for t, _ in grids), default=0)
        R = len(reps)
        self.times = np.full((R, max(width, 1)), np.inf)
        self.marks = np.zeros((R, max(width, 1)))
        for r, (t, u) in enumerate(grids):
            self.times[r, : len(t)] = t
            self.marks[r, : len(t)] = u

    def run(self, x, mu, servers, holding_spec, capacity=None):
        """Evolve integer states x; returns (x_out, stats dict).

        A single stored grid row broadcasts across all states (shared-stream
        coupling); otherwise rows pair with states one-to-one.
        """
        x = x.copy()
        R = len(x)
        K = self.times.shape[1]
        if self.times.shape[0] not in (1, R):
            raise ValueError("grid rows must match the state vector or be shared")
        hold = np.zeros(R)
        over = np.zeros(R)
        arrivals = np.zeros(R, dtype=int)
        departures = np.zeros(R, dtype=int)
        prev = np.full(R, self.t0)
        for k in range(K):
            t = self.times[:, k]
            te = np.minimum(t, self.t1)
            dt = np.maximum(te - prev, 0.0)
            if dt.any():
                hold += np.asarray(holding_spec.cost(x), dtype=float) * dt
                if capacity is not None:
                    over += np.maximum(x - capacity, 0) * dt
            prev = np.maximum(prev, te)
            active = t < self.t1
            if not active.any():
                break
            lam_t = self.lam.value_vec(np.where(active, t, self.t0))
            mk = self.marks[:, k] * self.total
            arr = active & (mk < lam_t)
            svc_rate = np.minimum(x, servers) * mu
            dep = active & ~arr & (mk >= self.lam_max) & (mk < self.lam_max + svc_rate)
            x = x + arr.astype(int) - dep.astype(int)
            arrivals += arr
            departures += dep
        dt = np.maximum(self.t1 - prev, 0.0)
        hold += np.asarray(holding_spec.cost(x), dtype=float) * dt
        if capacity is not None:
            over += np.maximum(x - capacity, 0) * dt
        return x, {"holding": hold, "over": over, "arrivals": arrivals, "departures": departures}


class _G1QueueChunk:
    """Vectorized FCFS single-server queue with drawn service times.

    State per path: head count x and the absolute time the server next frees
    (-inf when idle). Service draws are consumed in start order from the
    (rep, queue, period) stream, so paths in identical states follow
    identical trajectories under a shared bundle.
    """

    def __init__(self, bundle, reps, queue, period, lam, t0, t1):
        self.t0, self.t1 = t0, t1
        lam_max = lam.max_value(t0, t1)
        self.shared = len(set(reps)) == 1 and len(reps) > 1
        gen_reps = [reps[0]] if self.shared else list(reps)
        arr = []
        for rep in gen_reps:
            times, accept = bundle.arrival_grid(rep, queue, period, lam_max, t0, t1)
            keep = accept < lam.value_vec(times) / lam_max
            arr.append(times[keep])
        if self.shared:
            arr = arr * len(reps)
        width = max((len(a) for a in arr), default=0)
        R = len(reps)
        self.arr = np.full((R, max(width, 1)), np.inf)
        self.arr_count = np.zeros(R, dtype=int)
        for r, a in enumerate(arr):
            self.arr[r, : len(a)] = a
            self.arr_count[r] = len(a)
        self.bundle = bundle
        self.reps = list(reps)
        self.queue = queue
        self.period = period

    def run(self, x, tfree, service, holding_rate, capacity=None):
        R = len(x)
        t0, t1 = self.t0, self.t1
        in_serv = (tfree > t0) & (x > 0)
        waiting = x - in_serv.astype(int)
        slots = waiting + self.arr_count
        K = int(slots.max()) if R else 0
        draws = np.zeros((R, max(K, 1)))
        if self.shared:
            # shared stream: every path reads the same draw prefix
            if K > 0:
                row = self.bundle.lognormal_service_draws(
                    self.reps[0], self.queue, self.period, K, service.mu_log, service.sigma_log
                )
                draws[:] = row[None, :]
        else:
            for r, rep in enumerate(self.reps):
                if slots[r] > 0:
                    draws[r, : slots[r]] = self.bundle.lognormal_service_draws(
                        rep, self.queue, self.period, slots[r], service.mu_log, service.sigma_log
                    )
        prev = np.where(in_serv, tfree, t0)
        departures = (in_serv & (tfree <= t1)).astype(int)
        dep_weight = np.where(in_serv & (tfree <= t1), t1 - tfree, 0.0)
        new_tfree = np.where(in_serv & (tfree > t1), tfree, -np.inf)
        started_total = np.zeros(R, dtype=int)
        for k in range(K):
            valid = slots > k
            idx = np.clip(k - waiting, 0, self.arr.shape[1] - 1)
            avail = np.where(k < waiting, t0, self.arr[np.arange(R), idx])
            start = np.maximum(prev, avail)
            started = valid & (start < t1)
            comp = start + draws[:, k]
            dep = started & (comp <= t1)
            departures += dep.astype(int)
            dep_weight += np.where(dep, t1 - comp, 0.0)
            straddle = started & (comp > t1)
            new_tfree = np.where(straddle, comp, new_tfree)
            prev = np.where(started, comp, prev)
            started_total += started.astype(int)
        x_out = x + self.arr_count - departures
        arr_weight = np.where(self.arr < t1, t1 - self.arr, 0.0).sum(axis=1)
        hold = holding_rate * (x * (t1 - t0) + arr_weight - dep_weight)
        over = np.zeros(R)
        if capacity is not None:
            raise NotImplementedError("over-capacity tracking needs the exponential engine")
        return x_out, new_tfree, {
            "holding": hold,
            "over": over,
            "arrivals": self.arr_count.copy(),
            "departures": departures,
        }


def _gs_period_single(x, pending, bundle, rep, queue, period, lam, service, servers, t0, t1, holding_spec, capacity):
    """Reference per-path engine: FCFS, ``servers`` parallel, drawn services.

    ``pending`` is the sorted list of busy-server completion times carried
    across periods. Used for multiserver log-normal systems.
    """
    lam_max = lam.max_value(t0, t1)
    times, accept = bundle.arrival_grid(rep, queue, period, lam_max, t0, t1)
    keep = accept < lam.value_vec(times) / lam_max
    arrivals = list(times[keep])
    draw_count = 0

    def draw():
        nonlocal draw_count
        draw_count += 1
        return float(
            bundle.lognormal_service_draws(
                rep, queue, period, draw_count, service.mu_log, service.sigma_log
            )[-1]
        )

    busy = list(pending)
    heapq.heapify(busy)
    waiting = x - len(busy)
    t = t0
    hold = 0.0
    over = 0.0
    dep = 0
    arr_seen = 0

    def accrue(until, xx):
        nonlocal hold, over
        hold += float(holding_spec.cost(xx)) * (until - t)
        if capacity is not None:
            over += max(xx - capacity, 0) * (until - t)

    while waiting > 0 and len(busy) < servers:
        heapq.heappush(busy, t0 + draw())
        waiting -= 1
    events = True
    while events:
        t_arr = arrivals[arr_seen] if arr_seen < len(arrivals) else np.inf
        t_dep = busy[0] if busy else np.inf
        t_next = min(t_arr, t_dep)
        if t_next >= t1:
            break
        accrue(t_next, waiting + len(busy))
        t = t_next
        if t_dep <= t_arr:
            heapq.heappop(busy)
            dep += 1
            if waiting > 0:
                heapq.heappush(busy, t + draw())
                waiting -= 1
        else:
            arr_seen += 1
            if len(busy) < servers:
                heapq.heappush(busy, t + draw())
            else:
                waiting += 1
    accrue(t1, waiting + len(busy))
    x_out = waiting + len(busy)
    return x_out, sorted(busy), {
        "holding": hold,
        "over": over,
        "arrivals": arr_seen,
        "departures": dep,
    }


def transfer_costs_of(U, costs: TransferCostSpec):
    return float(np.sum(costs.variable * U)) + costs.setup.of_matrix(U)


def simulate_horizon(
    x0,
    model: NetworkModel,
    service,
    policy,
    bundle: EventStreamBundle,
    rep: int,
    holding,
    costs: TransferCostSpec,
    options: SimOptions | None = None,
) -> ReplicationRecord:
    """One replication over the full horizon; exact event-driven accounting."""
    options = options or SimOptions()
    sim_model = options.sim_model or model
    x = np.asarray(x0, dtype=int).copy()
    if np.any(x < 0):
        raise ValueError("initial state must be non-negative integers")
    rec = ReplicationRecord()
    N = model.n_queues
    tfree = np.full(N, -np.inf)
    pending = [[] for _ in range(N)]
    for m in range(model.horizon):
        U = _check_policy_matrix(policy(m, x.copy()), x, m)
        pre = x.copy()
        x = x + net_transfer(U).astype(int)
        assert x.sum() == pre.sum(), "transfer must conserve total mass"
        rec.transfer_cost += transfer_costs_of(U, costs)
        rec.moved += int(U.sum())
        rec.trajectory.append((m, pre.tolist(), x.tolist()))
        t0, t1 = m * model.tau, (m + 1) * model.tau
        for i in range(N):
            cap_i = None if options.capacities is None else options.capacities[i]
            spec = service[i]
            if isinstance(spec, ExponentialService):
                chunk = _ExpQueueChunk(
                    bundle, [rep], i, m, sim_model.lam[i], model.servers[i] * spec.mu, t0, t1
                )
                xv, stats = chunk.run(
                    x[i : i + 1].copy(), spec.mu, int(model.servers[i]), holding[i], cap_i
                )
                x[i] = xv[0]
            elif model.servers[i] == 1:
                chunk = _G1QueueChunk(bundle, [rep], i, m, sim_model.lam[i], t0, t1)
                if not isinstance(holding[i], LinearHolding):
                    raise NotImplementedError("log-normal engine supports linear holding")
                xv, tf, stats = chunk.run(
                    x[i : i + 1].copy(), tfree[i : i + 1].copy(), spec, holding[i].rate, cap_i
                )
                x[i] = xv[0]
                tfree[i] = tf[0]
            else:
                x[i], pending[i], stats = _gs_period_single(
                    int(x[i]), pending[i], bundle, rep, i, m, sim_model.lam[i], spec,
                    int(model.servers[i]), t0, t1, holding[i], cap_i,
                )
            rec.holding_cost += float(np.sum(stats["holding"]))
            rec.over_capacity += float(np.sum(stats["over"]))
    return rec


@dataclass
class PolicyStats:
    name: str
    holding: np.ndarray
    transfer: np.ndarray
    moved: np.ndarray
    over: np.ndarray

    @property
    def total(self):
        return self.holding + self.transfer

    def summary(self, z=1.96):
        R = len(self.holding)
        tot = self.total
        return {
            "mean_holding_cost": float(self.holding.mean()),
            "mean_transfer_cost": float(self.transfer.mean()),
            "mean_total_cost": float(tot.mean()),
            "ci_total_cost": float(z * tot.std(ddof=1) / np.sqrt(R)),
            "ci_holding_cost": float(z * self.holding.std(ddof=1) / np.sqrt(R)),
            "mean_transfers": float(self.moved.mean()),
            "mean_over_capacity": float(self.over.mean()),
            "replications": int(R),
        }


@dataclass
class SimulationReport:
    seed: int
    policies: list  # PolicyStats, first is the baseline

    def summary(self):
        base = self.policies[0]
        out = {"seed": self.seed, "policies": {}}
        for st in self.policies:
            row = st.summary()
            if st is not base:
                d = base.total - st.total
                mean_red = d.mean() / base.total.mean()
                ci = 1.96 * d.std(ddof=1) / np.sqrt(len(d)) / base.total.mean()
                row["reduction_vs_baseline"] = float(mean_red)
                row["reduction_ci"] = float(ci)
                dh = base.holding - st.holding
                row["holding_reduction_vs_baseline"] = float(dh.mean() / base.holding.mean())
            out["policies"][st.name] = row
        return out


def evaluate_policies(
    named_policies,
    model: NetworkModel,
    service,
    holding,
    costs: TransferCostSpec,
    x0,
    reps: int,
    seed: int,
    options: SimOptions | None = None,
    chunk_size: int = 2048,
) -> SimulationReport:
    """CRN-paired evaluation of several policies on identical event streams.

    All policies see the same bundle; replications are processed in chunks
    with the per-queue dynamics vectorized across the chunk.
    """
    if reps < 2:
        raise ValueError("need at least two replications for confidence intervals")
    options = options or SimOptions()
    sim_model = options.sim_model or model
    bundle = EventStreamBundle(seed)
    names = [name for name, _ in named_policies]
    N = model.n_queues
    acc = {
        name: {k: [] for k in ("holding", "transfer", "moved", "over")} for name in names
    }
    x0 = np.asarray(x0, dtype=int)

    all_exp = all(isinstance(s, ExponentialService) for s in service)
    for lo in range(0, reps, chunk_size):
        hi = min(lo + chunk_size, reps)
        rep_ids = list(range(lo, hi))
        R = hi - lo
        states = {name: np.tile(x0, (R, 1)) for name in names}
        tfree = {name: np.full((R, N), -np.inf) for name in names}
        hold_c = {name: np.zeros(R) for name in names}
        tran_c = {name: np.zeros(R) for name in names}
        move_c = {name: np.zeros(R, dtype=int) for name in names}
        over_c = {name: np.zeros(R) for name in names}
        for m in range(model.horizon):
            t0, t1 = m * model.tau, (m + 1) * model.tau
            for name, policy in named_policies:
                xs = states[name]
                memo = {}
                for r in range(R):
                    key = tuple(int(v) for v in xs[r])
                    hit = memo.get(key)
                    if hit is None:
                        U = _check_policy_matrix(policy(m, np.array(key)), np.array(key), m)
                        hit = (U, transfer_costs_of(U, costs), int(U.sum()), net_transfer(U).astype(int))
                        memo[key] = hit
                    U, tc, mv, net = hit
                    xs[r] += net
                    tran_c[name][r] += tc
                    move_c[name][r] += mv
            for i in range(N):
                cap_i = None if options.capacities is None else options.capacities[i]
                if all_exp:
                    engine = _ExpQueueChunk(
                        bundle, rep_ids, i, m, sim_model.lam[i],
                        model.servers[i] * service[i].mu, t0, t1,
                    )
                    for name in names:
                        xv, stats = engine.run(
                            states[name][:, i], service[i].mu, int(model.servers[i]),
                            holding[i], cap_i,
                        )
                        states[name][:, i] = xv
                        hold_c[name] += stats["holding"]
                        over_c[name] += stats["over"]
                elif model.servers[i] == 1:
                    engine = _G1QueueChunk(bundle, rep_ids, i, m, sim_model.lam[i], t0, t1)
                    if not isinstance(holding[i], LinearHolding):
                        raise NotImplementedError("log-normal engine supports linear holding")
                    for name in names:
                        xv, tf, stats = engine.run(
                            states[name][:, i], tfree[name][:, i], service[i],
                            holding[i].rate, cap_i,
                        )
                        states[name][:, i] = xv
                        tfree[name][:, i] = tf
                        hold_c[name] += stats["holding"]
                        over_c[name] += stats["over"]
                else:
                    raise NotImplementedError(
                        "multiserver non-exponential service uses simulate_horizon"
                    )
        for name in names:
            acc[name]["holding"].append(hold_c[name])
            acc[name]["transfer"].append(tran_c[name])
            acc[name]["moved"].append(move_c[name])
            acc[name]["over"].append(over_c[name])

    stats = [
        PolicyStats(
            name,
            np.concatenate(acc[name]["holding"]),
            np.concatenate(acc[name]["transfer"]),
            np.concatenate(acc[name]["moved"]),
            np.concatenate(acc[name]["over"]),
        )
        for name in names
    ]
    return SimulationReport(seed, stats)


def myopic_index_policy(model: NetworkModel, costs: TransferCostSpec, cap=None):
    """Raise every queue below its non-idleness index up to the index.

    Deficits are covered from queues above their own index at minimum
    variable cost (donors chosen jointly via an unbalanced transport with a
    free dummy sink); deficits are rationed proportionally if donors cannot
    cover them. The continuous plan is floored to integers.
    """
    from .fluidprog import floor_transfers
    from .transport import _restricted_flow_cost

    def policy(period, x):
        period = min(period, model.horizon - 1)
        lam_bar = model.average_rates(period)
        idx = model.tau * np.maximum(model.effective_mu - lam_bar, 0.0)
        deficit = np.maximum(idx - x, 0.0)
        surplus = np.maximum(x - idx, 0.0)
        n = len(x)
        need = deficit.sum()
        if need <= 1e-12 or surplus.sum() <= 1e-12:
            return np.zeros((n, n), dtype=int)
        if surplus.sum() < need:
            deficit *= surplus.sum() / need
            need = deficit.sum()
        # unbalanced transport: dummy node absorbs the unused surplus for free
        z = np.concatenate([deficit - surplus, [surplus.sum() - need]])
        r_ext = np.zeros((n + 1, n + 1))
        r_ext[:n, :n] = costs.variable
        arcs = [(i, j) for i in range(n) if surplus[i] > 0 for j in range(n) if deficit[j] > 0]
        arcs += [(i, n) for i in range(n) if surplus[i] > 0]
        res = _restricted_flow_cost(z, r_ext, arcs)
        u = res[1][:n, :n] if res is not None else np.zeros((n, n))
        return floor_transfers(u, x, cap)

    return policy


def perturb_rates(model: NetworkModel, scenario: int, seed: int) -> NetworkModel:
    """True-rate copy of the model with daily multiplicative forecast errors.

    Scenario 1 draws U[0.8, 1.2], scenario 2 U[0.5, 1.5], and scenario 3
    U[0.2, 0.5] (systematic over-forecasting), independently per queue-day.
    """
    lo, hi = {1: (0.8, 1.2), 2: (0.5, 1.5), 3: (0.2, 0.5)}[scenario]
    gen = EventStreamBundle(seed).scalar_stream(1000 + scenario)
    day = model.tau
    horizon_t = model.horizon * day
    new_rates = []
    for i in range(model.n_queues):
        mults = gen.uniform(lo, hi, size=model.horizon)
        times, values = [], []
        for m in range(model.horizon):
            a, b = m * day, (m + 1) * day
            for t0, t1, v in model.lam[i].segments(a, min(b, horizon_t)):
                times.append(t0)
                values.append(v * mults[m])
        new_rates.append(type(model.lam[i])(times, values))
    return model.replace_rates(new_rates)
