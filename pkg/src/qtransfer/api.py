"""Classifier-based approximate policy iteration for the stochastic system.

The learner keeps, per period, a value table over the truncated integer
state space, binary in/out labels for the no-transfer region, and a logistic
classifier smoothing those labels. Iterations alternate CRN-coupled policy
evaluation (B simulation runs from every state, target states reused across
runs) and policy improvement (counter-weighted value blending, label updates
restricted to the region boundary, classifier retraining, and a
connectedness safeguard with rollback).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import classifier as clf
from .dpgrid import dp_value_grid
from .model import JointSetup, LinearHolding, NetworkModel, TransferCostSpec, net_transfer
from .simulate import ExponentialService, _ExpQueueChunk, _G1QueueChunk, transfer_costs_of
from .streams import EventStreamBundle
from .transport import TransferCostOracle, variable_transfer_cost


@dataclass
class ApiOptions:
    p: float = 0.1
    B: int = 10
    j_max: int = 10
    n_max: int = 40
    seed: int = 0
    cap: int | None = None
    l2: float = 1e-4
    blocks: str = "both"
    init_delta: float = 1.0


@dataclass
class PeriodTable:
    values: np.ndarray
    counters: np.ndarray
    labels: np.ndarray
    model: clf.ClassifierModel | None = None
    region: np.ndarray | None = None
    boundary: np.ndarray | None = None


class ApiPolicyArtifact:
    """Learned region-of-inaction policy over X = {x : e'x <= n_max}."""

    def __init__(self, states, index, options: ApiOptions, horizon: int):
        self.states = states
        self.index = index
        self.options = options
        self.horizon = horizon
        self.periods: list[PeriodTable] = []
        self.iteration_log: list[dict] = []
        self._act_cache = {}
        self._oracle = None

    # -- region bookkeeping -------------------------------------------------

    def refresh_region(self, m: int, prev=None):
        """Recompute region flags from the classifier.

        When ``prev`` = (region, boundary) from the previous iteration is
        given, classification changes are clamped to the previous boundary:
        the algorithm refines the region's boundary only, which keeps label
        updates local and the region evolution well-behaved even where the
        classifier misfits far from the boundary.
        """
        pt = self.periods[m]
        probs = pt.model.predict_many(self.states.astype(float))
        raw = probs >= self.options.p
        if prev is not None:
            prev_region, prev_boundary = prev
            raw = np.where(prev_boundary, raw, prev_region)
        pt.region = raw
        pt.boundary = boundary_mask(self.states, self.index, pt.region)
        # canonical labels: the classification off the boundary, raw on it
        if pt.labels is not None:
            pt.labels = np.where(pt.boundary, pt.labels, pt.region.astype(np.int8)).astype(np.int8)
        return pt

    def in_x(self, x) -> bool:
        return tuple(int(v) for v in x) in self.index

    def idx_of(self, x) -> int:
        return self.index[tuple(int(v) for v in x)]

    def clear_cache(self):
        self._act_cache.clear()

    # -- policy -------------------------------------------------------------

    def act(self, m: int, x, costs: TransferCostSpec):
        """Optimal post-transfer state under the current region and values."""
        key = (m, tuple(int(v) for v in x))
        hit = self._act_cache.get(key)
        if hit is not None:
            return np.asarray(hit)
        y = self._solve_target(m, np.asarray(x, dtype=int), costs)
        self._act_cache[key] = tuple(int(v) for v in y)
        return y

    def _solve_target(self, m, x, costs):
        if not self.in_x(x):
            return x  # outside the truncated space: no action, logged
        pt = self.periods[m]
        idx = self.idx_of(x)
        if pt.region[idx] and not pt.boundary[idx]:
            return x
        n = int(x.sum())
        slice_idx = np.flatnonzero(self.states.sum(axis=1) == n)
        feas = slice_idx[pt.region[slice_idx]]
        if self.options.cap is not None:
            diffs = np.abs(self.states[feas] - x[None, :]).max(axis=1)
            feas = feas[diffs <= self.options.cap]
        cands = list(feas)
        if pt.boundary[idx] and idx not in cands:
            cands.append(idx)
        if not cands:
            self.iteration_log.append({"warning": "empty feasible set", "period": m, "state": x.tolist()})
            return x
        if self._oracle is None or self._oracle.costs is not costs:
            self._oracle = TransferCostOracle(costs)
        # staying wins ties, then the lexicographically smallest target
        stay_allowed = idx in cands
        best = pt.values[idx] if stay_allowed else np.inf
        best_y = x
        for i in cands:
            if i == idx:
                continue
            y = self.states[i]
            c = self._oracle((y - x).astype(float)) + pt.values[i]
            moved = not np.array_equal(best_y, x)
            if c < best - 1e-12 or (c <= best + 1e-12 and moved and tuple(y) < tuple(best_y)):
                best = min(best, c)
                best_y = y
        return np.asarray(best_y)

    def policy(self, costs: TransferCostSpec, clamp_period: bool = True):
        """Transfer-matrix policy for the simulator."""

        def fn(period, x):
            m = min(period, self.horizon - 1) if clamp_period else period
            y = self.act(m, x, costs)
            _, u = variable_transfer_cost((y - np.asarray(x)).astype(float), costs)
            return np.round(u).astype(int)

        return fn

    # -- persistence ----------------------------------------------------------

    def to_jsonable(self):
        return {
            "format": "api-policy/1",
            "p": self.options.p,
            "n_max": self.options.n_max,
            "horizon": self.horizon,
            "states": self.states.tolist(),
            "periods": [
                {
                    "values": [round(float(v), 10) for v in pt.values],
                    "counters": pt.counters.tolist(),
                    "labels": pt.labels.tolist(),
                    "region": pt.region.astype(int).tolist(),
                    "classifier": pt.model.to_jsonable(),
                }
                for pt in self.periods
            ],
            "iteration_log": self.iteration_log,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_jsonable(), fh, sort_keys=True)

    @classmethod
    def from_jsonable(cls, obj, options: ApiOptions | None = None):
        states = np.asarray(obj["states"], dtype=int)
        index = {tuple(s): k for k, s in enumerate(states.tolist())}
        options = options or ApiOptions(p=obj["p"], n_max=obj["n_max"])
        art = cls(states, index, options, obj["horizon"])
        for pt in obj["periods"]:
            table = PeriodTable(
                np.asarray(pt["values"], dtype=float),
                np.asarray(pt["counters"], dtype=int),
                np.asarray(pt["labels"], dtype=np.int8),
                clf.ClassifierModel.from_jsonable(pt["classifier"]),
            )
            table.region = np.asarray(pt["region"], dtype=bool)
            table.boundary = boundary_mask(states, index, table.region)
            art.periods.append(table)
        art.iteration_log = list(obj.get("iteration_log", []))
        return art

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_jsonable(json.load(fh))


def integer_states(n_queues: int, n_max: int) -> np.ndarray:
    if n_queues == 2:
        out = [(a, b) for a in range(n_max + 1) for b in range(n_max + 1 - a)]
    elif n_queues == 3:
        out = [
            (a, b, c)
            for a in range(n_max + 1)
            for b in range(n_max + 1 - a)
            for c in range(n_max + 1 - a - b)
        ]
    else:
        raise ValueError("exhaustive state enumeration supports N <= 3")
    return np.asarray(sorted(out), dtype=int)


def boundary_mask(states, index, region):
    """States whose inf-norm-1 neighborhood meets both the region and its complement."""
    n_q = states.shape[1]
    S = len(states)
    has_in = np.zeros(S, dtype=bool)
    has_out = np.zeros(S, dtype=bool)
    offsets = _neighbor_offsets(n_q)
    for k in range(S):
        for off in offsets:
            nb = tuple(states[k] + off)
            j = index.get(nb)
            if j is None:
                continue
            if region[j]:
                has_in[k] = True
            else:
                has_out[k] = True
            if has_in[k] and has_out[k]:
                break
    return has_in & has_out


def _neighbor_offsets(n_q):
    from itertools import product

    return [np.array(off) for off in product((-1, 0, 1), repeat=n_q)]


def initialize(model, costs, holding, options: ApiOptions, label_oracle=None) -> ApiPolicyArtifact:
    """Fluid-initialized artifact: values and stay labels from the fluid problem.

    Stored values are the fluid cost of *staying* for the period and then
    continuing optimally, from the backward-induction grid. On the
    no-transfer region this equals the fluid optimum; outside it upper-bounds
    it. The stay form is what the target optimization consumes, so exterior
    states cannot undervalue staying.

    Labels mark states where the fluid solution stays put. When a
    ``label_oracle`` (for example a TwoQueueFluidOracle over the exact
    discretized program) is supplied it decides the labels; otherwise the
    grid's own targets do. The oracle matters on instances whose fluid
    optimum separates stay from move by less than the grid resolution.
    """
    states = integer_states(model.n_queues, options.n_max)
    index = {tuple(s): k for k, s in enumerate(states.tolist())}
    art = ApiPolicyArtifact(states, index, options, model.horizon)
    grid = dp_value_grid(model, costs, holding, options.init_delta, float(options.n_max))
    for m in range(model.horizon):
        pg = grid.periods[m]
        values = np.empty(len(states))
        labels = np.zeros(len(states), dtype=np.int8)
        for k, s in enumerate(states):
            gidx = grid.idx_of(s.astype(float))
            values[k] = pg.stay_costs[gidx]
            if label_oracle is None:
                labels[k] = 1 if pg.targets[gidx] == gidx else 0
            else:
                labels[k] = 1 if label_oracle.stays(m, s) else 0
        table = PeriodTable(values, np.ones(len(states), dtype=int), labels)
        table.model = clf.train(
            states.astype(float), labels.astype(float), options.l2, options.blocks
        )
        art.periods.append(table)
        art.refresh_region(m)
    return art


# ---------------------------------------------------------------------------
# policy evaluation (Algorithm 2)
# ---------------------------------------------------------------------------


@dataclass
class EvaluationResult:
    l_obs: list  # per period: dict state_idx -> label
    v_obs: list  # per period: dict state_idx -> (sum, count)
    visited: list  # per period: set of state indices
    samples: list | None = None  # per period: dict state_idx -> [(run, value)]


def policy_evaluation(
    art: ApiPolicyArtifact,
    model: NetworkModel,
    costs: TransferCostSpec,
    holding,
    service,
    bundle: EventStreamBundle,
    record_samples: bool = False,
    run_offset: int = 0,
) -> EvaluationResult:
    """B CRN-coupled episodes from every state; costs collected backward.

    Episodes sharing a run index read the same per-period event streams, so
    any two that agree on a post-transfer state follow identical paths from
    then on; their value observations differ only by current transfer costs.
    ``run_offset`` shifts the run indices so successive iterations draw fresh
    randomness while remaining fully reproducible.
    """
    opt = art.options
    S = len(art.states)
    M = model.horizon
    N = model.n_queues
    res = EvaluationResult(
        [dict() for _ in range(M)], [dict() for _ in range(M)], [set() for _ in range(M)],
        [dict() for _ in range(M)] if record_samples else None,
    )
    all_exp = all(isinstance(s, ExponentialService) for s in service)
    art.clear_cache()

    def run_queue_period(x_states, tfree_cols, b, m, t0, t1):
        """One period of queue dynamics for a batch sharing run b's streams."""
        R = len(x_states)
        hold = np.zeros(R)
        for i in range(N):
            if all_exp:
                engine = _ExpQueueChunk(
                    bundle, [b], i, m, model.lam[i],
                    model.servers[i] * service[i].mu, t0, t1,
                )
                xv, stats = engine.run(
                    x_states[:, i].copy(), service[i].mu, int(model.servers[i]),
                    holding[i], None,
                )
            else:
                if not isinstance(holding[i], LinearHolding):
                    raise NotImplementedError("non-exponential training needs linear holding")
                engine = _G1QueueChunk(bundle, [b] * R, i, m, model.lam[i], t0, t1)
                xv, tf, stats = engine.run(
                    x_states[:, i].copy(), tfree_cols[:, i].copy(), service[i],
                    holding[i].rate, None,
                )
                tfree_cols[:, i] = tf
            x_states[:, i] = xv
            hold += stats["holding"]
        return hold

    def stay_shadow_values(starts, m0, b):
        """Suffix cost of staying at ``starts`` in period m0, policy afterwards.

        Uses the identical run-b substreams, so the shadow couples with the
        main episodes wherever states coincide.
        """
        xs = np.array(starts, dtype=int)
        tf = np.full((len(xs), N), -np.inf)
        total = np.zeros(len(xs))
        for m in range(m0, M):
            if m > m0:
                for r in range(len(xs)):
                    tgt = art.act(m, xs[r], costs)
                    z = (tgt - xs[r]).astype(float)
                    total[r] += transfer_costs_of(variable_transfer_cost(z, costs)[1], costs)
                    tf[r][tgt == 0] = -np.inf
                    xs[r] = tgt
            t0, t1 = m * model.tau, (m + 1) * model.tau
            total += run_queue_period(xs, tf, b, m, t0, t1)
        return total

    for b0 in range(opt.B):
        b = run_offset + b0
        x = art.states.copy()  # one episode per start state
        tfree = np.full((S, N), -np.inf)
        hold_track = np.zeros((M, S))
        tran_track = np.zeros((M, S))
        pre_idx = np.full((M, S), -1, dtype=int)
        post_idx = np.full((M, S), -1, dtype=int)
        for m in range(M):
            t0, t1 = m * model.tau, (m + 1) * model.tau
            y = x.copy()
            seen = {}
            for r in range(S):
                key = tuple(int(v) for v in x[r])
                hit = seen.get(key)
                if hit is None:
                    tgt = art.act(m, np.array(key), costs)
                    z = (tgt - np.array(key)).astype(float)
                    cost = transfer_costs_of(variable_transfer_cost(z, costs)[1], costs)
                    in_x = art.in_x(key)
                    hit = (tgt, cost, art.idx_of(key) if in_x else -1,
                           art.idx_of(tgt) if art.in_x(tgt) else -1)
                    seen[key] = hit
                tgt, cost, i_pre, i_post = hit
                y[r] = tgt
                tran_track[m, r] = cost
                pre_idx[m, r] = i_pre
                post_idx[m, r] = i_post
            # a transfer that empties a queue removes its in-service customer
            tfree[y == 0] = -np.inf
            x = y
            hold_track[m] += run_queue_period(x, tfree, b, m, t0, t1)
        # backward pass: post-decision suffix costs attach to post-transfer
        # states (the values Eq-18 consumes); pre-states that moved only
        # contribute their label
        suffix = np.zeros(S)
        for m in range(M - 1, -1, -1):
            suffix = suffix + hold_track[m] + tran_track[m]
            for r in range(S):
                ip, io = pre_idx[m, r], post_idx[m, r]
                if ip >= 0:
                    res.l_obs[m][ip] = 1 if ip == io else 0
                    res.visited[m].add(ip)
                if io >= 0:
                    s_, c_ = res.v_obs[m].get(io, (0.0, 0))
                    res.v_obs[m][io] = (s_ + suffix[r] - tran_track[m, r], c_ + 1)
                    if io != ip:
                        res.l_obs[m][io] = 1  # staying at a chosen target is optimal
                    res.visited[m].add(io)
                    if res.samples is not None:
                        res.samples[m].setdefault(io, []).append(
                            (b, float(suffix[r] - tran_track[m, r]))
                        )
        # stay-shadows: moved boundary states get an honest stay-value sample
        for m in range(M):
            moved = {}
            for r in range(S):
                ip, io = pre_idx[m, r], post_idx[m, r]
                if ip >= 0 and ip != io and art.periods[m].boundary[ip]:
                    moved.setdefault(ip, art.states[ip])
            if not moved:
                continue
            idxs = list(moved)
            vals = stay_shadow_values([moved[i] for i in idxs], m, b)
            for i, v in zip(idxs, vals):
                s_, c_ = res.v_obs[m].get(i, (0.0, 0))
                res.v_obs[m][i] = (s_ + float(v), c_ + 1)
    return res


# ---------------------------------------------------------------------------
# policy improvement (Algorithm 1 step 3)
# ---------------------------------------------------------------------------


def policy_improvement(
    art: ApiPolicyArtifact,
    obs: EvaluationResult,
    costs: TransferCostSpec,
) -> dict:
    opt = art.options
    log = {"flips": [], "rollbacks": []}
    for m in range(art.horizon):
        pt = art.periods[m]
        old_labels = pt.labels.copy()
        old_model = pt.model
        old_region = pt.region.copy()
        old_boundary = pt.boundary.copy()
        prev = (old_region, old_boundary)
        visited = obs.visited[m]
        for idx, (s, c) in obs.v_obs[m].items():
            u = pt.counters[idx]
            pt.values[idx] = u / (u + 1) * pt.values[idx] + (s / c) / (u + 1)
            pt.counters[idx] = u + 1
        interior = pt.region & ~pt.boundary
        exterior = ~pt.region & ~pt.boundary
        new_labels = pt.labels.copy()
        for idx in visited:
            if pt.boundary[idx]:
                new_labels[idx] = obs.l_obs[m][idx]
        new_labels[interior] = 1  # frozen by construction; kept as explicit rule
        new_labels[exterior] = 0
        pt.labels = new_labels
        pt.model = clf.train(
            art.states.astype(float), pt.labels.astype(float), opt.l2, opt.blocks
        )
        art.refresh_region(m, prev)
        art.clear_cache()
        ok, witness = connectedness_check(art, m, costs)
        if not ok:
            # roll back this iteration's label flips on the violating slice
            slice_n = witness["slice"]
            mask = art.states.sum(axis=1) == slice_n
            pt.labels[mask] = old_labels[mask]
            pt.model = clf.train(
                art.states.astype(float), pt.labels.astype(float), opt.l2, opt.blocks
            )
            art.refresh_region(m, prev)
            art.clear_cache()
            ok2, _ = connectedness_check(art, m, costs)
            if not ok2:
                pt.labels = old_labels
                pt.model = old_model
                pt.region = old_region
                pt.boundary = old_boundary
                art.clear_cache()
            log["rollbacks"].append({"period": m, "slice": int(slice_n), "full": not ok2})
        log["flips"].append(int(np.sum(pt.labels != old_labels)))
    return log


def connectedness_check(art: ApiPolicyArtifact, m: int, costs) -> tuple:
    """Monotone boundary labels along every outer-boundary-to-target segment,
    plus lattice connectedness of each region slice.

    The feasibility program reduces to a direct scan because all quantities
    are fixed: the label sequence 1{g(z_d) >= p} must be non-decreasing in d.
    """
    pt = art.periods[m]
    outer = np.flatnonzero(pt.boundary & ~pt.region)
    for idx in outer:
        x = art.states[idx]
        y = art.act(m, x, costs)
        if np.array_equal(y, x):
            continue
        D = int(4 * np.abs(y - x).max())
        pts = x[None, :] + np.linspace(0.0, 1.0, D + 1)[:, None] * (y - x)[None, :]
        labels = pt.model.predict_many(pts) >= art.options.p
        if np.any(labels[:-1] & ~labels[1:]):
            return False, {"slice": int(x.sum()), "state": x.tolist(), "path": pts.tolist()}
    totals = art.states.sum(axis=1)
    for n in np.unique(totals):
        mask = (totals == n) & pt.region
        if mask.sum() <= 1:
            continue
        if not _lattice_connected(art.states[mask]):
            return False, {"slice": int(n), "state": None, "path": None}
    return True, {}


def _lattice_connected(members) -> bool:
    cells = {tuple(s) for s in members.tolist()}
    n_q = members.shape[1]
    start = next(iter(cells))
    seen = {start}
    stack = [start]
    while stack:
        cur = stack.pop()
        for i in range(n_q):
            for j in range(n_q):
                if i == j:
                    continue
                nxt = list(cur)
                nxt[i] += 1
                nxt[j] -= 1
                nxt = tuple(nxt)
                if nxt in cells and nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
    return len(seen) == len(cells)


def train_api(
    model: NetworkModel,
    costs: TransferCostSpec,
    holding,
    service,
    options: ApiOptions,
    label_oracle=None,
) -> ApiPolicyArtifact:
    """Full learner: fluid initialization plus j_max evaluate/improve rounds."""
    art = initialize(model, costs, holding, options, label_oracle)
    bundle = EventStreamBundle(options.seed)
    for j in range(options.j_max):
        obs = policy_evaluation(
            art, model, costs, holding, service, bundle, run_offset=j * options.B
        )
        log = policy_improvement(art, obs, costs)
        art.iteration_log.append(
            {
                "iteration": j + 1,
                "label_flips": log["flips"],
                "rollbacks": log["rollbacks"],
                "visited": [len(v) for v in obs.visited],
            }
        )
    return art
