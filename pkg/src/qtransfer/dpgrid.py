"""Backward-induction value grids on the simplex lattice (two or three queues).

The value function of the fluid control problem is computed on a lattice of
spacing ``delta`` covering all states with total mass up to ``n_max``. At
each grid state the minimization over post-transfer states runs over the
same-total grid slice, with the next-period value interpolated
multilinearly. This grid DP is the small-dimension oracle used to extract
no-transfer regions, two-queue threshold parameters, and stationary policy
tables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dynamics import fluid_transition_vec, holding_cost_linear_vec, holding_cost_period
from .model import (
    InvariantViolation,
    JointSetup,
    LinearHolding,
    NetworkModel,
    TransferCostSpec,
    UnsupportedDimensionError,
)
from .transport import TransferCostOracle

REGION_TOL = 1e-7  # staying is in-region when within this of the slice optimum


@dataclass
class PeriodGrid:
    values: np.ndarray  # per state
    stay_costs: np.ndarray
    targets: np.ndarray  # state index of the optimal post-transfer state (self if staying)


@dataclass
class FluidPolicyArtifact:
    """Per-period value grids and target maps over the simplex lattice."""

    delta: float
    n_max: float
    states: np.ndarray  # (S, N) lattice coordinates in grid units
    index: dict
    periods: list
    model_meta: dict = field(default_factory=dict)

    @property
    def n_queues(self) -> int:
        return self.states.shape[1]

    def state_of(self, idx: int) -> np.ndarray:
        return self.states[idx] * self.delta

    def idx_of(self, x) -> int:
        key = tuple(int(round(v / self.delta)) for v in np.asarray(x))
        return self.index[key]

    def slice_indices(self, total_units: int) -> np.ndarray:
        return np.flatnonzero(self.states.sum(axis=1) == total_units)

    def in_region(self, period: int, idx: int) -> bool:
        pg = self.periods[period]
        return pg.stay_costs[idx] <= pg.values[idx] + REGION_TOL

    def target_state(self, period: int, x) -> np.ndarray:
        idx = self.idx_of(x)
        return self.state_of(self.periods[period].targets[idx])

    def to_jsonable(self):
        return {
            "format": "fluid-policy-grid/1",
            "grid_spacing": self.delta,
            "n_max": self.n_max,
            "states": self.states.tolist(),
            "periods": [
                {
                    "values": [round(float(v), 12) for v in pg.values],
                    "stay_costs": [round(float(v), 12) for v in pg.stay_costs],
                    "targets": {
                        str(i): int(t)
                        for i, t in enumerate(pg.targets)
                        if t != i
                    },
                }
                for pg in self.periods
            ],
            "model": self.model_meta,
        }

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_jsonable(), fh, sort_keys=True)

    @classmethod
    def from_jsonable(cls, obj) -> "FluidPolicyArtifact":
        states = np.asarray(obj["states"], dtype=int)
        index = {tuple(s): k for k, s in enumerate(states.tolist())}
        periods = []
        for pg in obj["periods"]:
            values = np.asarray(pg["values"], dtype=float)
            stay = np.asarray(pg["stay_costs"], dtype=float)
            targets = np.arange(len(values))
            for k, t in pg["targets"].items():
                targets[int(k)] = t
            periods.append(PeriodGrid(values, stay, targets))
        return cls(obj["grid_spacing"], obj["n_max"], states, index, periods, obj.get("model", {}))

    @classmethod
    def load(cls, path) -> "FluidPolicyArtifact":
        with open(path) as fh:
            return cls.from_jsonable(json.load(fh))


def _lattice_states(n_queues: int, k_top: int) -> np.ndarray:
    if n_queues == 2:
        out = [(a, b) for a in range(k_top + 1) for b in range(k_top + 1 - a)]
    elif n_queues == 3:
        out = [
            (a, b, c)
            for a in range(k_top + 1)
            for b in range(k_top + 1 - a)
            for c in range(k_top + 1 - a - b)
        ]
    else:
        raise UnsupportedDimensionError("grid DP supports two or three queues")
    return np.asarray(sorted(out), dtype=int)


def _holding_tables(model, holding, k_top, delta, period):
    """Per-queue holding cost of one period at each lattice coordinate."""
    coords = np.arange(k_top + 1) * delta
    tables = []
    zero_specs = [LinearHolding(0.0)] * model.n_queues
    for i in range(model.n_queues):
        spec = holding[i]
        if isinstance(spec, LinearHolding):
            tables.append(holding_cost_linear_vec(coords, model, i, period, spec.rate))
        else:
            specs = list(zero_specs)
            specs[i] = spec
            vals = [
                holding_cost_period(np.eye(model.n_queues)[i] * c, model, specs, period)
                for c in coords
            ]
            tables.append(np.asarray(vals))
    return np.stack(tables)


def _transition_tables(model, k_top, delta, period):
    coords = np.arange(k_top + 1) * delta
    return np.stack(
        [fluid_transition_vec(coords, model, i, period) for i in range(model.n_queues)]
    )


def _interp_next(values_dense, fcoords, delta, k_top):
    """Multilinear interpolation of the next-period dense value array."""
    S, N = fcoords.shape
    g = np.clip(fcoords / delta, 0.0, k_top - 1e-9)
    base = np.floor(g).astype(int)
    frac = g - base
    out = np.zeros(S)
    for corner in range(1 << N):
        idx = base.copy()
        wt = np.ones(S)
        for d in range(N):
            if corner >> d & 1:
                idx[:, d] += 1
                wt *= frac[:, d]
            else:
                wt *= 1.0 - frac[:, d]
        out += wt * values_dense[tuple(idx.T)]
    return out


def _dense_from_flat(values, states, k_top, n_queues, fill):
    dense = np.full((k_top + 1,) * n_queues, fill)
    dense[tuple(states.T)] = values
    return dense


class _SliceMinimizer:
    """Per-slice minimization of stay/move costs with memoized transfer costs."""

    def __init__(self, states, delta, costs: TransferCostSpec):
        self.states = states
        self.delta = delta
        self.costs = costs
        self.oracle = TransferCostOracle(costs)
        self.joint_pair = isinstance(costs.setup, JointSetup) and states.shape[1] == 2
        self._move_cache = {}

    def move_cost(self, dx_units):
        key = tuple(int(v) for v in dx_units)
        hit = self._move_cache.get(key)
        if hit is None:
            hit = self.oracle(np.asarray(key, dtype=float) * self.delta)
            self._move_cache[key] = hit
        return hit

    def minimize_slice(self, slice_idx, stay):
        """Values, targets for one slice given per-state stay costs."""
        n_states = len(slice_idx)
        values = stay.copy()
        targets = slice_idx.copy()
        if n_states == 1:
            return values, targets
        if self.joint_pair:
            return self._minimize_pair_joint(slice_idx, stay)
        sub = self.states[slice_idx]
        for a in range(n_states):
            best = stay[a]
            best_t = slice_idx[a]
            best_key = (0.0,) + tuple(sub[a])
            for b in range(n_states):
                if b == a:
                    continue
                c = stay[b] + self.move_cost(sub[b] - sub[a])
                # ties resolve to the smallest transfer, then lexicographically
                key = (float(np.abs(sub[b] - sub[a]).sum()),) + tuple(sub[b])
                if c < best - 1e-12 or (c <= best + 1e-12 and best_t != slice_idx[a] and key < best_key):
                    best = min(best, c)
                    best_t = slice_idx[b]
                    best_key = key
            values[a] = best
            targets[a] = best_t
        return values, targets

    def pair_joint_values(self, stay):
        """Vectorized slice values for two queues under a joint setup.

        Moving along the slice changes x1 only; the variable cost per grid
        step is r21 when raising x1 (queue 2 sends) and r12 when lowering it.
        Prefix minima over ``stay`` shifted by the linear ramps give the best
        move cost in one pass each way.
        """
        r = self.costs.variable
        K = self.costs.setup.cost
        d = self.delta
        n = len(stay)
        k = np.arange(n, dtype=float)
        r21 = r[1, 0] * d
        r12 = r[0, 1] * d
        below = np.full(n, np.inf)
        if n > 1:
            run = np.minimum.accumulate(stay - r12 * k)
            below[1:] = run[:-1] + r12 * k[1:]
        above = np.full(n, np.inf)
        if n > 1:
            rev = (stay + r21 * k)[::-1]
            run = np.minimum.accumulate(rev)[::-1]
            above[:-1] = run[1:] - r21 * k[:-1]
        move = np.minimum(below, above) + K
        return np.minimum(stay, move), move

    def _minimize_pair_joint(self, slice_idx, stay):
        values, move = self.pair_joint_values(stay)
        targets = slice_idx.copy()
        r = self.costs.variable
        K = self.costs.setup.cost
        d = self.delta
        n = len(stay)
        need = move < stay - 1e-12
        for a in np.flatnonzero(need):
            # among tied optima take the smallest transfer, then smallest y1
            best = move[a]
            k = np.arange(n)
            rate = np.where(k > a, r[1, 0], r[0, 1]) * d
            cost = stay + rate * np.abs(k - a) + K
            cost[a] = np.inf
            cands = np.flatnonzero(cost <= best + 1e-12)
            pick = cands[np.lexsort((cands, np.abs(cands - a)))[0]]
            targets[a] = slice_idx[int(pick)]
            values[a] = best
        return values, targets


def _growth_pad(model, delta):
    pad = 0.0
    for m in range(model.horizon):
        for i in range(model.n_queues):
            a, b = model.period_window(m)
            drift = model.lam[i].integral(a, b) - model.effective_mu[i] * model.tau
            pad += max(drift, 0.0)
    return int(np.ceil(pad / delta))


def dp_value_grid(
    model: NetworkModel,
    costs: TransferCostSpec,
    holding,
    delta: float,
    n_max: float,
) -> FluidPolicyArtifact:
    """Exact backward induction over the simplex lattice for N <= 3 queues."""
    if model.n_queues > 3:
        raise UnsupportedDimensionError("grid DP supports at most three queues")
    if delta <= 0:
        raise ValueError("delta must be positive")
    k_max = int(round(n_max / delta))
    k_top = k_max + _growth_pad(model, delta) + model.n_queues
    states = _lattice_states(model.n_queues, k_top)
    index = {tuple(s): k for k, s in enumerate(states.tolist())}
    totals = states.sum(axis=1)
    slices = [np.flatnonzero(totals == n) for n in range(k_top + 1)]
    minimizer = _SliceMinimizer(states, delta, costs)

    v_next = np.zeros(len(states))
    periods = []
    for m in range(model.horizon - 1, -1, -1):
        h_tab = _holding_tables(model, holding, k_top, delta, m)
        f_tab = _transition_tables(model, k_top, delta, m)
        dense = _dense_from_flat(v_next, states, k_top, model.n_queues, np.nan)
        _fill_dense_monotone(dense)
        fcoords = np.stack([f_tab[i][states[:, i]] for i in range(model.n_queues)], axis=1)
        stay = np.zeros(len(states))
        for i in range(model.n_queues):
            stay += h_tab[i][states[:, i]]
        stay += _interp_next(dense, fcoords, delta, k_top)
        values = np.empty_like(stay)
        targets = np.arange(len(states))
        for sl in slices:
            v, t = minimizer.minimize_slice(sl, stay[sl])
            values[sl] = v
            targets[sl] = t
        periods.append(PeriodGrid(values, stay.copy(), targets))
        v_next = values
    periods.reverse()

    keep = totals <= k_max
    remap = -np.ones(len(states), dtype=int)
    remap[keep] = np.arange(int(keep.sum()))
    kept_states = states[keep]
    kept_periods = []
    for pg in periods:
        t = remap[pg.targets[keep]]
        own = remap[np.flatnonzero(keep)]
        t = np.where(t >= 0, t, own)  # targets never leave the slice, so always kept
        kept_periods.append(PeriodGrid(pg.values[keep], pg.stay_costs[keep], t))
    meta = {
        "n_queues": model.n_queues,
        "tau": model.tau,
        "horizon": model.horizon,
    }
    return FluidPolicyArtifact(
        delta,
        k_max * delta,
        kept_states,
        {tuple(s): k for k, s in enumerate(kept_states.tolist())},
        kept_periods,
        meta,
    )


def _fill_dense_monotone(dense):
    """Extend values across the unreachable corner (total > k_top).

    Interpolation corners can poke past the stored triangle; cells there take
    the value of the nearest stored state toward the diagonal, which keeps
    interpolation finite and monotone at the boundary.
    """
    k_top = dense.shape[0] - 1
    if dense.ndim == 2:
        for i in range(k_top + 1):
            lim = k_top - i
            if lim < k_top:
                dense[i, lim + 1 :] = dense[i, lim]
        return
    for i in range(k_top + 1):
        plane = dense[i]
        sub_top = k_top - i
        for j in range(sub_top + 1):
            lim = sub_top - j
            if lim < k_top:
                plane[j, lim + 1 :] = plane[j, lim]
        if sub_top < k_top:
            plane[sub_top + 1 :, :] = plane[sub_top, :]


def extract_region(artifact: FluidPolicyArtifact, n: float, period: int):
    """Grid states of the no-transfer region slice at total mass ``n``.

    Returns (states array in mass units, connected flag). Raises when the
    slice region is empty, which would contradict its guaranteed
    non-emptiness.
    """
    units = int(round(n / artifact.delta))
    sl = artifact.slice_indices(units)
    if sl.size == 0:
        raise ValueError(f"total mass {n} outside the grid")
    flags = np.array([artifact.in_region(period, int(i)) for i in sl])
    if not flags.any():
        raise InvariantViolation(f"empty no-transfer region on slice n={n}")
    members = artifact.states[sl[flags]]
    return members * artifact.delta, _slice_connected(members)


def _slice_connected(members) -> bool:
    """Lattice connectedness within a slice: steps move one unit between queues."""
    if len(members) <= 1:
        return True
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


def region_to_csv(artifact: FluidPolicyArtifact, period: int, n: float, path):
    units = int(round(n / artifact.delta))
    sl = artifact.slice_indices(units)
    cols = [f"x{i + 1}" for i in range(artifact.n_queues)]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["period"] + cols + ["in_region"]) + "\n")
        for i in sl:
            x = artifact.state_of(int(i))
            flag = int(artifact.in_region(period, int(i)))
            fh.write(",".join([str(period)] + [f"{v:.6g}" for v in x] + [str(flag)]) + "\n")


@dataclass
class ThresholdParams:
    s1: float
    S1: float
    s2: float
    S2: float
    structure_ok: bool = True


def extract_sS(artifact: FluidPolicyArtifact, n: float, period: int) -> ThresholdParams:
    """Two-queue re-order / order-up-to parameters on the slice of total ``n``."""
    if artifact.n_queues != 2:
        raise UnsupportedDimensionError("threshold extraction needs exactly two queues")
    units = int(round(n / artifact.delta))
    if units == 0:
        return ThresholdParams(0.0, 0.0, 0.0, 0.0)
    sl = artifact.slice_indices(units)
    order = np.argsort(artifact.states[sl, 0])
    sl = sl[order]
    d = artifact.delta
    in_reg = np.array([artifact.in_region(period, int(i)) for i in sl])
    pg = artifact.periods[period]

    structure_ok = True
    # receiving targets for queue 1: states below the region with x1 raised
    s1 = float(np.flatnonzero(in_reg)[0]) * d
    s2 = float(len(sl) - 1 - np.flatnonzero(in_reg)[-1]) * d
    up1 = set()
    up2 = set()
    for k, i in enumerate(sl):
        if in_reg[k]:
            continue
        tgt = artifact.states[pg.targets[int(i)]]
        cur = artifact.states[int(i)]
        if tgt[0] > cur[0]:
            up1.add(int(tgt[0]))
        elif tgt[1] > cur[1]:
            up2.add(int(tgt[1]))
        else:
            structure_ok = False
    if len(up1) > 1 or len(up2) > 1:
        structure_ok = False
    S1 = max(up1) * d if up1 else s1
    S2 = max(up2) * d if up2 else s2
    return ThresholdParams(s1, S1, s2, S2, structure_ok)


def stationary_policy_table(
    model: NetworkModel,
    costs: TransferCostSpec,
    holding,
    delta: float,
    n_max: float,
    tol: float = 1e-6,
    max_iter: int = 100000,
):
    """Converged infinite-horizon value grid and targets for stationary rates.

    Backward induction is iterated with the period-0 data until the value
    grid stabilizes; the resulting single-period policy is stationary. Used
    as the fluid benchmark policy in continuous-control comparisons.
    """
    if model.n_queues > 3:
        raise UnsupportedDimensionError("grid DP supports at most three queues")
    k_top = int(round(n_max / delta)) + _growth_pad(model, delta) + model.n_queues
    states = _lattice_states(model.n_queues, k_top)
    totals = states.sum(axis=1)
    slices = [np.flatnonzero(totals == n) for n in range(k_top + 1)]
    minimizer = _SliceMinimizer(states, delta, costs)
    h_tab = _holding_tables(model, holding, k_top, delta, 0)
    f_tab = _transition_tables(model, k_top, delta, 0)
    fcoords = np.stack([f_tab[i][states[:, i]] for i in range(model.n_queues)], axis=1)
    h_sum = np.zeros(len(states))
    for i in range(model.n_queues):
        h_sum += h_tab[i][states[:, i]]

    v = np.zeros(len(states))
    for it in range(max_iter):
        dense = _dense_from_flat(v, states, k_top, model.n_queues, np.nan)
        _fill_dense_monotone(dense)
        stay = h_sum + _interp_next(dense, fcoords, delta, k_top)
        new_v = np.empty_like(v)
        for sl in slices:
            if minimizer.joint_pair:
                new_v[sl] = minimizer.pair_joint_values(stay[sl])[0]
            else:
                new_v[sl] = minimizer.minimize_slice(sl, stay[sl])[0]
        diff = float(np.max(np.abs(new_v - v)))
        v = new_v
        if diff <= tol:
            break
    # one final sweep recovers the stationary targets
    dense = _dense_from_flat(v, states, k_top, model.n_queues, np.nan)
    _fill_dense_monotone(dense)
    stay = h_sum + _interp_next(dense, fcoords, delta, k_top)
    targets = np.arange(len(states))
    for sl in slices:
        nv, nt = minimizer.minimize_slice(sl, stay[sl])
        v[sl] = nv
        targets[sl] = nt
    index = {tuple(s): k for k, s in enumerate(states.tolist())}
    art = FluidPolicyArtifact(
        delta,
        k_top * delta,
        states,
        index,
        [PeriodGrid(v, stay.copy(), targets.copy())],
        {"stationary": True, "iterations": it + 1},
    )
    return art
