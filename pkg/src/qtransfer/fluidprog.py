"""Discretized fluid control problem and its exact solvers.

The continuous fluid control problem is discretized with L fixed-width
intervals per period. Within a period the interval states follow the
unclamped drift chain; auxiliary variables take positive parts, and the
holding cost applies to interval midpoints. Setup costs enter through
indicator variables, making the program a mixed-integer LP.

Two equivalent formulations are provided:

* ``chain``: one variable per interval state, constraints written exactly as
  the discretized program prescribes. Kept as the reference formulation.
* ``reduced``: interval chains are eliminated into per-period convex
  piecewise-linear holding and end-state functions of the post-transfer
  state. Same optimum, far fewer rows; the production path.

Joint setups with few periods are solved by exhaustive enumeration of the
per-period transfer/no-transfer patterns; everything else by branch and
bound on the setup indicators with LP relaxations.
"""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import fluid_transition, holding_cost_period
from .model import (
    GeneralSetup,
    JointSetup,
    NetworkModel,
    TransferCostSpec,
    check_state,
    net_transfer,
)
from .simplex import INF, OPTIMAL, LinearProgram


@dataclass
class SolverOptions:
    intervals_per_period: int = 50  # L
    holding_pieces: int = 8  # J, when pre-approximating smooth convex holding
    transfer_cap: float | None = None  # per-queue |net| bound per period
    backend: str = "auto"  # auto | enumeration | bnb
    formulation: str = "reduced"  # reduced | chain
    integer_tol: float = 1e-6
    gap_tol: float = 1e-7


@dataclass
class FluidSolution:
    status: str
    objective: float
    transfers: np.ndarray  # (M, N, N)
    pre_states: np.ndarray  # (M, N)
    post_states: np.ndarray  # (M, N)
    holding_cost: float
    transfer_cost: float
    nodes: int = 0


class _PeriodData:
    """Per (period, queue) drift chain and exact PWL holding/end-state maps."""

    def __init__(self, model: NetworkModel, holding, L: int):
        self.L = L
        self.model = model
        M, N = model.horizon, model.n_queues
        step = model.tau / L
        self.cum = np.zeros((M, N, L + 1))
        for m in range(M):
            a, _ = model.period_window(m)
            for i in range(N):
                mu_eff = model.effective_mu[i]
                drifts = [
                    (model.lam[i].average(a + l * step, a + (l + 1) * step) - mu_eff) * step
                    for l in range(L)
                ]
                self.cum[m, i, 1:] = np.cumsum(drifts)
        self.holding = holding
        self._pwl_cache = {}

    def holding_pwl(self, m: int, i: int, x0_i: float | None):
        """Convex PWL map y0 -> discretized holding cost of period m, queue i.

        ``x0_i`` is the pre-transfer state used as the left endpoint of the
        first interval in period 0 (the program's initial-condition quirk);
        None for later periods. Results are cached per (period, queue, x0).
        """
        key = (m, i, None if x0_i is None else round(float(x0_i), 9))
        hit = self._pwl_cache.get(key)
        if hit is not None:
            return hit
        L = self.L
        step = self.model.tau / L
        cum = self.cum[m, i]
        spec = self.holding[i]
        crossings = _piece_crossings(spec)

        kinks = {0.0}
        for l in range(1, L + 1):
            if x0_i is not None and l == 1:
                # midpoint is (x0 + (y0+cum1)^+)/2
                kinks.add(-cum[1])
                for c in crossings:
                    kinks.add(2 * c - x0_i - cum[1])
            else:
                a, b = cum[l - 1], cum[l]
                kinks.add(-a)
                kinks.add(-b)
                for c in crossings:
                    # solve (y+a)^+ + (y+b)^+ = 2c on each linear regime
                    kinks.add(2 * c - a - b)
                    kinks.add(2 * c - a)
                    kinks.add(2 * c - b)
        pts = sorted(k for k in kinks if k >= -1e-12)
        if not pts or pts[0] > 1e-12:
            pts.insert(0, 0.0)
        pts.append(pts[-1] + 1.0)  # final chord extends with the terminal slope

        def G(y0):
            prev = x0_i if x0_i is not None else max(y0, 0.0)
            total = 0.0
            for l in range(1, L + 1):
                cur = max(y0 + cum[l], 0.0)
                total += float(spec.cost(0.5 * (prev + cur)))
                prev = cur
            return step * total

        vals = [G(p) for p in pts]
        pieces = _chords(pts, vals)
        self._pwl_cache[key] = pieces
        return pieces

    def end_kink(self, m: int, i: int):
        """End state is max(y0 + total_drift, 0)."""
        return float(self.cum[m, i, -1])

    def discretized_objective(self, x0, costs: TransferCostSpec, transfers):
        """Exact discretized-program objective of a given transfer schedule."""
        model = self.model
        L, step = self.L, self.model.tau / self.L
        x_pre = np.asarray(x0, dtype=float).copy()
        holding = 0.0
        transfer = 0.0
        for m in range(model.horizon):
            u = transfers[m]
            transfer += float(np.sum(costs.variable * u)) + costs.setup.of_matrix(u)
            y0 = x_pre + net_transfer(u)
            nxt = np.empty_like(x_pre)
            for i in range(model.n_queues):
                cum = self.cum[m, i]
                prev = x_pre[i] if m == 0 else max(y0[i], 0.0)
                for l in range(1, L + 1):
                    cur = max(y0[i] + cum[l], 0.0)
                    holding += step * float(self.holding[i].cost(0.5 * (prev + cur)))
                    prev = cur
                nxt[i] = max(y0[i] + cum[L], 0.0)
            x_pre = nxt
        return holding + transfer, holding, transfer


def _piece_crossings(spec):
    pieces = spec.pieces()
    out = []
    for (a1, b1), (a2, b2) in zip(pieces, pieces[1:]):
        out.append((b1 - b2) / (a2 - a1))
    return out


def _chords(pts, vals):
    """Epigraph pieces (slope, intercept) of the PWL function through points."""
    pieces = []
    for (p0, v0), (p1, v1) in zip(zip(pts, vals), zip(pts[1:], vals[1:])):
        if p1 - p0 < 1e-12:
            continue
        slope = (v1 - v0) / (p1 - p0)
        pieces.append((slope, v0 - slope * p0))
    if not pieces:
        pieces.append((0.0, vals[0]))
    # extend beyond the last point with the final slope; dedupe near-equal slopes
    out = [pieces[0]]
    for s, b in pieces[1:]:
        if abs(s - out[-1][0]) > 1e-12 or abs(b - out[-1][1]) > 1e-12:
            out.append((s, b))
    return out


class _ProgramVars:
    def __init__(self):
        self.u = {}
        self.v = {}
        self.v0 = {}
        self.y0 = {}
        self.w = {}


def _eval_pwl(pieces, y):
    """Value and index of the binding piece of a convex max-of-affines."""
    best, arg = -np.inf, 0
    for k, (a, b) in enumerate(pieces):
        v = a * y + b
        if v > best:
            best, arg = v, k
    return best, arg


def _arc_big_m(x0, options: SolverOptions, n: int) -> float:
    big = float(np.sum(x0))
    if options.transfer_cap is not None:
        big = min(big, options.transfer_cap * max(n - 1, 1))
    return big


def _build_program(
    x0,
    model: NetworkModel,
    costs: TransferCostSpec,
    data: _PeriodData,
    options: SolverOptions,
    pattern=None,
    setup_relax=None,
    piece_subset=None,
):
    """Assemble the LP.

    pattern: per-period booleans for joint-setup enumeration (None = allow all).
    setup_relax: dict of fixings for indicator variables in branch and bound;
        indicators not present are relaxed to [0, 1].
    piece_subset: per (m, i), indices of holding chords included so far (row
        generation); None includes every chord.
    """
    M, N = model.horizon, model.n_queues
    lp = LinearProgram()
    vars = _ProgramVars()
    chain = options.formulation == "chain"
    L = data.L
    total_mass = float(np.sum(x0))
    y_hi = total_mass + float(np.sum(np.clip(data.cum[:, :, -1], 0.0, None))) + 1.0

    for m in range(M):
        allowed = pattern is None or pattern[m]
        for i in range(N):
            for j in range(N):
                if i == j:
                    continue
                ub = 0.0 if not allowed else INF
                vars.u[(m, i, j)] = lp.add_var(
                    f"u[{m},{i},{j}]", 0.0, ub, float(costs.variable[i, j])
                )

    # setup indicator variables for the relaxation path
    if setup_relax is not None:
        if isinstance(costs.setup, JointSetup):
            for m in range(M):
                fix = setup_relax.get(("v", m))
                lo, hi = (fix, fix) if fix is not None else (0.0, 1.0)
                vars.v0[m] = lp.add_var(f"v[{m}]", lo, hi, costs.setup.cost)
        else:
            for m in range(M):
                if costs.setup.base > 0:
                    fix = setup_relax.get(("v0", m))
                    lo, hi = (fix, fix) if fix is not None else (0.0, 1.0)
                    vars.v0[m] = lp.add_var(f"v0[{m}]", lo, hi, costs.setup.base)
                for i in range(N):
                    for j in range(N):
                        if i == j or costs.setup.arc[i, j] == 0:
                            continue
                        fix = setup_relax.get(("v", m, i, j))
                        lo, hi = (fix, fix) if fix is not None else (0.0, 1.0)
                        vars.v[(m, i, j)] = lp.add_var(
                            f"v[{m},{i},{j}]", lo, hi, float(costs.setup.arc[i, j])
                        )
        big = _arc_big_m(x0, options, N)
        for m in range(M):
            for i in range(N):
                for j in range(N):
                    if i == j:
                        continue
                    uij = vars.u[(m, i, j)]
                    if (m, i, j) in vars.v:
                        lp.add_constraint({uij: 1.0, vars.v[(m, i, j)]: -big}, "<", 0.0)
                    if m in vars.v0:
                        lp.add_constraint({uij: 1.0, vars.v0[m]: -big}, "<", 0.0)
                    if (m, i, j) in vars.v and m in vars.v0:
                        lp.add_constraint(
                            {vars.v[(m, i, j)]: 1.0, vars.v0[m]: -1.0}, "<", 0.0
                        )

    def net_coefs(m, i, sign=1.0):
        coefs = {}
        for j in range(N):
            if j == i:
                continue
            coefs[vars.u[(m, j, i)]] = coefs.get(vars.u[(m, j, i)], 0.0) + sign
            coefs[vars.u[(m, i, j)]] = coefs.get(vars.u[(m, i, j)], 0.0) - sign
        return coefs

    if chain:
        _add_chain_rows(lp, vars, x0, model, costs, data, options, net_coefs, y_hi)
    else:
        _add_reduced_rows(lp, vars, x0, model, costs, data, options, net_coefs, piece_subset)
    return lp, vars


def _add_reduced_rows(lp, vars, x0, model, costs, data, options, net_coefs, piece_subset):
    M, N = model.horizon, model.n_queues
    y0 = {}
    xpre = {}
    for m in range(M):
        for i in range(N):
            y0[(m, i)] = lp.add_var(f"y0[{m},{i}]", 0.0, INF, 0.0)
            if m >= 1:
                xpre[(m, i)] = lp.add_var(f"x[{m},{i}]", 0.0, INF, 0.0)
            w = lp.add_var(f"w[{m},{i}]", 0.0, INF, 1.0)
            vars.y0[(m, i)] = y0[(m, i)]
            vars.w[(m, i)] = w
            pieces = data.holding_pwl(m, i, float(x0[i]) if m == 0 else None)
            subset = range(len(pieces)) if piece_subset is None else sorted(piece_subset[(m, i)])
            for k in subset:
                slope, intercept = pieces[k]
                lp.add_constraint({w: 1.0, y0[(m, i)]: -slope}, ">", intercept)

    for m in range(M):
        for i in range(N):
            coefs = net_coefs(m, i)
            coefs[y0[(m, i)]] = coefs.get(y0[(m, i)], 0.0) - 1.0
            if m == 0:
                lp.add_constraint(coefs, "=", -float(x0[i]))
            else:
                coefs[xpre[(m, i)]] = coefs.get(xpre[(m, i)], 0.0) + 1.0
                lp.add_constraint(coefs, "=", 0.0)
            # end-state link: x[m+1] >= y0[m] + total drift, x >= 0 by bound
            if m + 1 < M:
                lp.add_constraint(
                    {xpre[(m + 1, i)]: 1.0, y0[(m, i)]: -1.0}, ">", data.end_kink(m, i)
                )
            # sending feasibility
            out_coefs = {}
            for j in range(N):
                if j != i:
                    out_coefs[vars.u[(m, i, j)]] = 1.0
            if m == 0:
                lp.add_constraint(out_coefs, "<", float(x0[i]))
            else:
                oc = dict(out_coefs)
                oc[xpre[(m, i)]] = -1.0
                lp.add_constraint(oc, "<", 0.0)
            if options.transfer_cap is not None:
                lp.add_constraint(net_coefs(m, i), "<", options.transfer_cap)
                lp.add_constraint(net_coefs(m, i, -1.0), "<", options.transfer_cap)


def _add_chain_rows(lp, vars, x0, model, costs, data, options, net_coefs, y_hi):
    M, N, L = model.horizon, model.n_queues, data.L
    step = model.tau / L
    ylo = -y_hi - float(np.abs(data.cum).sum()) - 1.0
    y = {}
    z = {}
    w = {}
    for m in range(M):
        for i in range(N):
            for l in range(L + 1):
                y[(m, i, l)] = lp.add_var(f"y[{m},{i},{l}]", ylo, INF, 0.0)
                z[(m, i, l)] = lp.add_var(f"z[{m},{i},{l}]", 0.0, INF, 0.0)
            for l in range(1, L + 1):
                w[(m, i, l)] = lp.add_var(f"w[{m},{i},{l}]", 0.0, INF, step)

    for m in range(M):
        for i in range(N):
            cum = data.cum[m, i]
            for l in range(1, L + 1):
                lp.add_constraint(
                    {y[(m, i, l)]: 1.0, y[(m, i, l - 1)]: -1.0}, "=", float(cum[l] - cum[l - 1])
                )
            for l in range(L + 1):
                if m == 0 and l == 0:
                    lp.add_constraint({z[(0, i, 0)]: 1.0}, ">", float(x0[i]))
                else:
                    lp.add_constraint({z[(m, i, l)]: 1.0, y[(m, i, l)]: -1.0}, ">", 0.0)
            # holding epigraph on interval midpoints
            pieces = data.holding[i].pieces()
            for l in range(1, L + 1):
                for slope, intercept in pieces:
                    lp.add_constraint(
                        {
                            w[(m, i, l)]: 1.0,
                            z[(m, i, l)]: -0.5 * slope,
                            z[(m, i, l - 1)]: -0.5 * slope,
                        },
                        ">",
                        intercept,
                    )
            # post-transfer state at the start of the period
            coefs = net_coefs(m, i)
            coefs[y[(m, i, 0)]] = coefs.get(y[(m, i, 0)], 0.0) - 1.0
            if m == 0:
                coefs[z[(0, i, 0)]] = coefs.get(z[(0, i, 0)], 0.0) + 1.0
            else:
                coefs[z[(m - 1, i, L)]] = coefs.get(z[(m - 1, i, L)], 0.0) + 1.0
            lp.add_constraint(coefs, "=", 0.0)
            # sending feasibility
            out_coefs = {}
            for j in range(N):
                if j != i:
                    out_coefs[vars.u[(m, i, j)]] = 1.0
            src = z[(0, i, 0)] if m == 0 else z[(m - 1, i, L)]
            oc = dict(out_coefs)
            oc[src] = oc.get(src, 0.0) - 1.0
            lp.add_constraint(oc, "<", 0.0)
            if options.transfer_cap is not None:
                lp.add_constraint(net_coefs(m, i), "<", options.transfer_cap)
                lp.add_constraint(net_coefs(m, i, -1.0), "<", options.transfer_cap)


def canonicalize_transfers(u):
    """Remove two-cycles and relays from a transfer matrix.

    Keeps the net transfer fixed while never increasing cost (triangle
    inequality); afterwards no queue both sends and receives.
    """
    u = np.array(u, dtype=float)
    n = u.shape[0]
    np.fill_diagonal(u, 0.0)
    changed = True
    while changed:
        changed = False
        for i in range(n):
            for j in range(n):
                if i == j or u[i, j] <= 1e-12:
                    continue
                if u[j, i] > 1e-12:  # two-cycle
                    q = min(u[i, j], u[j, i])
                    u[i, j] -= q
                    u[j, i] -= q
                    changed = True
                    continue
                for l in range(n):
                    if l in (i, j) or u[j, l] <= 1e-12:
                        continue
                    q = min(u[i, j], u[j, l])  # relay i -> j -> l
                    u[i, j] -= q
                    u[j, l] -= q
                    if l != i:
                        u[i, l] += q
                    changed = True
                    break
    u[u < 1e-12] = 0.0
    return u


def _extract_transfers(sol, vars, M, N):
    u = np.zeros((M, N, N))
    for (m, i, j), idx in vars.u.items():
        val = sol.x[idx]
        if val > 1e-9:
            u[m, i, j] = val
    for m in range(M):
        u[m] = canonicalize_transfers(u[m])
    return u


def _solve_program(x0, model, costs, data, options, pattern=None, setup_relax=None):
    """Solve one LP, generating violated holding chords on demand.

    The reduced formulation starts from a sparse chord subset and adds the
    binding chord at the current post-transfer state until none is violated,
    which reproduces the full-chord optimum at a fraction of the row count.
    """
    if options.formulation == "chain":
        lp, vars = _build_program(x0, model, costs, data, options, pattern, setup_relax)
        return lp.solve(), vars
    M, N = model.horizon, model.n_queues
    all_pieces = {
        (m, i): data.holding_pwl(m, i, float(x0[i]) if m == 0 else None)
        for m in range(M)
        for i in range(N)
    }
    subset = {
        key: {0, len(p) // 2, len(p) - 1} if len(p) > 1 else {0}
        for key, p in all_pieces.items()
    }
    sol = None
    vars = None
    for _ in range(60):
        lp, vars = _build_program(
            x0, model, costs, data, options, pattern, setup_relax, piece_subset=subset
        )
        sol = lp.solve()
        if sol.status != OPTIMAL:
            return sol, vars
        violated = False
        for key, pieces in all_pieces.items():
            y = sol.x[vars.y0[key]]
            w = sol.x[vars.w[key]]
            g, arg = _eval_pwl(pieces, y)
            if w < g - 1e-9 * max(1.0, abs(g)):
                if arg not in subset[key]:
                    subset[key].add(arg)
                    violated = True
        if not violated:
            return sol, vars
    return sol, vars


def _schedule_solution(x0, model, costs, data, transfers, status="optimal", nodes=0):
    total, holding, transfer = data.discretized_objective(x0, costs, transfers)
    # trajectory under the exact (non-discretized) dynamics
    M, N = model.horizon, model.n_queues
    pre = np.zeros((M, N))
    post = np.zeros((M, N))
    x = np.asarray(x0, dtype=float).copy()
    for m in range(M):
        pre[m] = x
        y = x + net_transfer(transfers[m])
        y = np.maximum(y, 0.0)
        post[m] = y
        x = fluid_transition(y, model, m, model.tau)
    return FluidSolution(status, total, transfers, pre, post, holding, transfer, nodes)


def solve_fluid_control(
    x0,
    model: NetworkModel,
    costs: TransferCostSpec,
    holding,
    options: SolverOptions | None = None,
) -> FluidSolution:
    """Globally optimal transfer schedule for the discretized fluid program."""
    options = options or SolverOptions()
    x0 = check_state(x0)
    if options.transfer_cap is not None and options.transfer_cap < 0:
        raise ValueError("transfer cap must be non-negative")
    data = _PeriodData(model, holding, options.intervals_per_period)
    joint = isinstance(costs.setup, JointSetup)
    backend = options.backend
    if backend == "auto":
        backend = "enumeration" if joint and model.horizon <= 10 else "bnb"
    if backend == "enumeration":
        if not joint:
            raise ValueError("pattern enumeration applies to joint setups only")
        return _solve_by_enumeration(x0, model, costs, data, options)
    return _solve_by_bnb(x0, model, costs, data, options)


def _solve_by_enumeration(x0, model, costs, data, options):
    M, N = model.horizon, model.n_queues
    K = costs.setup.cost
    # full relaxation without setup gives a lower bound on the variable part
    sol, vars = _solve_program(x0, model, costs, data, options, pattern=[True] * M)
    if sol.status != OPTIMAL:
        raise RuntimeError(f"relaxation unexpectedly {sol.status}")
    relax_obj = sol.objective
    free_u = _extract_transfers(sol, vars, M, N)
    best_u = free_u
    best = data.discretized_objective(x0, costs, free_u)[0]
    nodes = 1
    for n_active in range(0, M + 1):
        if relax_obj + K * n_active >= best - options.gap_tol:
            break
        for active in itertools.combinations(range(M), n_active):
            pattern = [m in active for m in range(M)]
            if all(pattern):
                continue  # already solved as the relaxation
            sol, vars = _solve_program(x0, model, costs, data, options, pattern=pattern)
            nodes += 1
            if sol.status != OPTIMAL:
                continue
            u = _extract_transfers(sol, vars, M, N)
            cand = data.discretized_objective(x0, costs, u)[0]
            if cand < best - options.gap_tol:
                best = cand
                best_u = u
    return _schedule_solution(x0, model, costs, data, best_u, nodes=nodes)


def _solve_by_bnb(x0, model, costs, data, options):
    M, N = model.horizon, model.n_queues
    best = [math.inf]
    best_u = [np.zeros((M, N, N))]
    # no-transfer incumbent
    cand = data.discretized_objective(x0, costs, best_u[0])[0]
    best[0] = cand
    nodes = [0]
    counter = itertools.count()
    heap = []

    def solve_node(fixings):
        sol, vars = _solve_program(x0, model, costs, data, options, setup_relax=fixings)
        nodes[0] += 1
        if sol.status != OPTIMAL:
            return None
        u = _extract_transfers(sol, vars, M, N)
        cand_obj = data.discretized_objective(x0, costs, u)[0]
        if cand_obj < best[0] - options.gap_tol:
            best[0] = cand_obj
            best_u[0] = u
        fracs = {}
        for key, idx in itertools.chain(
            ((("v", m), i) for m, i in vars.v0.items())
            if isinstance(costs.setup, JointSetup)
            else ((("v0", m), i) for m, i in vars.v0.items()),
            ((("v",) + k, i) for k, i in vars.v.items()),
        ):
            val = sol.x[idx]
            if key not in fixings and options.integer_tol < val < 1 - options.integer_tol:
                fracs[key] = val
        return sol.objective, fracs

    root = solve_node({})
    if root is not None:
        bound, fracs = root
        heapq.heappush(heap, (bound, next(counter), {}, fracs))
    while heap:
        bound, _, fixings, fracs = heapq.heappop(heap)
        if bound >= best[0] - options.gap_tol:
            continue
        if not fracs:
            continue
        key = max(fracs, key=lambda k: min(fracs[k], 1 - fracs[k]))
        for val in (0.0, 1.0):
            child = dict(fixings)
            child[key] = val
            res = solve_node(child)
            if res is None:
                continue
            cbound, cfracs = res
            if cbound < best[0] - options.gap_tol and cfracs:
                heapq.heappush(heap, (cbound, next(counter), child, cfracs))
    return _schedule_solution(x0, model, costs, data, best_u[0], nodes=nodes[0])


def replay_schedule(x0, model, costs, holding, transfers):
    """Exact fluid cost of a transfer schedule via the closed-form dynamics.

    Independent of the discretization: uses fluid_transition and
    holding_cost_period directly.
    """
    x = check_state(x0).copy()
    holding_total = 0.0
    transfer_total = 0.0
    for m in range(model.horizon):
        u = transfers[m]
        transfer_total += float(np.sum(costs.variable * u)) + costs.setup.of_matrix(u)
        y = np.maximum(x + net_transfer(u), 0.0)
        holding_total += holding_cost_period(y, model, holding, m)
        x = fluid_transition(y, model, m, model.tau)
    return holding_total + transfer_total, holding_total, transfer_total


def floor_transfers(u, x, cap=None):
    """Integer transfer matrix for the stochastic system: floor, then clip caps.

    Flooring keeps admissibility (row sums only shrink); the optional net cap
    is re-imposed afterwards by trimming inflows, largest first.
    """
    U = np.floor(np.asarray(u) + 1e-9).astype(int)
    np.fill_diagonal(U, 0)
    x = np.asarray(x)
    n = U.shape[0]
    for i in range(n):
        # guard against accumulated float slack
        excess = int(U[i].sum() - math.floor(x[i] + 1e-9))
        j = 0
        while excess > 0:
            k = int(np.argmax(U[i]))
            take = min(excess, U[i, k])
            U[i, k] -= take
            excess -= take
            j += 1
            if j > n:
                break
    if cap is not None:
        cap = int(cap)
        for i in range(n):
            while U[:, i].sum() - U[i, :].sum() > cap:
                k = int(np.argmax(U[:, i]))
                U[k, i] -= 1
            while U[i, :].sum() - U[:, i].sum() > cap:
                k = int(np.argmax(U[i, :]))
                U[i, k] -= 1
    return U


class TwoQueueFluidOracle:
    """Shrinking-horizon fluid decisions for two queues with structural memos.

    On every slice of constant total the fluid policy is characterized by
    re-order and order-up-to levels: states below s1 move queue 1 up to S1,
    states with queue 2 below s2 move it up to S2, everything between stays.
    Solved states provide monotone evidence (movers bound the thresholds from
    below, stays form an interval), so each (period, total) cell needs only a
    handful of exact solves no matter how many states are queried.
    """

    def __init__(self, model, costs, holding, options=None, mode="shrinking", lookahead=None):
        self.model = model
        self.costs = costs
        self.holding = holding
        self.options = options or SolverOptions()
        self.mode = mode
        self.lookahead = lookahead or model.horizon
        self.cells = {}
        self.solves = 0

    def _cell(self, m, n):
        cell = self.cells.get((m, n))
        if cell is None:
            cell = {"stay_lo": None, "stay_hi": None, "m1_max": -1, "m2_max": -1,
                    "S1": None, "S2": None}
            self.cells[(m, n)] = cell
        return cell

    def _subproblem_model(self, period):
        if self.mode == "shrinking":
            periods = max(self.model.horizon - period, 1)
        else:
            periods = self.lookahead
        t0 = period * self.model.tau
        rates = [lam.shifted(t0) for lam in self.model.lam]
        return NetworkModel(rates, self.model.mu, self.model.tau, periods, self.model.servers)

    def _solve_at(self, m, x):
        sub = self._subproblem_model(m)
        sol = solve_fluid_control(np.asarray(x, dtype=float), sub, self.costs, self.holding, self.options)
        self.solves += 1
        y = sol.post_states[0]
        return y

    def target(self, m, x):
        """Continuous first-period post-transfer state from integer x."""
        x1, x2 = int(x[0]), int(x[1])
        n = x1 + x2
        if n == 0:
            return np.zeros(2)
        cell = self._cell(min(m, self.model.horizon - 1) if self.mode == "shrinking" else m, n)
        if x1 <= cell["m1_max"]:
            return np.array([cell["S1"], n - cell["S1"]])
        if x2 <= cell["m2_max"]:
            return np.array([n - cell["S2"], cell["S2"]])
        if cell["stay_lo"] is not None and cell["stay_lo"] <= x1 <= cell["stay_hi"]:
            return np.array([float(x1), float(x2)])
        y = self._solve_at(m, (x1, x2))
        if y[0] > x1 + 1e-6:
            cell["m1_max"] = max(cell["m1_max"], x1)
            cell["S1"] = float(y[0]) if cell["S1"] is None else cell["S1"]
            return np.array([cell["S1"], n - cell["S1"]])
        if y[1] > x2 + 1e-6:
            cell["m2_max"] = max(cell["m2_max"], x2)
            cell["S2"] = float(y[1]) if cell["S2"] is None else cell["S2"]
            return np.array([n - cell["S2"], cell["S2"]])
        cell["stay_lo"] = x1 if cell["stay_lo"] is None else min(cell["stay_lo"], x1)
        cell["stay_hi"] = x1 if cell["stay_hi"] is None else max(cell["stay_hi"], x1)
        return np.array([float(x1), float(x2)])

    def stays(self, m, x) -> bool:
        y = self.target(m, x)
        return abs(y[0] - x[0]) <= 1e-6 and abs(y[1] - x[1]) <= 1e-6

    def policy(self, cap=None):
        def fn(period, x):
            y = self.target(period, x)
            u = np.zeros((2, 2))
            if y[0] > x[0] + 1e-9:
                u[1, 0] = y[0] - x[0]
            elif y[1] > x[1] + 1e-9:
                u[0, 1] = y[1] - x[1]
            return floor_transfers(u, x, cap)

        return fn


class RollingHorizonPolicy:
    """Applies the first-period fluid decision from each observed state.

    mode="shrinking" solves the remaining (M - m)-period problem at period m
    (finite-horizon experiments); mode="fixed" always solves a full
    ``lookahead``-period problem whose rates start at the current period
    (the rolling case-study protocol).
    """

    def __init__(self, model, costs, holding, options=None, lookahead=None, mode="shrinking"):
        self.model = model
        self.costs = costs
        self.holding = holding
        self.options = options or SolverOptions()
        self.lookahead = lookahead or model.horizon
        self.mode = mode
        self._cache = {}

    def __call__(self, period: int, state) -> np.ndarray:
        key = (period, tuple(int(round(s)) for s in np.asarray(state)))
        hit = self._cache.get(key)
        if hit is not None:
            return hit.copy()
        sub = self._subproblem_model(period)
        sol = solve_fluid_control(np.asarray(state, dtype=float), sub, self.costs, self.holding, self.options)
        U = floor_transfers(sol.transfers[0], state, self.options.transfer_cap)
        self._cache[key] = U
        return U.copy()

    def _subproblem_model(self, period: int) -> NetworkModel:
        if self.mode == "shrinking":
            periods = max(self.model.horizon - period, 1)
        else:
            periods = self.lookahead
        t0 = period * self.model.tau
        rates = [lam.shifted(t0) for lam in self.model.lam]
        return NetworkModel(rates, self.model.mu, self.model.tau, periods, self.model.servers)
