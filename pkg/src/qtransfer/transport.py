"""Minimum-cost realization of a net transfer and total transfer costs.

The variable cost of a net transfer z is a transportation problem from the
queues that send (z_i < 0) to the queues that receive (z_j > 0). Because the
variable costs satisfy the triangle inequality, direct sender-to-receiver
shipments are optimal, and the returned matrix never has a queue both
sending and receiving.

Setup costs are layered on top: a joint setup decomposes additively
(total = variable + K whenever z != 0), while general per-arc setups require
an exact search over active-arc subsets.
"""

from __future__ import annotations

import heapq
import itertools
import math

import numpy as np

from .model import ConservationError, GeneralSetup, JointSetup, TransferCostSpec, ZERO_SUM_TOL

_FLOW_TOL = 1e-12


def _check_zero_sum(z):
    z = np.asarray(z, dtype=float)
    scale = max(1.0, float(np.abs(z).sum()))
    if abs(float(z.sum())) > ZERO_SUM_TOL * scale:
        raise ConservationError("net transfer must sum to zero")
    return z


def variable_transfer_cost(z, costs: TransferCostSpec):
    """Minimum variable cost R(z) and a minimizing transfer matrix.

    Solved as a transportation problem by a greedy seed followed by
    transportation-simplex pivots. Ties are broken lexicographically on
    (i, j) so results are deterministic.
    """
    z = _check_zero_sum(z)
    n = costs.n_queues
    u = np.zeros((n, n))
    senders = [i for i in range(n) if z[i] < -_FLOW_TOL]
    receivers = [j for j in range(n) if z[j] > _FLOW_TOL]
    if not senders or not receivers:
        return 0.0, u
    supply = {i: -float(z[i]) for i in senders}
    demand = {j: float(z[j]) for j in receivers}
    r = costs.variable

    # greedy seed: cheapest arc first, lexicographic on ties
    arcs = sorted(((r[i, j], i, j) for i in senders for j in receivers))
    flows = {}
    rem_s = dict(supply)
    rem_d = dict(demand)
    for _, i, j in arcs:
        if rem_s[i] <= _FLOW_TOL or rem_d[j] <= _FLOW_TOL:
            continue
        q = min(rem_s[i], rem_d[j])
        flows[(i, j)] = q
        rem_s[i] -= q
        rem_d[j] -= q

    basis = _spanning_basis(flows, senders, receivers, r)
    _transportation_pivots(basis, flows, senders, receivers, r)

    for (i, j), q in flows.items():
        if q > _FLOW_TOL:
            u[i, j] = q
    cost = float(np.sum(r * u))
    return cost, u


def _spanning_basis(flows, senders, receivers, r):
    """Complete the positive-flow arcs to a spanning tree with zero-flow arcs."""
    parent = {("s", i): ("s", i) for i in senders}
    parent.update({("d", j): ("d", j) for j in receivers})

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    basis = set()
    for (i, j) in sorted(flows):
        a, b = find(("s", i)), find(("d", j))
        basis.add((i, j))
        if a != b:
            parent[a] = b
    for _, i, j in sorted((r[i, j], i, j) for i in senders for j in receivers):
        if len(basis) >= len(senders) + len(receivers) - 1:
            break
        if (i, j) in basis:
            continue
        a, b = find(("s", i)), find(("d", j))
        if a != b:
            parent[a] = b
            basis.add((i, j))
            flows.setdefault((i, j), 0.0)
    return basis


def _transportation_pivots(basis, flows, senders, receivers, r, max_iter=10000):
    for _ in range(max_iter):
        us, vs = _potentials(basis, senders, receivers, r)
        entering = None
        for i in senders:  # Bland-style: first improving arc in lexicographic order
            for j in receivers:
                if (i, j) in basis:
                    continue
                if r[i, j] - us[i] - vs[j] < -1e-11:
                    entering = (i, j)
                    break
            if entering:
                break
        if entering is None:
            return
        cycle = _basis_cycle(basis, entering, senders, receivers)
        minus = cycle[1::2]
        theta = min(flows.get(a, 0.0) for a in minus)
        leave = min(a for a in minus if flows.get(a, 0.0) <= theta + _FLOW_TOL)
        for k, a in enumerate(cycle):
            flows[a] = flows.get(a, 0.0) + (theta if k % 2 == 0 else -theta)
        basis.add(entering)
        basis.discard(leave)
        flows.pop(leave, None)
    raise RuntimeError("transportation pivoting failed to terminate")


def _potentials(basis, senders, receivers, r):
    us = {senders[0]: 0.0}
    vs = {}
    pending = set(basis)
    while pending:
        progressed = False
        for (i, j) in sorted(pending):
            if i in us and j not in vs:
                vs[j] = r[i, j] - us[i]
            elif j in vs and i not in us:
                us[i] = r[i, j] - vs[j]
            else:
                continue
            pending.discard((i, j))
            progressed = True
            break
        if not progressed:
            # disconnected tree (cannot happen once basis spans); anchor next root
            for (i, j) in sorted(pending):
                if i not in us:
                    us[i] = 0.0
                    break
                if j not in vs:
                    vs[j] = 0.0
                    break
    for i in senders:
        us.setdefault(i, 0.0)
    for j in receivers:
        vs.setdefault(j, 0.0)
    return us, vs


def _basis_cycle(basis, entering, senders, receivers):
    """Alternating cycle created by the entering arc, as a signed arc list.

    Returns arcs [entering, a1, a2, ...] alternating +/- along the unique
    tree path from the entering arc's receiver back to its sender.
    """
    adj_s = {i: [] for i in senders}
    adj_d = {j: [] for j in receivers}
    for (i, j) in basis:
        adj_s[i].append(j)
        adj_d[j].append(i)
    ei, ej = entering
    # path from receiver ej to sender ei through basic arcs
    prev = {("d", ej): None}
    stack = [("d", ej)]
    while stack:
        node = stack.pop()
        kind, idx = node
        if kind == "d":
            for i in adj_d[idx]:
                nxt = ("s", i)
                if nxt not in prev:
                    prev[nxt] = node
                    stack.append(nxt)
        else:
            for j in adj_s[idx]:
                nxt = ("d", j)
                if nxt not in prev:
                    prev[nxt] = node
                    stack.append(nxt)
    path = []
    node = ("s", ei)
    while node is not None:
        path.append(node)
        node = prev[node]
    # path: s_ei -> d_x -> s_y -> ... -> d_ej ; arcs alternate -,+,-,...
    cycle = [entering]
    for a, b in zip(path[:-1], path[1:]):
        if a[0] == "s":
            cycle.append((a[1], b[1]))
        else:
            cycle.append((b[1], a[1]))
    return cycle


def _restricted_flow_cost(z, r, allowed):
    """Min-cost flow of imbalance z over the arc subset ``allowed``.

    Successive shortest paths with Dijkstra (costs are non-negative, arcs
    uncapacitated). Returns (cost, u) or None if infeasible.
    """
    n = r.shape[0]
    z = np.asarray(z, dtype=float)
    supply = np.where(z < 0, -z, 0.0)
    demand = np.where(z > 0, z, 0.0)
    u = np.zeros((n, n))
    adj = {i: [] for i in range(n)}
    for (i, j) in allowed:
        adj[i].append(j)
    total = 0.0
    while supply.sum() > _FLOW_TOL:
        src = [i for i in range(n) if supply[i] > _FLOW_TOL]
        dist = {i: (0.0 if i in src else math.inf) for i in range(n)}
        prev = {}
        heap = [(0.0, i) for i in src]
        heapq.heapify(heap)
        while heap:
            d, i = heapq.heappop(heap)
            if d > dist[i] + 1e-15:
                continue
            for j in adj[i]:
                nd = d + r[i, j]
                if nd < dist[j] - 1e-15:
                    dist[j] = nd
                    prev[j] = i
                    heapq.heappush(heap, (nd, j))
        targets = [j for j in range(n) if demand[j] > _FLOW_TOL and dist[j] < math.inf]
        if not targets:
            return None
        j = min(targets, key=lambda t: (dist[t], t))
        path = [j]
        while path[-1] not in src:
            path.append(prev[path[-1]])
        path.reverse()
        q = min(supply[path[0]], demand[j])
        for a, b in zip(path[:-1], path[1:]):
            u[a, b] += q
        supply[path[0]] -= q
        demand[j] -= q
        total += dist[j] * q
    return total, u


def _general_setup_search(z, costs: TransferCostSpec):
    """Exact total cost under a general setup by active-arc subset search."""
    setup: GeneralSetup = costs.setup
    r = costs.variable
    n = costs.n_queues
    base_cost, base_u = variable_transfer_cost(z, costs)
    best = base_cost + setup.of_matrix(base_u)
    best_u = base_u
    all_arcs = [(i, j) for i in range(n) for j in range(n) if i != j]
    lb_var = base_cost  # R(z) lower-bounds the variable cost of any subset
    # order subsets by setup weight so pruning kicks in early
    weighted = sorted(
        (sum(setup.arc[a] for a in sub) + (setup.base if sub else 0.0), sub)
        for k in range(1, len(all_arcs) + 1)
        for sub in itertools.combinations(all_arcs, k)
    )
    for w, sub in weighted:
        if w + lb_var >= best - 1e-12:
            break
        res = _restricted_flow_cost(z, r, sub)
        if res is None:
            continue
        var_cost, u = res
        cand = var_cost + w
        if cand < best - 1e-12:
            best = cand
            best_u = u
    return best, best_u


def total_transfer_cost(z, costs: TransferCostSpec):
    """Total transfer cost C(z): variable plus setup, exactly minimized."""
    z = _check_zero_sum(z)
    if not np.any(np.abs(z) > _FLOW_TOL):
        return 0.0
    if isinstance(costs.setup, JointSetup):
        var, _ = variable_transfer_cost(z, costs)
        return var + costs.setup.cost
    if costs.n_queues <= 4:
        best, _ = _general_setup_search(z, costs)
        return best
    return _general_setup_branch_and_bound(z, costs)


def total_transfer_cost_matrix(z, costs: TransferCostSpec):
    """As total_transfer_cost but also returns a minimizing matrix."""
    z = _check_zero_sum(z)
    n = costs.n_queues
    if not np.any(np.abs(z) > _FLOW_TOL):
        return 0.0, np.zeros((n, n))
    if isinstance(costs.setup, JointSetup):
        var, u = variable_transfer_cost(z, costs)
        return var + costs.setup.cost, u
    return _general_setup_search(z, costs)


def _general_setup_branch_and_bound(z, costs: TransferCostSpec):
    """Arc-level branch and bound for general setups beyond four queues."""
    setup: GeneralSetup = costs.setup
    r = costs.variable
    n = costs.n_queues
    all_arcs = [(i, j) for i in range(n) for j in range(n) if i != j]
    var0, u0 = variable_transfer_cost(z, costs)
    best = [var0 + setup.of_matrix(u0)]

    def bound_and_solution(forced_in, forced_out):
        allowed = [a for a in all_arcs if a not in forced_out]
        res = _restricted_flow_cost(z, r, allowed)
        if res is None:
            return None
        var_cost, u = res
        lb = var_cost + sum(setup.arc[a] for a in forced_in)
        if forced_in or np.any(u > _FLOW_TOL):
            lb += setup.base
        return lb, var_cost, u

    def recurse(forced_in, forced_out):
        res = bound_and_solution(forced_in, forced_out)
        if res is None:
            return
        lb, var_cost, u = res
        if lb >= best[0] - 1e-12:
            return
        used = {a for a in all_arcs if u[a] > _FLOW_TOL}
        cand = var_cost + setup.of_matrix(u)
        if cand < best[0] - 1e-12:
            best[0] = cand
        undecided = sorted(used - forced_in)
        if not undecided:
            return
        arc = max(undecided, key=lambda a: setup.arc[a])
        recurse(forced_in, forced_out | {arc})
        recurse(forced_in | {arc}, forced_out)

    recurse(frozenset(), frozenset())
    return best[0]


class TransferCostOracle:
    """Memoized C(z) lookups keyed on the rounded net-transfer vector."""

    def __init__(self, costs: TransferCostSpec, decimals: int = 9):
        self.costs = costs
        self.decimals = decimals
        self._cache = {}

    def __call__(self, z) -> float:
        key = tuple(np.round(np.asarray(z, dtype=float), self.decimals))
        hit = self._cache.get(key)
        if hit is None:
            hit = total_transfer_cost(np.array(key), self.costs)
            self._cache[key] = hit
        return hit
