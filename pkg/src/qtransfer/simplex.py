"""Dense bounded-variable primal simplex.

Small-to-medium LPs arising from the discretized fluid control program are
solved by a two-phase primal simplex over variables with (possibly infinite)
lower and upper bounds. The basis inverse is kept explicitly and updated per
pivot with periodic refactorization. Degeneracy is handled by switching to
Bland's rule after a run of non-improving pivots, which guarantees
termination.
"""

from __future__ import annotations

import numpy as np

INF = np.inf
_RC_TOL = 1e-9
_PIVOT_TOL = 1e-10
_STALL_LIMIT = 60

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


class LinearProgram:
    """Incremental LP builder: min c'x subject to rows, l <= x <= u."""

    def __init__(self):
        self.cost = []
        self.lower = []
        self.upper = []
        self.names = []
        self.rows = []  # (coef dict, sense, rhs)

    def add_var(self, name=None, lower=0.0, upper=INF, cost=0.0) -> int:
        idx = len(self.cost)
        self.cost.append(float(cost))
        self.lower.append(float(lower))
        self.upper.append(float(upper))
        self.names.append(name or f"x{idx}")
        return idx

    def set_bounds(self, idx, lower=None, upper=None):
        if lower is not None:
            self.lower[idx] = float(lower)
        if upper is not None:
            self.upper[idx] = float(upper)

    def add_constraint(self, coefs: dict, sense: str, rhs: float):
        if sense not in ("=", "<", ">"):
            raise ValueError("sense must be one of '=', '<', '>'")
        self.rows.append((dict(coefs), sense, float(rhs)))

    def n_vars(self) -> int:
        return len(self.cost)

    def solve(self):
        return solve_lp(self)


class LPSolution:
    def __init__(self, status, x, objective):
        self.status = status
        self.x = x
        self.objective = objective


def solve_lp(lp: LinearProgram) -> LPSolution:
    n_struct = lp.n_vars()
    m = len(lp.rows)
    # slacks turn inequalities into equalities
    ncols = n_struct + sum(1 for _, s, _ in lp.rows if s != "=")
    A = np.zeros((m, ncols))
    b = np.zeros(m)
    cost = np.zeros(ncols)
    lower = np.zeros(ncols)
    upper = np.full(ncols, INF)
    cost[:n_struct] = lp.cost
    lower[:n_struct] = lp.lower
    upper[:n_struct] = lp.upper
    col = n_struct
    for r, (coefs, sense, rhs) in enumerate(lp.rows):
        for j, v in coefs.items():
            A[r, j] += v
        b[r] = rhs
        if sense == "<":
            A[r, col] = 1.0
            col += 1
        elif sense == ">":
            A[r, col] = -1.0
            col += 1
    if np.any(lower > upper):
        return LPSolution(INFEASIBLE, None, None)
    status, x = _two_phase(A, b, cost, lower, upper)
    if status != OPTIMAL:
        return LPSolution(status, None, None)
    return LPSolution(OPTIMAL, x[:n_struct], float(cost[:n_struct] @ x[:n_struct]))


def _two_phase(A, b, cost, lower, upper):
    m, n = A.shape
    # start every structural variable at its finite bound nearest zero
    x = np.where(np.isfinite(lower), lower, 0.0)
    unbounded_below = ~np.isfinite(lower)
    x[unbounded_below] = np.where(np.isfinite(upper[unbounded_below]), np.minimum(upper[unbounded_below], 0.0), 0.0)
    at_upper = np.zeros(n, dtype=bool)

    resid = b - A @ x
    Afull = np.hstack([A, np.diag(np.where(resid >= 0, 1.0, -1.0))])
    lower_f = np.concatenate([lower, np.zeros(m)])
    upper_f = np.concatenate([upper, np.full(m, INF)])
    x_f = np.concatenate([x, np.abs(resid)])
    at_upper_f = np.concatenate([at_upper, np.zeros(m, dtype=bool)])
    basis = np.arange(n, n + m)

    phase1_cost = np.concatenate([np.zeros(n), np.ones(m)])
    status = _primal_simplex(Afull, b, phase1_cost, lower_f, upper_f, x_f, at_upper_f, basis)
    if status == UNBOUNDED:
        return INFEASIBLE, None  # phase one is bounded below by zero
    if phase1_cost @ x_f > 1e-7 * max(1.0, float(np.abs(b).sum())):
        return INFEASIBLE, None
    # pin artificials at zero for phase two
    upper_f[n:] = 0.0
    x_f[n:] = 0.0
    phase2_cost = np.concatenate([cost, np.zeros(m)])
    status = _primal_simplex(Afull, b, phase2_cost, lower_f, upper_f, x_f, at_upper_f, basis)
    if status != OPTIMAL:
        return status, None
    return OPTIMAL, x_f[:n]


def _primal_simplex(A, b, cost, lower, upper, x, at_upper, basis, max_iter=50000):
    m, n = A.shape
    Binv = _factorize(A, basis)
    stall = 0
    last_obj = cost @ x
    in_basis = np.zeros(n, dtype=bool)
    in_basis[basis] = True
    for it in range(max_iter):
        if it % 150 == 149:
            Binv = _factorize(A, basis)
        y = cost[basis] @ Binv
        d = cost - y @ A
        elig = (~in_basis) & (((~at_upper) & (d < -_RC_TOL)) | (at_upper & (d > _RC_TOL)))
        candidates = np.flatnonzero(elig)
        if candidates.size == 0:
            return OPTIMAL
        if stall >= _STALL_LIMIT:
            enter = int(candidates[0])  # Bland: smallest index
        else:
            enter = int(candidates[np.argmax(np.abs(d[candidates]))])
        direction = -1.0 if at_upper[enter] else 1.0
        w = Binv @ A[:, enter] * direction

        # vectorized ratio test: basic vars hitting a bound, or a bound flip
        xb = x[basis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_dec = np.where(w > _PIVOT_TOL, (xb - lower[basis]) / w, np.inf)
            t_inc = np.where(w < -_PIVOT_TOL, (upper[basis] - xb) / (-w), np.inf)
        ratios = np.maximum(np.minimum(t_dec, t_inc), 0.0)
        best_t = upper[enter] - lower[enter]
        leave_pos = -1
        k_min = int(np.argmin(ratios)) if m else -1
        if m and ratios[k_min] < best_t - 1e-12:
            best_t = ratios[k_min]
            tied = np.flatnonzero(ratios <= best_t + 1e-12)
            leave_pos = int(tied[np.argmin(basis[tied])])
        if not np.isfinite(best_t):
            return UNBOUNDED
        t_max = max(best_t, 0.0)

        x[enter] += direction * t_max
        x[basis] -= w * t_max
        obj = cost @ x
        stall = 0 if obj < last_obj - 1e-11 else stall + 1
        last_obj = obj

        if leave_pos < 0:
            at_upper[enter] = ~at_upper[enter]  # bound flip, basis unchanged
            continue
        leave = basis[leave_pos]
        at_upper[leave] = w[leave_pos] < 0  # hit upper bound when moving down
        x[leave] = upper[leave] if at_upper[leave] else lower[leave]
        basis[leave_pos] = enter
        in_basis[leave] = False
        in_basis[enter] = True
        at_upper[enter] = False
        # product-form update of the basis inverse
        col = w * direction
        piv = col[leave_pos]
        if abs(piv) < _PIVOT_TOL:
            Binv = _factorize(A, basis)
        else:
            Binv[leave_pos, :] /= piv
            others = np.arange(m) != leave_pos
            Binv[others, :] -= np.outer(col[others], Binv[leave_pos, :])
    raise RuntimeError("simplex iteration limit exceeded")


def _factorize(A, basis):
    B = A[:, basis]
    try:
        return np.linalg.inv(B)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(B)
