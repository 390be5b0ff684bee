"""Network, holding-cost, and transfer-cost data model.

These types are shared by every solver in the package. Validation happens at
construction time so downstream code can assume a well-formed instance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rates import PiecewiseConstantRate

TRIANGLE_TOL = 1e-9  # rejection threshold for user-supplied variable costs
ZERO_SUM_TOL = 1e-12  # conservation tolerance for net-transfer vectors


class DomainError(ValueError):
    """Raised when an input violates a documented precondition."""


class ConservationError(DomainError):
    """Net-transfer vector does not sum to zero."""


class UnsupportedScaleError(ValueError):
    """Instance exceeds the documented size caps of an exact method."""


class UnsupportedDimensionError(ValueError):
    """Queue count exceeds what a grid-based method supports."""


class InvariantViolation(RuntimeError):
    """A structural guarantee failed to hold numerically."""


def _as_rate(r) -> PiecewiseConstantRate:
    if isinstance(r, PiecewiseConstantRate):
        return r
    return PiecewiseConstantRate.constant(float(r))


class NetworkModel:
    """Parallel queues with piecewise-constant arrivals and exponential drain.

    Arguments:
        arrival_rates: per queue, a PiecewiseConstantRate or a constant.
        service_rates: per-server service rate mu_i (> 0).
        tau: period length (> 0).
        horizon: number of periods M (>= 1).
        servers: per-queue server counts (default all 1). Fluid dynamics use
            the effective rate servers[i] * mu[i].
    """

    def __init__(self, arrival_rates, service_rates, tau, horizon, servers=None):
        self.lam = [_as_rate(r) for r in arrival_rates]
        self.mu = np.asarray(service_rates, dtype=float)
        if self.mu.ndim != 1 or len(self.lam) != len(self.mu):
            raise ValueError("arrival and service rates must have equal length")
        if np.any(self.mu <= 0):
            raise ValueError("service rates must be positive")
        self.n_queues = len(self.mu)
        if servers is None:
            servers = np.ones(self.n_queues, dtype=int)
        self.servers = np.asarray(servers, dtype=int)
        if np.any(self.servers < 1):
            raise ValueError("server counts must be >= 1")
        self.tau = float(tau)
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        self.horizon = int(horizon)
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def effective_mu(self) -> np.ndarray:
        return self.servers * self.mu

    def period_window(self, period: int):
        if not 0 <= period < self.horizon:
            raise DomainError(f"period {period} outside 0..{self.horizon - 1}")
        return period * self.tau, (period + 1) * self.tau

    def average_rates(self, period: int) -> np.ndarray:
        a, b = self.period_window(period)
        return np.array([lam.average(a, b) for lam in self.lam])

    def replace_rates(self, new_rates) -> "NetworkModel":
        return NetworkModel(new_rates, self.mu, self.tau, self.horizon, self.servers)


@dataclass
class LinearHolding:
    """Holding cost h * x per unit time."""

    rate: float

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("holding rate must be non-negative")

    def cost(self, x):
        return self.rate * np.maximum(x, 0.0)

    def pieces(self):
        return [(self.rate, 0.0)]


@dataclass
class PiecewiseAffineHolding:
    """Pointwise maximum of affine pieces max_j(slope_j * x + intercept_j).

    Pieces must describe a convex, continuous, non-decreasing function on
    x >= 0: slopes ascending and non-negative, consecutive pieces crossing at
    increasing breakpoints.
    """

    affine_pieces: list  # list of (slope, intercept)

    def __post_init__(self):
        ps = [(float(a), float(b)) for a, b in self.affine_pieces]
        if not ps:
            raise ValueError("need at least one affine piece")
        slopes = [a for a, _ in ps]
        if any(a < 0 for a in slopes):
            raise ValueError("slopes must be non-negative")
        if any(s2 <= s1 for s1, s2 in zip(slopes, slopes[1:])):
            raise ValueError("slopes must be strictly ascending")
        # crossing points of consecutive pieces must be increasing for the max
        # to be attained in piece order
        crossings = []
        for (a1, b1), (a2, b2) in zip(ps, ps[1:]):
            crossings.append((b1 - b2) / (a2 - a1))
        if any(c2 <= c1 for c1, c2 in zip(crossings, crossings[1:])):
            raise ValueError("piece crossings must be increasing")
        self.affine_pieces = ps

    def cost(self, x):
        x = np.maximum(np.asarray(x, dtype=float), 0.0)
        vals = [a * x + b for a, b in self.affine_pieces]
        return np.maximum.reduce(vals)

    def pieces(self):
        return list(self.affine_pieces)


def holding_is_linear(spec) -> bool:
    return isinstance(spec, LinearHolding)


@dataclass
class JointSetup:
    """Fixed cost K charged once per period whenever any transfer occurs."""

    cost: float = 0.0

    def __post_init__(self):
        if self.cost < 0:
            raise ValueError("setup cost must be non-negative")

    def of_matrix(self, u, tol=1e-12) -> float:
        return self.cost if np.any(np.abs(u) > tol) else 0.0


@dataclass
class GeneralSetup:
    """K0 whenever any transfer occurs, plus K_ij per active arc."""

    base: float
    arc: np.ndarray

    def __post_init__(self):
        self.arc = np.asarray(self.arc, dtype=float)
        if self.base < 0 or np.any(self.arc < 0):
            raise ValueError("setup costs must be non-negative")
        self.arc = self.arc.copy()
        np.fill_diagonal(self.arc, 0.0)

    def of_matrix(self, u, tol=1e-12) -> float:
        active = np.abs(u) > tol
        c = float(np.sum(self.arc[active]))
        if active.any():
            c += self.base
        return c


class TransferCostSpec:
    """Variable cost matrix r plus a setup-cost specification.

    The variable costs must satisfy the triangle inequality
    r[i, j] <= r[i, l] + r[l, j]; violations beyond TRIANGLE_TOL are rejected.
    """

    def __init__(self, variable, setup=None):
        r = np.asarray(variable, dtype=float)
        if r.ndim != 2 or r.shape[0] != r.shape[1]:
            raise ValueError("variable cost must be a square matrix")
        if np.any(r < 0):
            raise ValueError("variable costs must be non-negative")
        if np.any(np.abs(np.diag(r)) > 0):
            raise ValueError("diagonal of variable cost must be zero")
        n = r.shape[0]
        for i in range(n):
            for j in range(n):
                via = r[i, :] + r[:, j]
                if r[i, j] > np.min(via) + TRIANGLE_TOL:
                    raise ValueError(
                        f"variable costs violate the triangle inequality at ({i},{j})"
                    )
        self.variable = r
        self.setup = setup if setup is not None else JointSetup(0.0)
        if isinstance(self.setup, GeneralSetup) and self.setup.arc.shape != r.shape:
            raise ValueError("arc setup matrix must match variable cost shape")

    @property
    def n_queues(self) -> int:
        return self.variable.shape[0]

    @classmethod
    def symmetric_pair(cls, r: float, setup=None) -> "TransferCostSpec":
        """Two-queue spec with r12 = r21 = r."""
        return cls(np.array([[0.0, r], [r, 0.0]]), setup)


def check_state(x, integral=False):
    """Validate a state vector: componentwise non-negative, optionally integer."""
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("state components must be non-negative")
    if integral and np.any(np.abs(x - np.round(x)) > 1e-9):
        raise DomainError("state components must be integral")
    return x


def check_transfer_matrix(u, x, tol=1e-9):
    """Validate admissibility of a transfer matrix against pre-transfer state x.

    Row sums may not exceed the state, the diagonal must be zero, and the net
    transfer must conserve total mass.
    """
    u = np.asarray(u, dtype=float)
    x = np.asarray(x, dtype=float)
    if np.any(u < -tol):
        raise DomainError("transfer entries must be non-negative")
    if np.any(np.abs(np.diag(u)) > tol):
        raise DomainError("no self-transfers")
    if np.any(u.sum(axis=1) > x + tol):
        raise DomainError("row sums exceed the pre-transfer state")
    net = net_transfer(u)
    if abs(float(net.sum())) > ZERO_SUM_TOL * max(1.0, float(np.abs(u).sum())):
        raise ConservationError("net transfer does not conserve mass")
    return u


def net_transfer(u) -> np.ndarray:
    """Net inflow vector (u^T - u) e of a transfer matrix."""
    u = np.asarray(u, dtype=float)
    return u.sum(axis=0) - u.sum(axis=1)


@dataclass
class CostModel:
    """Bundle of holding specs (one per queue) and the transfer cost spec."""

    holding: list
    transfer: TransferCostSpec
    capacities: np.ndarray | None = field(default=None)

    def holding_rate_vector(self):
        """Per-queue linear rates; raises if any queue is not linear."""
        rates = []
        for h in self.holding:
            if not holding_is_linear(h):
                raise ValueError("holding is not linear at every queue")
            rates.append(h.rate)
        return np.asarray(rates)
