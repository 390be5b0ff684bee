"""Deterministic fluid dynamics and single-period holding costs.

With piecewise-constant arrival rates the fluid trajectory of each queue is
piecewise linear: within any constant-rate segment the queue drifts at
``lambda - servers * mu`` and, once it empties on a draining segment, stays
empty until the rate changes. Both the transition map and (for linear
holding) the holding integral therefore have closed forms; no ODE stepping
is involved anywhere.
"""

from __future__ import annotations

import numpy as np

from .model import DomainError, LinearHolding, NetworkModel, check_state


def _queue_segments(model: NetworkModel, queue: int, period: int, upto: float):
    """Constant-drift segments (duration, drift) for one queue over [0, upto]."""
    a, b = model.period_window(period)
    if upto < -1e-12 or upto > model.tau + 1e-12:
        raise DomainError("time must lie within the period")
    upto = min(max(upto, 0.0), model.tau)
    mu_eff = float(model.effective_mu[queue])
    segs = model.lam[queue].segments(a, a + upto)
    return [(t1 - t0, lam - mu_eff) for t0, t1, lam in segs]


def fluid_transition(y, model: NetworkModel, period: int, t: float) -> np.ndarray:
    """State reached at elapsed time ``t`` of ``period`` from post-transfer ``y``.

    Exact for piecewise-constant rates: the per-queue recursion clamps at
    zero at every rate breakpoint, which reproduces the queue emptying and
    restarting behaviour of the fluid dynamics.
    """
    y = check_state(y)
    out = np.empty_like(y)
    for i in range(model.n_queues):
        x = float(y[i])
        for dt, c in _queue_segments(model, i, period, t):
            x = max(x + c * dt, 0.0)
        out[i] = x
    return out


def fluid_transition_vec(y_vec, model: NetworkModel, queue: int, period: int, t=None):
    """Vectorized single-queue transition for an array of start states."""
    t = model.tau if t is None else t
    x = np.array(y_vec, dtype=float)
    for dt, c in _queue_segments(model, queue, period, t):
        x = np.maximum(x + c * dt, 0.0)
    return x


def _linear_segment_integral(x0, dt, c):
    """Integral of the clamped linear trajectory max(x0 + c s, 0) over [0, dt]."""
    x0 = np.asarray(x0, dtype=float)
    if c >= 0:
        return x0 * dt + 0.5 * c * dt * dt
    t_star = x0 / (-c)
    full = x0 * dt + 0.5 * c * dt * dt
    triangle = 0.5 * x0 * t_star
    return np.where(t_star < dt, triangle, full)


def holding_cost_linear_vec(y_vec, model: NetworkModel, queue: int, period: int, rate: float):
    """Exact per-queue holding integral for linear holding, vectorized over states."""
    x = np.array(y_vec, dtype=float)
    acc = np.zeros_like(x)
    for dt, c in _queue_segments(model, queue, period, model.tau):
        acc += _linear_segment_integral(x, dt, c)
        x = np.maximum(x + c * dt, 0.0)
    return rate * acc


def _adaptive_simpson(f, a, b, tol):
    fa, fm, fb = f(a), f(0.5 * (a + b)), f(b)

    def recurse(a, b, fa, fm, fb, whole, tol, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = (m - a) / 6 * (fa + 4 * flm + fm)
        right = (b - m) / 6 * (fm + 4 * frm + fb)
        if depth <= 0 or abs(left + right - whole) <= 15 * tol:
            return left + right + (left + right - whole) / 15
        return recurse(a, m, fa, flm, fm, left, tol / 2, depth - 1) + recurse(
            m, b, fm, frm, fb, right, tol / 2, depth - 1
        )

    whole = (b - a) / 6 * (fa + 4 * fm + fb)
    return recurse(a, b, fa, fm, fb, whole, tol, 48)


def holding_cost_period(y, model: NetworkModel, holding, period: int) -> float:
    """Holding cost accumulated over one period from post-transfer state ``y``.

    ``holding`` is a list of per-queue specs. Linear specs integrate exactly
    (piecewise-quadratic antiderivative); other convex specs fall back to
    adaptive Simpson quadrature with absolute tolerance 1e-9.
    """
    y = check_state(y)
    total = 0.0
    for i in range(model.n_queues):
        spec = holding[i]
        if isinstance(spec, LinearHolding):
            total += float(holding_cost_linear_vec(np.array([y[i]]), model, i, period, spec.rate)[0])
        else:
            total += _holding_quadrature_queue(float(y[i]), model, i, period, spec, tol=1e-9)
    return total


def _holding_quadrature_queue(y0, model, queue, period, spec, tol=1e-9):
    # integrate segment by segment so the integrand is smooth on each call
    x = y0
    acc = 0.0
    for dt, c in _queue_segments(model, queue, period, model.tau):
        if dt <= 0:
            continue
        # split at the emptying time so Simpson sees piecewise-linear parts
        pieces = [(0.0, dt)]
        if c < 0 and 0 < x / (-c) < dt:
            ts = x / (-c)
            pieces = [(0.0, ts), (ts, dt)]
        for a, b in pieces:
            f = lambda s: float(spec.cost(max(x + c * s, 0.0)))
            acc += _adaptive_simpson(f, a, b, tol / max(len(pieces), 1))
        x = max(x + c * dt, 0.0)
    return acc


def holding_cost_quadrature(y, model: NetworkModel, holding, period: int, steps: int = 20000) -> float:
    """Independent fixed-grid Simpson oracle for the holding integral.

    Deliberately ignorant of the closed forms: evaluates the trajectory by
    fluid_transition on a fine time grid. Used to cross-check the exact path.
    """
    y = check_state(y)
    ts = np.linspace(0.0, model.tau, steps + 1)
    vals = np.empty(ts.shape)
    for k, t in enumerate(ts):
        x = fluid_transition(y, model, period, float(t))
        vals[k] = sum(float(holding[i].cost(x[i])) for i in range(model.n_queues))
    h = model.tau / steps
    odd = vals[1:-1:2].sum()
    even = vals[2:-1:2].sum()
    return h / 3 * (vals[0] + 4 * odd + 2 * even + vals[-1])


def non_idleness_index(model: NetworkModel, stationary_rates) -> np.ndarray:
    """tau * (servers*mu - lambda)^+ per queue: customers needed to avoid idling."""
    lam = np.asarray(stationary_rates, dtype=float)
    return model.tau * np.maximum(model.effective_mu - lam, 0.0)


def end_of_period_drift(model: NetworkModel, queue: int, period: int) -> float:
    """Total signed drift of a queue over a period, ignoring the zero clamp."""
    return sum(dt * c for dt, c in _queue_segments(model, queue, period, model.tau))
