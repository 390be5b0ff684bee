"""Piecewise-constant arrival-rate functions.

All arrival rates in the package are piecewise constant with finitely many
pieces. This makes every fluid transition and linear holding integral
available in closed form, and it is rich enough to represent stationary
rates, day-of-week patterns, and staircase approximations of smooth rates.
"""

from __future__ import annotations

import math

import numpy as np


class PiecewiseConstantRate:
    """Non-negative rate function t -> value, constant between breakpoints.

    ``times`` are the left endpoints of the pieces (ascending, first one 0);
    ``values`` has the same length. The last piece extends to +inf.
    """

    def __init__(self, times, values):
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        if times.ndim != 1 or times.shape != values.shape or len(times) == 0:
            raise ValueError("times and values must be equal-length 1-D arrays")
        if times[0] != 0.0:
            raise ValueError("first breakpoint must be 0")
        if np.any(np.diff(times) <= 0):
            raise ValueError("breakpoints must be strictly increasing")
        if np.any(values < 0):
            raise ValueError("rates must be non-negative")
        self.times = times
        self.values = values

    @classmethod
    def constant(cls, value: float) -> "PiecewiseConstantRate":
        return cls([0.0], [value])

    @classmethod
    def cyclic(cls, piece_values, piece_length: float, horizon: float) -> "PiecewiseConstantRate":
        """Cycle through ``piece_values`` (each lasting ``piece_length``) up to ``horizon``.

        Used for day-of-week rates: 7 daily values cycling weekly.
        """
        piece_values = list(piece_values)
        n = int(math.ceil(horizon / piece_length)) + 1
        times = [k * piece_length for k in range(n)]
        values = [piece_values[k % len(piece_values)] for k in range(n)]
        return cls(times, values)

    @classmethod
    def staircase(cls, fn, horizon: float, pieces: int) -> "PiecewiseConstantRate":
        """Approximate a continuous rate by a staircase of ``pieces`` equal steps.

        Each step carries the average of ``fn`` over the step (midpoint rule on a
        fine subgrid), so total arrival mass over each step is preserved closely.
        """
        edges = np.linspace(0.0, horizon, pieces + 1)
        vals = []
        for a, b in zip(edges[:-1], edges[1:]):
            s = np.linspace(a, b, 33)
            mid = 0.5 * (s[:-1] + s[1:])
            vals.append(float(np.mean([fn(t) for t in mid])))
        return cls(edges[:-1], vals)

    def value(self, t: float) -> float:
        idx = int(np.searchsorted(self.times, t, side="right")) - 1
        return float(self.values[max(idx, 0)])

    def value_vec(self, t) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t), side="right") - 1
        return self.values[np.maximum(idx, 0)]

    def max_value(self, a: float, b: float) -> float:
        """Maximum rate on [a, b]; envelope for thinning."""
        segs = self.segments(a, b)
        return max(v for _, _, v in segs)

    def integral(self, a: float, b: float) -> float:
        """Exact integral of the rate over [a, b]."""
        return sum((t1 - t0) * v for t0, t1, v in self.segments(a, b))

    def average(self, a: float, b: float) -> float:
        if b <= a:
            return self.value(a)
        return self.integral(a, b) / (b - a)

    def segments(self, a: float, b: float):
        """Constant-rate segments covering [a, b] as (start, end, value) triples."""
        if b < a:
            raise ValueError("empty interval")
        if b == a:
            return [(a, a, self.value(a))]
        out = []
        i = int(np.searchsorted(self.times, a, side="right")) - 1
        i = max(i, 0)
        t = a
        while t < b:
            t_next = self.times[i + 1] if i + 1 < len(self.times) else math.inf
            end = min(t_next, b)
            out.append((t, end, float(self.values[i])))
            t = end
            i += 1
        return out

    def breakpoints_in(self, a: float, b: float):
        """Interior breakpoints of the rate inside (a, b)."""
        mask = (self.times > a) & (self.times < b)
        return [float(t) for t in self.times[mask]]

    def shifted(self, t0: float) -> "PiecewiseConstantRate":
        """Rate function s -> value(t0 + s)."""
        if t0 == 0:
            return self
        idx = max(int(np.searchsorted(self.times, t0, side="right")) - 1, 0)
        times = [0.0] + [t - t0 for t in self.times[idx + 1 :]]
        values = list(self.values[idx:])
        return PiecewiseConstantRate(times, values)

    def to_jsonable(self):
        return {"times": self.times.tolist(), "values": self.values.tolist()}

    @classmethod
    def from_jsonable(cls, obj) -> "PiecewiseConstantRate":
        return cls(obj["times"], obj["values"])
