"""Counter-based random streams for common-random-number simulation.

Every stream is a deterministic function of (master seed, replication,
queue, period, kind), realized as a Philox generator whose counter words
carry the coordinates. Streams never overlap (each keeps its own 2^64-block
counter range), replications can be generated independently and in any
order, and two policies evaluated under the same bundle read identical
exogenous randomness.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Generator, Philox

# kind codes for the counter word
KIND_EVENTS = 0
KIND_SERVICE = 1
KIND_ARRIVALS = 2
KIND_AUX = 3


class EventStreamBundle:
    """Factory of named substreams under one master seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & (2**64 - 1)

    def substream(self, rep: int, queue: int, period: int, kind: int) -> Generator:
        counter = [0, int(rep), (int(queue) << 32) | (int(period) & 0xFFFFFFFF), int(kind)]
        return Generator(Philox(key=[self.seed, 0x9E3779B97F4A7C15], counter=counter))

    def scalar_stream(self, tag: int) -> Generator:
        """Experiment-level stream (initial conditions, rate perturbations)."""
        return self.substream(0xFFFFFFFF, 0xFFFF, tag, KIND_AUX)

    def uniformized_grid(self, rep, queue, period, total_rate, t0, t1, min_draws=8):
        """Exogenous event grid on [t0, t1]: absolute times and type uniforms.

        Gap and type draws are consumed in a fixed order so the grid depends
        only on the stream coordinates, never on the system state.
        """
        gen = self.substream(rep, queue, period, KIND_EVENTS)
        horizon = t1 - t0
        mean = total_rate * horizon
        block = max(int(mean + 8.0 * np.sqrt(mean + 1.0) + min_draws), min_draws)
        gaps = gen.exponential(1.0 / total_rate, size=block)
        total = gaps.sum()
        while total < horizon:
            extra = gen.exponential(1.0 / total_rate, size=block)
            gaps = np.concatenate([gaps, extra])
            total = gaps.sum()
        times = t0 + np.cumsum(gaps)
        keep = times < t1
        times = times[keep]
        marks = gen.random(size=len(gaps))[keep]
        return times, marks

    def lognormal_service_draws(self, rep, queue, period, count, mu_log, sigma_log):
        gen = self.substream(rep, queue, period, KIND_SERVICE)
        return gen.lognormal(mu_log, sigma_log, size=int(count))

    def exponential_service_draws(self, rep, queue, period, count, rate):
        gen = self.substream(rep, queue, period, KIND_SERVICE)
        return gen.exponential(1.0 / rate, size=int(count))

    def arrival_grid(self, rep, queue, period, rate_max, t0, t1):
        """Candidate arrival times and thinning uniforms on [t0, t1]."""
        gen = self.substream(rep, queue, period, KIND_ARRIVALS)
        mean = rate_max * (t1 - t0)
        block = max(int(mean + 8.0 * np.sqrt(mean + 1.0) + 8), 8)
        gaps = gen.exponential(1.0 / rate_max, size=block)
        while t0 + gaps.sum() < t1:
            gaps = np.concatenate([gaps, gen.exponential(1.0 / rate_max, size=block)])
        times = t0 + np.cumsum(gaps)
        keep = times < t1
        accept = gen.random(size=len(gaps))[keep]
        return times[keep], accept
