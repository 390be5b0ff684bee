"""Experiment drivers: benchmark instances, policy construction, and the
reproduction protocols behind the reported tables and figures."""

from __future__ import annotations

import math

import numpy as np

from .api import ApiOptions, train_api
from .dpgrid import dp_value_grid, extract_region, extract_sS, stationary_policy_table
from .fluidprog import RollingHorizonPolicy, SolverOptions, floor_transfers
from .mdp import GapStatistics, MdpInstance, optimality_gap
from .model import JointSetup, LinearHolding, NetworkModel, TransferCostSpec
from .rates import PiecewiseConstantRate
from .simulate import (
    ExponentialService,
    LogNormalService,
    SimOptions,
    default_service,
    evaluate_policies,
    myopic_index_policy,
    no_transfer_policy,
)
from .transport import variable_transfer_cost


# ---------------------------------------------------------------------------
# two-queue benchmark instances
# ---------------------------------------------------------------------------


def two_queue_instance(variant: str):
    """Benchmark systems: heavy-traffic pairs with rho = 0.9 and unit costs.

    mm1:  Markovian queues on a fast time scale (9 arrivals per period).
    mg1:  log-normal service with triple the exponential's std, same mean.
    mtg1: as mg1 with a sinusoidal daily arrival profile.
    """
    holding = [LinearHolding(10.0), LinearHolding(10.0)]
    costs = TransferCostSpec.symmetric_pair(1.0, JointSetup(1.0))
    if variant == "mm1":
        model = NetworkModel([9.0, 9.0], [10.0, 10.0], 1.0, 7)
        service = default_service(model)
    elif variant == "mg1":
        model = NetworkModel([0.9, 0.9], [1.0, 1.0], 1.0, 7)
        service = [LogNormalService(1.0, 3.0), LogNormalService(1.0, 3.0)]
    elif variant == "mtg1":
        fn = lambda t: 0.9 * (1.0 + 0.5 * math.sin(2 * math.pi * t - math.pi))
        rate = PiecewiseConstantRate.staircase(fn, 7.0, 20 * 7)
        model = NetworkModel([rate, rate], [1.0, 1.0], 1.0, 7)
        service = [LogNormalService(1.0, 3.0), LogNormalService(1.0, 3.0)]
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return model, costs, holding, service


def fluid_grid_policy(artifact, costs: TransferCostSpec):
    """Rolling fluid policy from a per-period value grid (shrinking horizon).

    At period m the target comes from the artifact's period-m map, which is
    the first-period decision of the remaining-horizon fluid problem. The
    continuous target is floored to an admissible integer matrix.
    """
    last = len(artifact.periods) - 1

    def policy(period, x):
        n = len(x)
        key = tuple(int(round(v / artifact.delta)) for v in x)
        if key not in artifact.index:
            return np.zeros((n, n), dtype=int)
        y = artifact.target_state(min(period, last), np.asarray(x, dtype=float))
        _, u = variable_transfer_cost(y - np.asarray(x, dtype=float), costs)
        return floor_transfers(u, x)

    return policy


def build_two_queue_policies(variant, reps_seed, api_options=None, solver_L=20):
    """no-transfer, myopic, fluid, and trained API policies for a benchmark.

    The fluid arm and the API initialization share one threshold-structured
    oracle over the exact discretized program; the instances here have fluid
    optima within a hair of the stay cost, which lattice value grids cannot
    resolve.
    """
    from .fluidprog import SolverOptions, TwoQueueFluidOracle

    model, costs, holding, service = two_queue_instance(variant)
    oracle = TwoQueueFluidOracle(
        model, costs, holding, SolverOptions(intervals_per_period=solver_L)
    )
    api_options = api_options or ApiOptions(
        p=0.1, B=10, j_max=10, n_max=60 if variant == "mm1" else 44, seed=reps_seed,
        init_delta=1.0,
    )
    api_art = train_api(model, costs, holding, service, api_options, label_oracle=oracle)
    policies = [
        ("no-transfer", no_transfer_policy),
        ("myopic", myopic_index_policy(model, costs)),
        ("fluid", oracle.policy()),
        ("api", api_art.policy(costs)),
    ]
    return model, costs, holding, service, policies, api_art


def two_queue_experiment(variant, x0, reps, seed, policies_bundle=None, api_options=None):
    """Paired evaluation of the four policies from one initial condition."""
    if policies_bundle is None:
        policies_bundle = build_two_queue_policies(variant, seed, api_options)
    model, costs, holding, service, policies, _ = policies_bundle
    report = evaluate_policies(
        policies, model, service, holding, costs, x0, reps=reps, seed=seed
    )
    return report


# ---------------------------------------------------------------------------
# fluid-versus-MDP optimality gaps
# ---------------------------------------------------------------------------

GAP_CASES = {
    "a": (0.7, 0.9),
    "b": (0.75, 0.85),
    "c": (0.5, 0.7),
    "d": (0.55, 0.65),
}


def gap_instance(case: str) -> MdpInstance:
    lam1, lam2 = GAP_CASES[case]
    return MdpInstance(lam1, lam2, 1.0, 1.0, 1.0, 1.0, 2.0, 5.0, n_bar=40)


def stationary_fluid_for_gap(inst: MdpInstance, eta: float):
    """Converged two-queue fluid policy table matched to the MDP's time scale.

    The period length equals the mean time between events of the scaled
    system; backward induction runs to stationarity so the policy is the
    long-horizon fluid policy.
    """
    scaled = inst.scaled(eta)
    tau = 1.0 / scaled.uniform_rate
    model = NetworkModel([scaled.lam1, scaled.lam2], [scaled.mu1, scaled.mu2], tau, 1)
    costs = TransferCostSpec.symmetric_pair(scaled.r, JointSetup(scaled.K))
    holding = [LinearHolding(scaled.h1), LinearHolding(scaled.h2)]
    art = stationary_policy_table(
        model, costs, holding, delta=1.0, n_max=float(scaled.n_bar), tol=1e-7
    )
    return art


def gap_experiment(case: str, eta: float, n_initial=20, paths=1000, seed=0) -> GapStatistics:
    inst = gap_instance(case)
    art = stationary_fluid_for_gap(inst, eta)
    return optimality_gap(inst, eta, art, n_initial=n_initial, paths=paths, seed=seed)


# ---------------------------------------------------------------------------
# three-queue structure figures
# ---------------------------------------------------------------------------


def region_figure_instance(K: float, tau=5.0, horizon=5):
    """Three symmetric queues with asymmetric pairwise distances."""
    model = NetworkModel([0.9, 0.9, 0.9], [1.0, 1.0, 1.0], tau, horizon)
    r = np.array([[0.0, 2.0, 4.0], [2.0, 0.0, 3.0], [4.0, 3.0, 0.0]])
    costs = TransferCostSpec(r, JointSetup(K))
    holding = [LinearHolding(1.0)] * 3
    return model, costs, holding


def threshold_figure_instance(K: float):
    """Two symmetric queues used for the threshold-structure illustration."""
    model = NetworkModel([0.7, 0.7], [1.0, 1.0], 5.0, 10)
    costs = TransferCostSpec.symmetric_pair(1.0, JointSetup(K))
    holding = [LinearHolding(1.0), LinearHolding(1.0)]
    return model, costs, holding


def region_structure_summary(artifact, n: float, period: int = 0):
    """Region membership, connectivity, and target placement diagnostics."""
    members, connected = extract_region(artifact, n, period)
    member_set = {tuple(int(round(v / artifact.delta)) for v in x) for x in members}
    units = int(round(n / artifact.delta))
    pg = artifact.periods[period]
    slice_idx = artifact.slice_indices(units)
    # boundary: region states with an off-region lattice neighbour in the slice
    boundary = set()
    for cell in member_set:
        for i in range(artifact.n_queues):
            for j in range(artifact.n_queues):
                if i == j:
                    continue
                nb = list(cell)
                nb[i] += 1
                nb[j] -= 1
                if min(nb) >= 0 and tuple(nb) not in member_set:
                    boundary.add(cell)
    max_target_boundary_dist = 0
    interior_targets = True
    for idx in slice_idx:
        if artifact.in_region(period, int(idx)):
            continue
        tgt = artifact.states[pg.targets[int(idx)]]
        cell = tuple(int(v) for v in tgt)
        dist = min(
            (max(abs(a - b) for a, b in zip(cell, bc)) for bc in boundary),
            default=0,
        )
        max_target_boundary_dist = max(max_target_boundary_dist, dist)
        for i in range(artifact.n_queues):
            for j in range(artifact.n_queues):
                if i == j:
                    continue
                nb = list(cell)
                nb[i] += 1
                nb[j] -= 1
                if min(nb) >= 0 and tuple(nb) not in member_set:
                    interior_targets = False
    return {
        "size": len(member_set),
        "connected": connected,
        "max_target_boundary_distance_cells": max_target_boundary_dist,
        "targets_interior": interior_targets,
    }
