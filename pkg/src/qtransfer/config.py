"""Experiment configuration: one JSON document drives every command.

Validation is strict: unknown keys are rejected and every error names the
offending path, so golden configs stay unambiguous.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .model import (
    CostModel,
    GeneralSetup,
    JointSetup,
    LinearHolding,
    NetworkModel,
    PiecewiseAffineHolding,
    TransferCostSpec,
)
from .rates import PiecewiseConstantRate


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


def _require_keys(obj, path, required, optional=()):
    if not isinstance(obj, dict):
        raise ConfigError(path, "expected an object")
    unknown = set(obj) - set(required) - set(optional)
    if unknown:
        raise ConfigError(path, f"unknown keys {sorted(unknown)}")
    for key in required:
        if key not in obj:
            raise ConfigError(path, f"missing required key '{key}'")


def _positive(value, path):
    if not isinstance(value, (int, float)) or value <= 0:
        raise ConfigError(path, "must be a positive number")
    return float(value)


def _rate_from(obj, path, tau, horizon):
    if isinstance(obj, (int, float)):
        if obj < 0:
            raise ConfigError(path, "rate must be non-negative")
        return PiecewiseConstantRate.constant(float(obj))
    if isinstance(obj, list):
        # values cycling per period (e.g. day-of-week rates)
        if not obj or any(v < 0 for v in obj):
            raise ConfigError(path, "cyclic rates must be non-negative and non-empty")
        return PiecewiseConstantRate.cyclic(obj, tau, tau * horizon + tau)
    if isinstance(obj, dict) and set(obj) == {"times", "values"}:
        try:
            return PiecewiseConstantRate(obj["times"], obj["values"])
        except ValueError as exc:
            raise ConfigError(path, str(exc))
    if isinstance(obj, dict) and "sinusoid" in obj:
        _require_keys(obj, path, ["sinusoid"])
        s = obj["sinusoid"]
        _require_keys(
            s, path + ".sinusoid", ["base"], ["relative_amplitude", "period", "phase", "pieces"]
        )
        base = _positive(s["base"], path + ".sinusoid.base")
        amp = float(s.get("relative_amplitude", 0.5))
        per = float(s.get("period", 1.0))
        phase = float(s.get("phase", -math.pi))
        pieces = int(s.get("pieces", 20))
        fn = lambda t: base * (1.0 + amp * math.sin(2 * math.pi * t / per + phase))
        return PiecewiseConstantRate.staircase(fn, tau * horizon, pieces * horizon)
    raise ConfigError(path, "expected a number, list, {times,values}, or {sinusoid}")


def _holding_from(obj, path):
    if isinstance(obj, dict) and set(obj) == {"linear"}:
        try:
            return LinearHolding(float(obj["linear"]))
        except ValueError as exc:
            raise ConfigError(path, str(exc))
    if isinstance(obj, dict) and set(obj) == {"pieces"}:
        try:
            return PiecewiseAffineHolding([tuple(p) for p in obj["pieces"]])
        except (TypeError, ValueError) as exc:
            raise ConfigError(path, str(exc))
    raise ConfigError(path, "expected {'linear': h} or {'pieces': [[slope, intercept], ...]}")


class ExperimentConfig:
    def __init__(self, model, holding, costs, raw):
        self.model = model
        self.holding = holding
        self.costs = costs
        self.raw = raw

    @property
    def initial_state(self):
        return np.asarray(self.raw.get("initial_state", [0] * self.model.n_queues))

    @property
    def cap(self):
        return self.raw.get("constraints", {}).get("cap")

    @property
    def capacities(self):
        caps = self.raw.get("network_capacities")
        return None if caps is None else np.asarray(caps)

    def solver_option(self, key, default):
        return self.raw.get("solver", {}).get(key, default)

    def api_option(self, key, default):
        return self.raw.get("api", {}).get(key, default)

    def sim_option(self, key, default):
        return self.raw.get("simulation", {}).get(key, default)

    def service_specs(self):
        from .simulate import ExponentialService, LogNormalService, default_service

        spec = self.sim_option("service", "exponential")
        if spec == "exponential":
            return default_service(self.model)
        if isinstance(spec, dict) and set(spec) == {"lognormal"}:
            pairs = spec["lognormal"]
            if len(pairs) != self.model.n_queues:
                raise ConfigError("simulation.service.lognormal", "one (mean, std) pair per queue")
            return [LogNormalService(float(m), float(s)) for m, s in pairs]
        raise ConfigError("simulation.service", "expected 'exponential' or {'lognormal': [...]}")


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = json.load(fh)
    return parse_config(raw)


def parse_config(raw) -> ExperimentConfig:
    _require_keys(
        raw,
        "$",
        ["network", "holding", "transfer"],
        ["initial_state", "constraints", "solver", "api", "simulation", "network_capacities"],
    )
    net = raw["network"]
    _require_keys(net, "network", ["queues", "tau", "horizon"])
    tau = _positive(net["tau"], "network.tau")
    horizon = net["horizon"]
    if not isinstance(horizon, int) or horizon < 1:
        raise ConfigError("network.horizon", "must be an integer >= 1")
    queues = net["queues"]
    if not isinstance(queues, list) or not queues:
        raise ConfigError("network.queues", "must be a non-empty list")
    rates, mus, servers = [], [], []
    for qi, q in enumerate(queues):
        qpath = f"network.queues[{qi}]"
        _require_keys(q, qpath, ["rates", "mu"], ["servers"])
        rates.append(_rate_from(q["rates"], qpath + ".rates", tau, horizon))
        mus.append(_positive(q["mu"], qpath + ".mu"))
        servers.append(int(q.get("servers", 1)))
    try:
        model = NetworkModel(rates, mus, tau, horizon, servers)
    except ValueError as exc:
        raise ConfigError("network", str(exc))

    holding_raw = raw["holding"]
    if not isinstance(holding_raw, list) or len(holding_raw) != model.n_queues:
        raise ConfigError("holding", "one holding spec per queue")
    holding = [_holding_from(h, f"holding[{i}]") for i, h in enumerate(holding_raw)]

    tr = raw["transfer"]
    _require_keys(tr, "transfer", ["variable"], ["setup"])
    variable = np.asarray(tr["variable"], dtype=float)
    setup_raw = tr.get("setup", {"joint": 0.0})
    if set(setup_raw) == {"joint"}:
        setup = JointSetup(float(setup_raw["joint"]))
    elif set(setup_raw) <= {"base", "arc"} and setup_raw:
        arc = np.asarray(setup_raw.get("arc", np.zeros_like(variable)), dtype=float)
        setup = GeneralSetup(float(setup_raw.get("base", 0.0)), arc)
    else:
        raise ConfigError("transfer.setup", "expected {'joint': K} or {'base': K0, 'arc': [[...]]}")
    try:
        costs = TransferCostSpec(variable, setup)
    except ValueError as exc:
        raise ConfigError("transfer", str(exc))
    if costs.n_queues != model.n_queues:
        raise ConfigError("transfer.variable", "dimension must match the queue count")

    if "initial_state" in raw:
        x0 = raw["initial_state"]
        if len(x0) != model.n_queues or any(v < 0 for v in x0):
            raise ConfigError("initial_state", "non-negative, one entry per queue")
    if "constraints" in raw:
        _require_keys(raw["constraints"], "constraints", [], ["cap"])
    if "solver" in raw:
        _require_keys(raw["solver"], "solver", [], ["L", "J", "delta", "n_max", "backend", "formulation"])
    if "api" in raw:
        _require_keys(raw["api"], "api", [], ["p", "B", "j_max", "n_max", "seed", "init_delta"])
    if "simulation" in raw:
        _require_keys(
            raw["simulation"], "simulation", [], ["reps", "seed", "service", "scenario", "chunk"]
        )
    if "network_capacities" in raw and len(raw["network_capacities"]) != model.n_queues:
        raise ConfigError("network_capacities", "one capacity per queue")
    return ExperimentConfig(model, holding, costs, raw)


def cost_model(config: ExperimentConfig) -> CostModel:
    return CostModel(config.holding, config.costs, config.capacities)
