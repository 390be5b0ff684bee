"""Dynamic customer-transfer policies for networks of parallel queues."""

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

__version__ = "0.1.0"

__all__ = [
    "CostModel",
    "GeneralSetup",
    "JointSetup",
    "LinearHolding",
    "NetworkModel",
    "PiecewiseAffineHolding",
    "PiecewiseConstantRate",
    "TransferCostSpec",
    "__version__",
]
