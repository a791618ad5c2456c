"""Kinetically constrained spin models: East and AD out of equilibrium."""

from .engine import (
    EventLog,
    InitialMeasureSpec,
    Observable,
    Window,
    estimate_expectation,
    generate_events,
    sample_initial,
    simulate,
    simulate_batch,
    simulate_discrete,
    truncation_window,
)
from .errors import KCSMError
from .model import (
    AD,
    EAST,
    FA1F,
    BoundaryCondition,
    ConstraintRule,
    Model,
    Topology,
    build_ad_tree,
    build_east_chain,
    build_fa1f_chain,
    is_legal,
)
from .rng import Seed

__version__ = "0.1.0"
