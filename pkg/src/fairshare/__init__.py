"""Multi-resource fair sharing: fluid allocations, Markovian demand models,
and packet-level fair-queueing simulation."""

from .model import (
    TOL,
    Allocation,
    RequirementMatrix,
    StabilityReport,
    SystemState,
    ValidationError,
    WorkloadSpec,
    check_stability,
    normalize,
)
from .alloc import (
    AllocObjective,
    AllocationError,
    BMFNotFoundError,
    BottleneckMapping,
    PFConvergenceError,
    PropertyReport,
    bmf_conditions,
    bmf_oracle,
    check_properties,
    solve,
    solve_bmf,
    solve_drf,
    solve_pf,
)

__version__ = "0.1.0"

__all__ = [
    "TOL",
    "Allocation",
    "AllocObjective",
    "AllocationError",
    "BMFNotFoundError",
    "BottleneckMapping",
    "PFConvergenceError",
    "PropertyReport",
    "RequirementMatrix",
    "StabilityReport",
    "SystemState",
    "ValidationError",
    "WorkloadSpec",
    "bmf_conditions",
    "bmf_oracle",
    "check_properties",
    "check_stability",
    "normalize",
    "solve",
    "solve_bmf",
    "solve_drf",
    "solve_pf",
]
