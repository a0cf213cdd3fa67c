"""Domain types shared by the allocation solvers and simulators.

All requirement matrices are row-normalized: each class's largest
per-unit-of-progress requirement equals 1, so a progress rate of 1 means
"full use of the dominant resource". Capacities are normalized to 1.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Global numeric tolerance for constraint satisfaction and equality tests.
TOL = 1e-9


class ValidationError(ValueError):
    """Raised when an input violates a domain-type invariant."""


def _readonly(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=float, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class RequirementMatrix:
    """Per-class resource requirements, one row per class, one column per
    resource. Row maxima are 1; ``row_scales`` holds the pre-normalization
    maxima so raw work units can be recovered."""

    a: np.ndarray
    row_scales: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float)
        if a.ndim != 2:
            raise ValidationError(f"requirement matrix must be 2-D, got shape {a.shape}")
        if np.any(a < 0):
            raise ValidationError("requirement entries must be nonnegative")
        if a.shape[0] > 0 and a.shape[1] > 0:
            row_max = a.max(axis=1)
            if np.any(np.abs(row_max - 1.0) > TOL):
                bad = int(np.argmax(np.abs(row_max - 1.0)))
                raise ValidationError(
                    f"row {bad} has max {row_max[bad]!r}; rows must be normalized to max 1"
                )
        elif a.shape[0] > 0:
            raise ValidationError("rows with zero resources cannot be normalized")
        object.__setattr__(self, "a", _readonly(a))
        object.__setattr__(self, "row_scales", _readonly(np.asarray(self.row_scales, dtype=float)))
        if self.row_scales.shape != (a.shape[0],):
            raise ValidationError("row_scales must have one entry per class")

    @property
    def num_classes(self) -> int:
        return self.a.shape[0]

    @property
    def num_resources(self) -> int:
        return self.a.shape[1]

    def dominant_resources(self) -> np.ndarray:
        """Index of a resource with requirement 1 for each class."""
        return np.argmax(self.a, axis=1)


def normalize(raw) -> RequirementMatrix:
    """Scale each row of a nonnegative matrix by its maximum.

    Returns the normalized matrix together with the per-row scale factors
    (the original row maxima). Rejects all-zero rows, naming the offending
    row.
    """
    a = np.asarray(raw, dtype=float)
    if a.size == 0:
        shape = a.shape if a.ndim == 2 else (0, 0)
        return RequirementMatrix(np.zeros(shape), np.zeros(shape[0]))
    if a.ndim != 2:
        raise ValidationError(f"requirement matrix must be 2-D, got shape {a.shape}")
    if np.any(a < 0):
        k, j = np.argwhere(a < 0)[0]
        raise ValidationError(f"negative requirement at row {k}, column {j}")
    scales = a.max(axis=1)
    zero_rows = np.flatnonzero(scales <= 0)
    if zero_rows.size:
        raise ValidationError(f"row {zero_rows[0]} is all zero; every class must use some resource")
    return RequirementMatrix(a / scales[:, None], scales)


@dataclass(frozen=True)
class Allocation:
    """Progress rates per class plus solver metadata.

    ``phi[k]`` is the per-transaction progress rate of class k, so class k
    consumes ``multiplicities[k] * phi[k] * a[k, j]`` of resource j. ``duals``
    is populated by the proportional-fairness solver; ``bottlenecks`` is the
    set of resources saturated within tolerance.
    """

    phi: np.ndarray
    multiplicities: np.ndarray
    duals: np.ndarray | None = None
    bottlenecks: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        mult = np.asarray(self.multiplicities, dtype=int)
        if phi.shape != mult.shape or phi.ndim != 1:
            raise ValidationError("phi and multiplicities must be 1-D and congruent")
        if np.any(phi < -TOL):
            raise ValidationError("progress rates must be nonnegative")
        if np.any(mult < 0):
            raise ValidationError("multiplicities must be nonnegative integers")
        object.__setattr__(self, "phi", _readonly(np.maximum(phi, 0.0)))
        mult = np.array(mult, copy=True)
        mult.flags.writeable = False
        object.__setattr__(self, "multiplicities", mult)
        object.__setattr__(self, "bottlenecks", frozenset(int(j) for j in self.bottlenecks))
        if self.duals is not None:
            object.__setattr__(self, "duals", _readonly(self.duals))

    @property
    def num_classes(self) -> int:
        return self.phi.shape[0]

    def usage(self, req: RequirementMatrix) -> np.ndarray:
        """Fraction of each resource consumed: sum_k n_k phi_k a_kj."""
        return (self.multiplicities * self.phi) @ req.a

    def total_transactions(self) -> int:
        return int(self.multiplicities.sum())


def saturated_set(req: RequirementMatrix, usage: np.ndarray, tol: float = TOL) -> frozenset[int]:
    return frozenset(int(j) for j in np.flatnonzero(usage >= 1.0 - tol))


@dataclass(frozen=True)
class WorkloadSpec:
    """Per-class demand: Poisson arrival rates and mean work per transaction.

    ``mean_work[k]`` is in progress units, so a lone class-k transaction
    (rate 1 under normalized rows) completes in ``mean_work[k]`` time units
    on average. The load vector is ``rho = arrival_rates * mean_work``.
    """

    arrival_rates: np.ndarray
    mean_work: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.arrival_rates, dtype=float)
        work = np.asarray(self.mean_work, dtype=float)
        if lam.shape != work.shape or lam.ndim != 1:
            raise ValidationError("arrival_rates and mean_work must be 1-D and congruent")
        # Zero arrival rates are accepted as the no-demand limit of a class.
        if np.any(lam < 0):
            raise ValidationError("arrival rates must be nonnegative")
        if np.any(work <= 0):
            raise ValidationError("mean work must be positive")
        object.__setattr__(self, "arrival_rates", _readonly(lam))
        object.__setattr__(self, "mean_work", _readonly(work))

    @property
    def num_classes(self) -> int:
        return self.arrival_rates.shape[0]

    @property
    def completion_rates(self) -> np.ndarray:
        """Per-class work-completion rates (reciprocal mean work)."""
        return 1.0 / self.mean_work

    @property
    def rho(self) -> np.ndarray:
        return self.arrival_rates * self.mean_work

    def scaled(self, factor: float) -> "WorkloadSpec":
        return WorkloadSpec(self.arrival_rates * factor, self.mean_work)


@dataclass(frozen=True)
class SystemState:
    """Number of transactions in progress per class."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=int)
        if counts.ndim != 1 or np.any(counts < 0):
            raise ValidationError("counts must be a 1-D vector of nonnegative integers")
        counts = np.array(counts, copy=True)
        counts.flags.writeable = False
        object.__setattr__(self, "counts", counts)

    def as_tuple(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.counts)


@dataclass(frozen=True)
class StabilityReport:
    """Per-resource offered load and the stability predicate max_j load < 1."""

    resource_loads: np.ndarray
    stable: bool


def check_stability(req: RequirementMatrix, load: WorkloadSpec) -> StabilityReport:
    """Offered load per resource, L_j = sum_k rho_k a_kj, and whether the
    demand is within the capacity region (strict inequality on every
    resource)."""
    if load.num_classes != req.num_classes:
        raise ValidationError(
            f"workload has {load.num_classes} classes, matrix has {req.num_classes}"
        )
    loads = load.rho @ req.a
    stable = bool(loads.size == 0 or loads.max() < 1.0)
    return StabilityReport(_readonly(loads), stable)
