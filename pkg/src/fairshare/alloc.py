"""Fluid allocation solvers: DRF, PF, and BMF, plus their property checkers.

All solvers share one contract: given a normalized requirement matrix and
per-class transaction counts, return per-transaction progress rates that
satisfy the capacity constraints sum_k n_k phi_k a_kj <= 1. Classes with
multiplicity 0 are treated as absent and receive rate 0.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .model import TOL, Allocation, RequirementMatrix, saturated_set


class AllocObjective(str, Enum):
    DRF = "drf"
    PF = "pf"
    BMF = "bmf"


class AllocationError(RuntimeError):
    """Base class for solver failures."""


class PFConvergenceError(AllocationError):
    def __init__(self, residual: float, iterations: int):
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"PF solver did not reach the target residual after {iterations} "
            f"iterations (final residual {residual:.3e})"
        )


class BMFNotFoundError(AllocationError):
    """No feasible class-to-bottleneck mapping and the iterative fallback
    failed. Existence of such an allocation is not guaranteed in general."""


@dataclass(frozen=True)
class BottleneckMapping:
    """Resource index each class is matched to (None for absent classes).
    ``heuristic`` marks results from the iterative water-fill fallback rather
    than exact mapping enumeration."""

    assignment: tuple[int | None, ...]
    heuristic: bool = False


def _prepare(req: RequirementMatrix, mult) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if mult is None:
        mult = np.ones(req.num_classes, dtype=int)
    mult = np.asarray(mult, dtype=int)
    if mult.shape != (req.num_classes,):
        raise ValueError(f"multiplicities shape {mult.shape} does not match {req.num_classes} classes")
    if np.any(mult < 0):
        raise ValueError("multiplicities must be nonnegative")
    active = np.flatnonzero(mult > 0)
    return mult, active, req.a[active]


def _embed(req: RequirementMatrix, mult, active, phi_active, duals=None) -> Allocation:
    phi = np.zeros(req.num_classes)
    phi[active] = phi_active
    usage = (mult * phi) @ req.a
    return Allocation(phi, mult, duals=duals, bottlenecks=saturated_set(req, usage))


# ---------------------------------------------------------------------------
# DRF: progressive filling

def solve_drf(req: RequirementMatrix, mult=None) -> Allocation:
    """Water-filling: raise all rates at a common pace; whenever a resource
    saturates, freeze every class with a positive requirement on it; repeat
    until all classes are frozen. Classes never freeze on resources they do
    not use."""
    mult, active, A = _prepare(req, mult)
    K, J = A.shape
    n = mult[active].astype(float)
    phi = np.zeros(K)
    frozen = np.zeros(K, dtype=bool)
    saturated = np.zeros(J, dtype=bool)

    while not frozen.all():
        fill_rate = n[~frozen] @ A[~frozen]  # consumption rate per resource
        remaining = 1.0 - (n * phi) @ A
        candidates = ~saturated & (fill_rate > 0)
        if not candidates.any():
            break  # unreachable for valid matrices; every row has a 1 entry
        steps = np.full(J, np.inf)
        steps[candidates] = remaining[candidates] / fill_rate[candidates]
        step = steps.min()
        phi[~frozen] += step
        newly = candidates & (steps <= step * (1.0 + 1e-12))
        saturated |= newly
        frozen |= (A[:, newly] > 0).any(axis=1)

    return _embed(req, mult, active, phi)


# ---------------------------------------------------------------------------
# PF: maximize sum_k n_k log(phi_k)

def _pf_residual(A, n, nu, phi) -> float:
    usage = (n * phi) @ A
    primal = max(0.0, float(usage.max(initial=0.0)) - 1.0)
    slack = float(np.abs(nu * (1.0 - usage)).max(initial=0.0))
    station = float(np.abs(1.0 - phi * (A @ nu)).max(initial=0.0))
    return max(primal, slack, station)


def _pf_newton_inner(Ab, n, nb, inner_tol, max_steps=60):
    """Newton iteration for usage = 1 over a fixed price set, with a
    positivity-preserving backtracking line search on the dual objective.
    Returns (prices, converged); a False flag with the last iterate signals
    the caller that some price is pinned at the boundary."""
    for _ in range(max_steps):
        denom = Ab @ nb
        if np.any(denom <= 0):
            return nb, False
        phi = 1.0 / denom
        g = (n * phi) @ Ab - 1.0
        if np.abs(g).max() <= inner_tol:
            return nb, True
        H = Ab.T @ (Ab * (n * phi * phi)[:, None])
        try:
            delta = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(H, g, rcond=None)[0]
        dual = nb.sum() - float(n @ np.log(denom))
        alpha = 1.0
        while alpha > 1e-14:
            trial = nb + alpha * delta
            if np.all(trial > 0):
                td = Ab @ trial
                if np.all(td > 0):
                    tdual = trial.sum() - float(n @ np.log(td))
                    if tdual <= dual + 1e-14 * (1.0 + abs(dual)):
                        break
            alpha *= 0.5
        else:
            return nb, False
        nb = nb + alpha * delta
    return nb, False


def _pf_newton_polish(A, n, nu0, inner_tol=1e-13):
    """Active-set Newton on the dual: saturate a growing set of priced
    resources, starting from the most loaded one, dropping prices pinned at
    zero, until complementary slackness holds everywhere."""
    K, J = A.shape
    supported = (A > 0).any(axis=0)
    usage0 = (n / (A @ np.maximum(nu0, 1e-300))) @ A
    in_set = np.zeros(J, dtype=bool)
    in_set[int(np.argmax(np.where(supported, usage0, -np.inf)))] = True
    for k in range(K):  # every class needs a priced resource it uses
        if not (A[k, in_set] > 0).any():
            in_set[int(np.argmax(A[k]))] = True

    nu = np.zeros(J)
    for _ in range(6 * J + 10):
        cols = np.flatnonzero(in_set)
        seed = np.where(nu[cols] > 0, nu[cols], max(float(n.sum()) / len(cols), 1e-6))
        nb, converged = _pf_newton_inner(A[:, cols], n, seed, inner_tol)
        if not converged:
            if len(cols) <= 1:
                return None
            # a price is stuck at the boundary; retire the smallest and retry
            in_set[cols[int(np.argmin(nb))]] = False
            nu = np.where(in_set, nu, 0.0)
            covered = (A[:, in_set] > 0).any(axis=1)
            if not covered.all():
                return None
            continue
        nu = np.zeros(J)
        nu[cols] = nb
        phi = 1.0 / (A @ nu)
        usage = (n * phi) @ A
        grow = supported & ~in_set & (usage > 1.0 + inner_tol)
        if not grow.any():
            return phi, nu
        in_set[int(np.argmax(np.where(grow, usage, -np.inf)))] = True
    return None


def solve_pf(
    req: RequirementMatrix,
    mult=None,
    *,
    residual_target: float = 1e-10,
    max_iterations: int = 100_000,
) -> Allocation:
    """Damped multiplicative update on the resource prices (phi_k is the
    reciprocal of each class's priced requirement, prices move with resource
    usage), polished by an active-set Newton step. Returns the allocation
    with its dual prices; raises if the residual target cannot be met."""
    mult, active, A = _prepare(req, mult)
    K, J = A.shape
    if K == 0:
        return Allocation(np.zeros(req.num_classes), mult, duals=np.zeros(J))
    n = mult[active].astype(float)
    supported = (A > 0).any(axis=0)

    nu = np.where(supported, float(K), 0.0)
    phi = np.zeros(K)
    best = np.inf
    polish_at = 4  # grows geometrically; most solves finish on the first try

    for iterations in range(max_iterations):
        denom = A @ nu
        phi = 1.0 / denom
        usage = (n * phi) @ A
        resid = _pf_residual(A, n, nu, phi)
        best = min(best, resid)
        if resid < residual_target:
            break
        if iterations >= polish_at or iterations == max_iterations - 1:
            polished = _pf_newton_polish(A, n, nu)
            if polished is not None:
                p_phi, p_nu = polished
                if _pf_residual(A, n, p_nu, p_phi) < residual_target:
                    phi, nu = p_phi, p_nu
                    break
            if iterations == max_iterations - 1:
                raise PFConvergenceError(best, iterations + 1)
            polish_at *= 4
        nu[supported] *= np.sqrt(usage[supported])
    else:
        raise PFConvergenceError(best, max_iterations)

    # shave any residual capacity overshoot so Eq-(1)-style feasibility is exact
    usage = (n * phi) @ A
    over = float(usage.max(initial=0.0))
    if over > 1.0:
        phi = phi / over
    return _embed(req, mult, active, phi, duals=nu)


# ---------------------------------------------------------------------------
# BMF: every class gets a maximal share on some saturated resource

def _bmf_assignment_valid(A, n, phi, assignment, tol=TOL):
    usage = (n * phi) @ A
    if usage.size and usage.max() > 1.0 + tol:
        return False
    shares = phi[:, None] * A
    top = shares.max(axis=0)
    for k, j in enumerate(assignment):
        if usage[j] < 1.0 - tol:
            return False
        if A[k, j] <= 0 or shares[k, j] < top[j] - tol:
            return False
    return True


def bmf_conditions(req: RequirementMatrix, alloc: Allocation, tol: float = TOL):
    """Check the defining conditions on a candidate point: feasibility plus,
    for every class, a saturated resource it uses on which its
    per-transaction share is maximal. Returns (ok, per-class mapping)."""
    mult = alloc.multiplicities
    active = np.flatnonzero(mult > 0)
    if not active.size:
        return True, tuple([None] * req.num_classes)
    A = req.a[active]
    n = mult[active].astype(float)
    phi = alloc.phi[active]
    usage = (n * phi) @ A
    if usage.size and usage.max() > 1.0 + tol:
        return False, None
    shares = phi[:, None] * A
    top = shares.max(axis=0)
    mapping: list[int | None] = [None] * req.num_classes
    for i, k in enumerate(active):
        found = None
        for j in range(req.num_resources):
            if usage[j] >= 1.0 - tol and A[i, j] > 0 and shares[i, j] >= top[j] - tol:
                found = j
                break
        if found is None:
            return False, None
        mapping[k] = found
    return True, tuple(mapping)


def _bmf_enumerate(A, n):
    K, J = A.shape
    for assignment in itertools.product(range(J), repeat=K):
        usable = all(A[k, assignment[k]] > 0 for k in range(K))
        if not usable:
            continue
        rows = []
        rhs = []
        for j in sorted(set(assignment)):
            rows.append(n * A[:, j])
            rhs.append(1.0)
            members = [k for k in range(K) if assignment[k] == j]
            base = members[0]
            for k in members[1:]:
                r = np.zeros(K)
                r[k] = A[k, j]
                r[base] = -A[base, j]
                rows.append(r)
                rhs.append(0.0)
        M = np.vstack(rows)
        try:
            phi = np.linalg.solve(M, np.asarray(rhs))
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(phi)) or np.any(phi <= TOL):
            continue
        if _bmf_assignment_valid(A, n, phi, assignment):
            return phi, assignment
    return None


def _waterfill_level(share_caps, weights):
    """Level t with sum_k w_k * min(cap_k, t) = 1 (caps may be infinite)."""
    order = np.argsort(share_caps)
    caps = share_caps[order]
    w = weights[order]
    consumed = 0.0
    remaining_w = w.sum()
    for cap, wk in zip(caps, w):
        if not np.isfinite(cap):
            break
        level = (1.0 - consumed) / remaining_w
        if level <= cap:
            return level
        consumed += wk * cap
        remaining_w -= wk
    return (1.0 - consumed) / remaining_w if remaining_w > 0 else np.inf


def _bmf_waterfill(A, n, max_sweeps=10_000, tol=1e-10):
    """Fixed point of per-resource weighted max-min sharing (weights are the
    reciprocal requirements): each resource grants every class a rate cap,
    each class runs at its smallest cap, repeat to convergence."""
    K, J = A.shape
    limits = np.full((J, K), np.inf)
    phi_prev = None
    for _ in range(max_sweeps):
        for j in range(J):
            users = A[:, j] > 0
            if not users.any():
                limits[j] = np.inf
                continue
            others = np.delete(limits, j, axis=0)
            caps = others.min(axis=0) if others.size else np.full(K, np.inf)
            share_caps = np.where(users, A[:, j] * caps, 0.0)
            demand = float((n * share_caps).sum())
            if demand <= 1.0 + 1e-15:
                limits[j] = np.inf
                continue
            level = _waterfill_level(share_caps[users], n[users])
            limits[j] = np.where(users, level / np.where(users, A[:, j], 1.0), np.inf)
        phi = limits.min(axis=0)
        if phi_prev is not None and np.abs(phi - phi_prev).max() < tol:
            return phi
        phi_prev = phi
    return None


def solve_bmf(
    req: RequirementMatrix,
    mult=None,
    *,
    mapping_budget: int = 200_000,
) -> tuple[Allocation, BottleneckMapping]:
    """Enumerate class-to-bottleneck mappings in lexicographic order, solve
    the induced linear system (saturation plus equal shares) for each, and
    return the first feasible one that passes the defining conditions. Falls
    back to iterative per-resource water-filling when the enumeration would
    exceed ``mapping_budget`` systems."""
    mult, active, A = _prepare(req, mult)
    K, J = A.shape
    if K == 0:
        empty = Allocation(np.zeros(req.num_classes), mult, duals=None)
        return empty, BottleneckMapping(tuple([None] * req.num_classes))

    heuristic = False
    result = None
    if K * (J ** K) <= mapping_budget:
        result = _bmf_enumerate(A, mult[active].astype(float))
    if result is None:
        phi = _bmf_waterfill(A, mult[active].astype(float))
        if phi is None:
            raise BMFNotFoundError(
                "mapping enumeration found no feasible bottleneck assignment "
                "and the water-fill fallback did not converge"
            )
        heuristic = True
        alloc = _embed(req, mult, active, phi)
        ok, mapping = bmf_conditions(req, alloc)
        if not ok:
            raise BMFNotFoundError("water-fill fallback converged to a non-BMF point")
        return alloc, BottleneckMapping(mapping, heuristic=True)

    phi, assignment = result
    alloc = _embed(req, mult, active, phi)
    mapping: list[int | None] = [None] * req.num_classes
    for i, k in enumerate(active):
        mapping[k] = int(assignment[i])
    return alloc, BottleneckMapping(tuple(mapping), heuristic=heuristic)


def solve(objective: AllocObjective, req: RequirementMatrix, mult=None) -> Allocation:
    """Uniform entry point used by the simulators."""
    objective = AllocObjective(objective)
    if objective is AllocObjective.DRF:
        return solve_drf(req, mult)
    if objective is AllocObjective.PF:
        return solve_pf(req, mult)
    return solve_bmf(req, mult)[0]


# ---------------------------------------------------------------------------
# Property checks

@dataclass(frozen=True)
class PropertyReport:
    capacity_ok: bool
    capacity_violation: float
    pareto_ok: bool
    sharing_incentive_ok: bool
    min_share_margin: float
    single_resource_fair: bool | None
    kkt_stationarity: float | None
    kkt_slackness: float | None
    bmf_ok: bool
    bmf_mapping: tuple | None

    def all_ok(self, objective: AllocObjective | None = None) -> bool:
        ok = self.capacity_ok and self.pareto_ok and self.sharing_incentive_ok
        if self.single_resource_fair is not None:
            ok = ok and self.single_resource_fair
        if objective is AllocObjective.PF and self.kkt_stationarity is not None:
            ok = ok and self.kkt_stationarity <= 1e-8 and self.kkt_slackness <= 1e-8
        if objective is AllocObjective.BMF:
            ok = ok and self.bmf_ok
        return ok


def check_properties(req: RequirementMatrix, alloc: Allocation, tol: float = TOL) -> PropertyReport:
    """Audit an allocation: capacity, Pareto efficiency (every class touches
    a saturated resource it uses), sharing incentive (per-transaction
    dominant share at least 1/n), single-resource fairness when J = 1, the
    KKT residuals when dual prices are attached, and the bottleneck-mapping
    conditions."""
    mult = alloc.multiplicities
    active = np.flatnonzero(mult > 0)
    usage = alloc.usage(req)
    violation = float(usage.max(initial=0.0) - 1.0)
    capacity_ok = violation <= tol

    saturated = usage >= 1.0 - tol
    pareto_ok = True
    for k in active:
        if not np.any(saturated & (req.a[k] > 0)):
            pareto_ok = False
            break

    total = alloc.total_transactions()
    if active.size and total > 0:
        margin = float(alloc.phi[active].min() - 1.0 / total)
    else:
        margin = 0.0
    sharing_ok = margin >= -tol

    single_fair = None
    if req.num_resources == 1 and active.size:
        shares = alloc.phi[active] * req.a[active, 0]
        single_fair = bool(np.abs(shares - 1.0 / total).max() <= tol)

    kkt_stat = kkt_slack = None
    if alloc.duals is not None and active.size:
        priced = req.a[active] @ alloc.duals
        kkt_stat = float(np.abs(1.0 - alloc.phi[active] * priced).max())
        kkt_slack = float(np.abs(alloc.duals * (1.0 - usage)).max(initial=0.0))

    bmf_ok, bmf_mapping = bmf_conditions(req, alloc, tol=tol)

    return PropertyReport(
        capacity_ok=capacity_ok,
        capacity_violation=violation,
        pareto_ok=pareto_ok,
        sharing_incentive_ok=sharing_ok,
        min_share_margin=margin,
        single_resource_fair=single_fair,
        kkt_stationarity=kkt_stat,
        kkt_slackness=kkt_slack,
        bmf_ok=bmf_ok,
        bmf_mapping=bmf_mapping,
    )


# ---------------------------------------------------------------------------
# Exhaustive grid oracle (small instances, used by tests and `verify`)

def bmf_oracle(
    req: RequirementMatrix,
    mult=None,
    grid_step: float = 0.01,
    *,
    chunk: int = 200_000,
) -> np.ndarray:
    """Scan the feasible rate grid and return every point satisfying the
    bottleneck-max conditions within grid-scaled tolerances. Exhaustive, so
    restricted to at most 3 classes and 3 resources."""
    mult, active, A = _prepare(req, mult)
    K, J = A.shape
    if K > 3 or J > 3:
        raise ValueError("grid oracle is limited to 3 classes and 3 resources")
    if K == 0:
        return np.zeros((0, 0))
    n = mult[active].astype(float)
    weighted = A * n[:, None]  # row k: n_k * a_kj

    axes = []
    for k in range(K):
        top = int(np.floor(1.0 / (n[k] * grid_step) + 1e-9))
        axes.append(grid_step * np.arange(1, top + 1))
    sizes = np.array([len(ax) for ax in axes], dtype=np.int64)
    total = int(np.prod(sizes))
    strides = np.ones(K, dtype=np.int64)
    for k in range(K - 2, -1, -1):
        strides[k] = strides[k + 1] * sizes[k + 1]

    sat_slack = grid_step * weighted.sum(axis=0)  # per-resource saturation slack
    share_tol = 2.0 * grid_step
    accepted = []
    for start in range(0, total, chunk):
        idx = np.arange(start, min(start + chunk, total), dtype=np.int64)
        P = np.empty((idx.size, K))
        for k in range(K):
            P[:, k] = axes[k][(idx // strides[k]) % sizes[k]]
        usage = P @ weighted
        ok = np.all(usage <= 1.0 + 1e-12, axis=1)
        if not ok.any():
            continue
        P = P[ok]
        usage = usage[ok]
        saturated = usage >= 1.0 - sat_slack
        keep = np.ones(P.shape[0], dtype=bool)
        shares = P[:, :, None] * A[None, :, :]  # (M, K, J)
        top = shares.max(axis=1)  # (M, J)
        for k in range(K):
            cond = saturated & (A[k] > 0) & (shares[:, k, :] >= top - share_tol)
            keep &= cond.any(axis=1)
        accepted.append(P[keep])
    if not accepted:
        return np.zeros((0, K))
    return np.vstack(accepted)
