"""Flow-level Markovian demand: event-driven simulation of the transaction
birth-death process and numerical stationary analysis on a truncated state
space. Both re-solve the fluid allocation for every visited state, so service
rates reflect the configured sharing objective.
"""
from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy import stats

from . import alloc
from .alloc import AllocObjective
from .model import RequirementMatrix, ValidationError, WorkloadSpec, check_stability

DEFAULT_HORIZON = 100_000
DEFAULT_WARMUP = 0.2
BATCHES = 20


class SimulationAborted(RuntimeError):
    """Raised when the allocation solver fails mid-run; carries the state."""

    def __init__(self, message: str, state: tuple[int, ...], sim_time: float):
        self.state = state
        self.sim_time = sim_time
        super().__init__(f"{message} (state={state}, t={sim_time:.6g})")


class StateSpaceError(RuntimeError):
    """Truncated state space exceeds the configured cap."""


@dataclass(frozen=True)
class FluidSimConfig:
    req: RequirementMatrix
    load: WorkloadSpec
    objective: AllocObjective
    horizon: int = DEFAULT_HORIZON
    warmup: float = DEFAULT_WARMUP
    rng_seed: int = 0

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValidationError("horizon must be positive")
        if not 0.0 <= self.warmup < 1.0:
            raise ValidationError("warmup fraction must be in [0, 1)")
        if self.load.num_classes != self.req.num_classes:
            raise ValidationError("workload and requirement matrix class counts differ")


@dataclass(frozen=True)
class ServiceRateEstimate:
    """Per-class service rates with 95% batch-means confidence half-widths.

    ``gamma`` is mean work over mean completion time from completed
    transactions; ``gamma_little`` is the arrival rate over the time-averaged
    transaction count. The two must agree within their confidence widths.
    """

    gamma: np.ndarray
    gamma_ci: np.ndarray
    gamma_little: np.ndarray
    gamma_little_ci: np.ndarray
    mean_counts: np.ndarray
    mean_count_ci: np.ndarray
    completed: np.ndarray
    batches: int


class AllocationCache:
    """Memoizes per-state fluid solves; states recur constantly in the
    birth-death process and the solves dominate runtime."""

    def __init__(self, req: RequirementMatrix, objective: AllocObjective):
        self.req = req
        self.objective = AllocObjective(objective)
        self._phi: dict[tuple[int, ...], np.ndarray] = {}

    def phi(self, state: tuple[int, ...]) -> np.ndarray:
        cached = self._phi.get(state)
        if cached is None:
            cached = alloc.solve(self.objective, self.req, np.asarray(state)).phi
            self._phi[state] = cached
        return cached

    def __len__(self) -> int:
        return len(self._phi)


def _halfwidth(values: np.ndarray) -> float:
    vals = values[np.isfinite(values)]
    if vals.size < 2:
        return float("nan")
    return float(stats.t.ppf(0.975, vals.size - 1) * vals.std(ddof=1) / np.sqrt(vals.size))


class _DrawBuffer:
    """Block-buffered RNG draws; one stream, deterministic order."""

    def __init__(self, rng: np.random.Generator, block: int = 1 << 15):
        self._rng = rng
        self._block = block
        self._uni = rng.random(block)
        self._exp = rng.exponential(1.0, block)
        self._iu = 0
        self._ie = 0

    def uniform(self) -> float:
        if self._iu == self._block:
            self._uni = self._rng.random(self._block)
            self._iu = 0
        v = self._uni[self._iu]
        self._iu += 1
        return v

    def exponential(self) -> float:
        if self._ie == self._block:
            self._exp = self._rng.exponential(1.0, self._block)
            self._ie = 0
        v = self._exp[self._ie]
        self._ie += 1
        return v


def simulate(config: FluidSimConfig, cache: AllocationCache | None = None) -> ServiceRateEstimate:
    """Run the birth-death process for ``horizon`` arrivals, re-solving the
    fluid allocation at every state change. Produces time-averaged counts,
    service-rate estimates by the completion-time and arrival-rate routes,
    and batch-means confidence intervals."""
    req, load = config.req, config.load
    K = req.num_classes
    report = check_stability(req, load)
    if not report.stable:
        warnings.warn(
            f"offered load {report.resource_loads} is outside the capacity region; "
            "running anyway (transient behavior only)",
            stacklevel=2,
        )
    lam = [float(x) for x in load.arrival_rates]
    lam_total = float(sum(lam))
    if lam_total <= 0:
        raise ValidationError("simulation requires a positive total arrival rate")
    mu = [float(x) for x in load.completion_rates]
    mean_work = [float(x) for x in load.mean_work]
    if cache is None:
        cache = AllocationCache(req, config.objective)
    elif cache.objective != AllocObjective(config.objective) or cache.req is not req:
        raise ValidationError("allocation cache was built for a different problem")

    rng = np.random.default_rng(config.rng_seed)
    draws = _DrawBuffer(rng)

    counts = [0] * K
    arrival_times: list[list[float]] = [[] for _ in range(K)]
    horizon = config.horizon
    warm_target = int(round(config.warmup * horizon))
    post = horizon - warm_target
    started = warm_target == 0

    area = np.zeros((BATCHES, K))
    duration = np.zeros(BATCHES)
    soj_sum = np.zeros((BATCHES, K))
    soj_cnt = np.zeros((BATCHES, K), dtype=np.int64)
    batch = 0

    t = 0.0
    arrivals = 0
    death_rates = [0.0] * K
    state = tuple(counts)
    while True:
        try:
            phi = cache.phi(state)
        except alloc.AllocationError as exc:
            raise SimulationAborted(f"allocation solve failed: {exc}", state, t) from exc
        death_total = 0.0
        for k in range(K):
            death_rates[k] = counts[k] * phi[k] * mu[k]
            death_total += death_rates[k]
        total_rate = lam_total + death_total

        dt = draws.exponential() / total_rate
        if started:
            duration[batch] += dt
            for k in range(K):
                if counts[k]:
                    area[batch, k] += counts[k] * dt
        t += dt

        u = draws.uniform() * total_rate
        if u < lam_total:
            k = 0
            acc = lam[0]
            while u >= acc:
                k += 1
                acc += lam[k]
            counts[k] += 1
            arrival_times[k].append(t)
            arrivals += 1
            if not started and arrivals >= warm_target:
                started = True
            elif started:
                batch = (arrivals - warm_target) * BATCHES // post
                if batch >= BATCHES:
                    batch = BATCHES - 1
            if arrivals >= horizon:
                break
        else:
            u -= lam_total
            k = 0
            acc = death_rates[0]
            while u >= acc:
                k += 1
                acc += death_rates[k]
            victims = arrival_times[k]
            idx = int(draws.uniform() * counts[k])
            born = victims[idx]
            victims[idx] = victims[-1]
            victims.pop()
            counts[k] -= 1
            if started:
                soj_sum[batch, k] += t - born
                soj_cnt[batch, k] += 1
        state = tuple(counts)

    total_area = area.sum(axis=0)
    total_time = duration.sum()
    mean_counts = total_area / total_time
    completed = soj_cnt.sum(axis=0)
    # Little's-law route: E[T] = E[n]/lambda, so gamma = rho / E[n]
    # (identical to lambda/E[n] when mean work is 1, the model's usual scale)
    rho = np.asarray(lam) * np.asarray(mean_work)
    with np.errstate(divide="ignore", invalid="ignore"):
        mean_sojourn = np.where(completed > 0, soj_sum.sum(axis=0) / completed, np.nan)
        gamma = np.asarray(mean_work) / mean_sojourn
        gamma_little = rho / mean_counts

        batch_mean_counts = area / duration[:, None]
        batch_little = rho / batch_mean_counts
        batch_gamma = np.asarray(mean_work) / (soj_sum / soj_cnt)

    return ServiceRateEstimate(
        gamma=gamma,
        gamma_ci=np.array([_halfwidth(batch_gamma[:, k]) for k in range(K)]),
        gamma_little=gamma_little,
        gamma_little_ci=np.array([_halfwidth(batch_little[:, k]) for k in range(K)]),
        mean_counts=mean_counts,
        mean_count_ci=np.array([_halfwidth(batch_mean_counts[:, k]) for k in range(K)]),
        completed=completed,
        batches=BATCHES,
    )


# ---------------------------------------------------------------------------
# Truncated stationary analysis

@dataclass(frozen=True)
class StationaryDistribution:
    """Stationary mass over the truncated count lattice. ``deficit`` is the
    probability on the truncation boundary (states that would overflow),
    reported so truncation error is never hidden."""

    n_max: int
    probabilities: np.ndarray  # shape (n_max+1,) * K
    deficit: float

    def mean_counts(self) -> np.ndarray:
        K = self.probabilities.ndim
        grid = np.indices(self.probabilities.shape)
        return np.array([(grid[k] * self.probabilities).sum() for k in range(K)])


def stationary_solve(
    req: RequirementMatrix,
    load: WorkloadSpec,
    objective: AllocObjective,
    n_max: int,
    *,
    state_cap: int = 1_000_000,
    cache: AllocationCache | None = None,
) -> tuple[StationaryDistribution, np.ndarray]:
    """Build the truncated generator with per-state allocations, solve the
    global balance equations, and derive mean counts and exact service rates
    on the truncated chain."""
    K = req.num_classes
    if load.num_classes != K:
        raise ValidationError("workload and requirement matrix class counts differ")
    size = (n_max + 1) ** K
    if size > state_cap:
        raise StateSpaceError(f"state space has {size} states, cap is {state_cap}")
    if cache is None:
        cache = AllocationCache(req, objective)

    lam = load.arrival_rates
    mu = load.completion_rates
    shape = (n_max + 1,) * K
    strides = np.array([(n_max + 1) ** (K - 1 - k) for k in range(K)], dtype=np.int64)

    rows: list[np.ndarray] = []
    cols: list[np.ndarray] = []
    vals: list[np.ndarray] = []
    states = np.stack(np.unravel_index(np.arange(size), shape), axis=1)
    diag = np.zeros(size)
    phis = np.empty((size, K))
    for idx in range(size):
        phis[idx] = cache.phi(tuple(int(c) for c in states[idx]))
    for k in range(K):
        can_birth = states[:, k] < n_max
        if lam[k] > 0 and can_birth.any():
            src = np.flatnonzero(can_birth)
            rows.append(src)
            cols.append(src + strides[k])
            rate = np.full(src.size, lam[k])
            vals.append(rate)
            diag[src] -= rate
        can_die = states[:, k] > 0
        if can_die.any():
            src = np.flatnonzero(can_die)
            rate = states[src, k] * phis[src, k] * mu[k]
            rows.append(src)
            cols.append(src - strides[k])
            vals.append(rate)
            diag[src] -= rate
    rows.append(np.arange(size))
    cols.append(np.arange(size))
    vals.append(diag)

    Q = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size),
    ).tocsr()

    # global balance: pi Q = 0 with one equation replaced by normalization
    QT = Q.transpose().tocsr()
    system = sp.vstack([QT[:-1], sp.csr_matrix(np.ones((1, size)))]).tocsc()
    rhs = np.zeros(size)
    rhs[-1] = 1.0
    pi = spla.spsolve(system, rhs)
    pi = np.where(pi > 0, pi, 0.0)
    pi /= pi.sum()

    residual = float(np.abs(pi @ Q).max())
    if residual > 1e-8:
        raise RuntimeError(f"stationary solve residual {residual:.3e} too large")

    boundary = (states == n_max).any(axis=1)
    deficit = float(pi[boundary].sum())
    mean_counts = pi @ states
    rho = lam * load.mean_work
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(mean_counts > 0, rho / mean_counts, np.nan)

    dist = StationaryDistribution(n_max=n_max, probabilities=pi.reshape(shape), deficit=deficit)
    return dist, gamma


# ---------------------------------------------------------------------------
# Load sweeps

@dataclass(frozen=True)
class SweepCell:
    load: float
    objective: AllocObjective
    class_index: int
    gamma: float
    gamma_ci: float
    mean_count: float
    mean_count_ci: float
    seed: int


def scale_direction(req: RequirementMatrix, load_direction, target: float) -> np.ndarray:
    """Per-class loads proportional to ``load_direction`` whose heaviest
    resource load equals ``target``."""
    direction = np.asarray(load_direction, dtype=float)
    if np.any(direction < 0) or direction.max(initial=0.0) <= 0:
        raise ValidationError("load direction must be nonnegative and nonzero")
    per_unit = float((direction @ req.a).max())
    return direction * (target / per_unit)


def derive_seed(base_seed: int, *indices: int) -> int:
    return int(np.random.SeedSequence((base_seed, *indices)).generate_state(1)[0])


def _sweep_one(args) -> list[SweepCell]:
    req, mean_work, objective, load_value, rho, seed, horizon, warmup = args
    spec = WorkloadSpec(rho / mean_work, mean_work)
    config = FluidSimConfig(req, spec, objective, horizon=horizon, warmup=warmup, rng_seed=seed)
    est = simulate(config)
    return [
        SweepCell(
            load=load_value,
            objective=objective,
            class_index=k,
            gamma=float(est.gamma[k]),
            gamma_ci=float(est.gamma_ci[k]),
            mean_count=float(est.mean_counts[k]),
            mean_count_ci=float(est.mean_count_ci[k]),
            seed=seed,
        )
        for k in range(req.num_classes)
    ]


def sweep(
    req: RequirementMatrix,
    load_direction,
    objectives,
    load_grid,
    *,
    mean_work=None,
    horizon: int = DEFAULT_HORIZON,
    warmup: float = DEFAULT_WARMUP,
    base_seed: int = 0,
    max_workers: int | None = None,
) -> list[SweepCell]:
    """Simulate each objective at each max-resource-load grid point. Grid
    points run independently (optionally in a process pool); each run draws
    from its own stream derived from (seed, grid index, objective index)."""
    objectives = [AllocObjective(o) for o in objectives]
    grid = [float(x) for x in load_grid]
    if any(not 0.0 < g < 1.0 for g in grid):
        raise ValidationError("load grid points must lie in (0, 1)")
    if mean_work is None:
        mean_work = np.ones(req.num_classes)
    mean_work = np.asarray(mean_work, dtype=float)

    jobs = []
    for gi, load_value in enumerate(grid):
        rho = scale_direction(req, load_direction, load_value)
        for oi, objective in enumerate(objectives):
            seed = derive_seed(base_seed, gi, oi)
            jobs.append((req, mean_work, objective, load_value, rho, seed, horizon, warmup))

    if max_workers is not None and max_workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=max_workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(job) for job in jobs]
    cells = [cell for group in results for cell in group]
    cells.sort(key=lambda c: (c.load, c.objective.value, c.class_index))
    return cells
