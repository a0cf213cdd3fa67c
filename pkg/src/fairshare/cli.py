"""Command-line entry point: configuration ingestion, experiment
orchestration, CSV emission, and the self-contained verification harness.

Subcommands: alloc, fluid-sim, stationary, packet-sim, sweep, verify.
Configurations are YAML documents validated against CONFIG_SCHEMA; the
positional CONFIG argument accepts either a file path or the name of a
bundled scenario (see ``fairshare.scenarios``).
"""
from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from importlib import resources

import jsonschema
import numpy as np
import yaml

from . import alloc, dynamics, packetsim
from .alloc import AllocObjective
from .model import RequirementMatrix, ValidationError, WorkloadSpec, check_stability, normalize

SEED_ENV_VAR = "FAIRSHARE_SEED"
CSV_HEADER = "scenario,engine,objective,load,class,metric,value,ci,seed"

ENGINES = ("static-alloc", "fluid-sim", "stationary", "packet-sim")

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["scenario", "engine", "requirements"],
    "additionalProperties": False,
    "properties": {
        "scenario": {"type": "string", "minLength": 1},
        "engine": {"enum": list(ENGINES)},
        "objectives": {
            "type": "array",
            "items": {"enum": ["drf", "pf", "bmf"]},
            "minItems": 1,
            "uniqueItems": True,
        },
        "requirements": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number", "minimum": 0}},
        },
        "multiplicities": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "workload": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rates": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "mean_work": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                "load_direction": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "load_grid": {
                    "type": "array",
                    "items": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                    "minItems": 1,
                },
            },
        },
        "params": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seed": {"type": "integer", "minimum": 0},
                "horizon": {"type": "integer", "minimum": 1},
                "warmup": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "n_max": {"type": "integer", "minimum": 1},
                "state_cap": {"type": "integer", "minimum": 1},
                "window": {"type": "integer", "minimum": 1},
                "mean_flow_size": {"type": "number", "minimum": 1},
                "flow_arrivals": {"type": "integer", "minimum": 1},
                "propagation": {"type": "array", "items": {"type": "number", "minimum": 0}},
                "workers": {"type": "integer", "minimum": 1},
            },
        },
        "output": {"type": "string", "minLength": 1},
    },
}


class ConfigError(ValueError):
    """Configuration file failed to parse or validate."""


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: str
    engine: str
    objectives: tuple[AllocObjective, ...]
    raw_requirements: tuple[tuple[float, ...], ...]
    multiplicities: tuple[int, ...] | None
    rates: tuple[float, ...] | None
    mean_work: tuple[float, ...] | None
    load_direction: tuple[float, ...] | None
    load_grid: tuple[float, ...] | None
    seed: int
    horizon: int
    warmup: float
    n_max: int
    state_cap: int
    window: int
    mean_flow_size: float
    flow_arrivals: int
    propagation: tuple[float, ...] | None
    workers: int
    output: str | None

    def requirement_matrix(self) -> RequirementMatrix:
        return normalize([list(row) for row in self.raw_requirements])


def _scenario_path(name: str):
    base = resources.files("fairshare") / "scenarios"
    candidate = base / f"{name}.yaml"
    return candidate if candidate.is_file() else None


def bundled_scenarios() -> list[str]:
    base = resources.files("fairshare") / "scenarios"
    return sorted(p.name[: -len(".yaml")] for p in base.iterdir() if p.name.endswith(".yaml"))


def load_config(source: str, seed_override: int | None = None) -> ExperimentConfig:
    """Load and validate a YAML experiment configuration. ``source`` is a
    file path or a bundled scenario name. Seed precedence: explicit override,
    then the seed environment variable, then the file, then 0."""
    path = source
    if not os.path.exists(path):
        bundled = _scenario_path(source)
        if bundled is None:
            raise ConfigError(
                f"config '{source}' is neither a file nor a bundled scenario "
                f"(bundled: {', '.join(bundled_scenarios())})"
            )
        path = bundled
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigError(f"{where}: YAML parse error: {exc.problem}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"{path}: at {exc.json_path}: {exc.message}") from exc

    workload = doc.get("workload", {})
    params = doc.get("params", {})
    seed = params.get("seed", 0)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc
    if seed_override is not None:
        seed = seed_override

    K = len(doc["requirements"])

    def _per_class(name, values, where):
        if values is not None and len(values) != K:
            raise ConfigError(f"{path}: {where}.{name} needs {K} entries (one per class)")
        return tuple(values) if values is not None else None

    cfg = ExperimentConfig(
        scenario=doc["scenario"],
        engine=doc["engine"],
        objectives=tuple(AllocObjective(o) for o in doc.get("objectives", ["drf", "pf", "bmf"])),
        raw_requirements=tuple(tuple(float(x) for x in row) for row in doc["requirements"]),
        multiplicities=_per_class("multiplicities", doc.get("multiplicities"), "config"),
        rates=_per_class("rates", workload.get("rates"), "workload"),
        mean_work=_per_class("mean_work", workload.get("mean_work"), "workload"),
        load_direction=_per_class("load_direction", workload.get("load_direction"), "workload"),
        load_grid=tuple(workload["load_grid"]) if "load_grid" in workload else None,
        seed=seed,
        horizon=params.get("horizon", dynamics.DEFAULT_HORIZON),
        warmup=params.get("warmup", dynamics.DEFAULT_WARMUP),
        n_max=params.get("n_max", 30),
        state_cap=params.get("state_cap", 1_000_000),
        window=params.get("window", 30),
        mean_flow_size=params.get("mean_flow_size", 500.0),
        flow_arrivals=params.get("flow_arrivals", 10_000),
        propagation=_per_class("propagation", params.get("propagation"), "params"),
        workers=params.get("workers", 1),
        output=doc.get("output"),
    )
    rows = cfg.raw_requirements
    if rows and len({len(r) for r in rows}) != 1:
        raise ConfigError(f"{path}: requirement rows must all have the same length")
    return cfg


def _require(cfg: ExperimentConfig, attr: str, context: str):
    if getattr(cfg, attr) is None:
        raise ConfigError(f"scenario '{cfg.scenario}': {context} requires '{attr}'")


# ---------------------------------------------------------------------------
# Result rows and CSV emission

@dataclass(frozen=True)
class ResultRow:
    scenario: str
    engine: str
    objective: str
    load: float | None
    class_index: int
    metric: str  # gamma | E_n | phi | throughput
    value: float
    ci: float | None
    seed: int

    def sort_key(self):
        return (
            self.scenario,
            self.engine,
            self.objective,
            -1.0 if self.load is None else self.load,
            self.class_index,
            self.metric,
            self.seed,
        )


def _fmt(x: float | None) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return ""
    return f"{x:.9g}"


def write_results(rows, path: str) -> None:
    """CSV with a fixed header, 9 significant digits, and deterministic row
    order; re-running the producing command with the same seed yields a
    byte-identical file."""
    ordered = sorted(rows, key=ResultRow.sort_key)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for r in ordered:
            fh.write(
                f"{r.scenario},{r.engine},{r.objective},{_fmt(r.load)},"
                f"{r.class_index},{r.metric},{_fmt(r.value)},{_fmt(r.ci)},{r.seed}\n"
            )


# ---------------------------------------------------------------------------
# Engines

def _print_report(objective: AllocObjective, allocation, report, mapping=None):
    phi = ", ".join(f"{x:.9g}" for x in allocation.phi)
    print(f"[{objective.value}] phi = ({phi})")
    if allocation.duals is not None:
        duals = ", ".join(f"{x:.9g}" for x in allocation.duals)
        print(f"  duals = ({duals})")
    print(f"  bottlenecks = {sorted(allocation.bottlenecks)}")
    if mapping is not None:
        kind = "water-fill fixed point" if mapping.heuristic else "mapping enumeration"
        print(f"  bottleneck mapping = {list(mapping.assignment)} ({kind})")
    checks = [
        f"capacity={'ok' if report.capacity_ok else 'VIOLATED'}",
        f"pareto={'ok' if report.pareto_ok else 'FAIL'}",
        f"sharing_incentive={'ok' if report.sharing_incentive_ok else 'FAIL'}",
    ]
    if report.single_resource_fair is not None:
        checks.append(f"single_resource_fair={'ok' if report.single_resource_fair else 'FAIL'}")
    if objective is AllocObjective.PF and report.kkt_stationarity is not None:
        checks.append(f"kkt_residual={max(report.kkt_stationarity, report.kkt_slackness):.3e}")
    if objective is AllocObjective.BMF:
        checks.append(f"bottleneck_conditions={'ok' if report.bmf_ok else 'FAIL'}")
    print("  properties: " + " ".join(checks))


def run_static(cfg: ExperimentConfig) -> list[ResultRow]:
    req = cfg.requirement_matrix()
    if req.num_classes == 0:
        print("empty allocation: no classes")
        return []
    mult = cfg.multiplicities
    rows = []
    for objective in cfg.objectives:
        if objective is AllocObjective.BMF:
            allocation, mapping = alloc.solve_bmf(req, mult)
        else:
            allocation, mapping = alloc.solve(objective, req, mult), None
        report = alloc.check_properties(req, allocation)
        _print_report(objective, allocation, report, mapping)
        for k in range(req.num_classes):
            rows.append(ResultRow(cfg.scenario, cfg.engine, objective.value, None, k,
                                  "phi", float(allocation.phi[k]), None, cfg.seed))
    return rows


def _workload(cfg: ExperimentConfig, req: RequirementMatrix) -> WorkloadSpec:
    _require(cfg, "rates", "this engine")
    mean_work = cfg.mean_work if cfg.mean_work is not None else (1.0,) * req.num_classes
    return WorkloadSpec(np.asarray(cfg.rates), np.asarray(mean_work))


def run_fluid(cfg: ExperimentConfig) -> list[ResultRow]:
    req = cfg.requirement_matrix()
    load = _workload(cfg, req)
    level = float(check_stability(req, load).resource_loads.max(initial=0.0))
    rows = []
    for oi, objective in enumerate(cfg.objectives):
        seed = dynamics.derive_seed(cfg.seed, 0, oi)
        sim = dynamics.FluidSimConfig(req, load, objective, horizon=cfg.horizon,
                                      warmup=cfg.warmup, rng_seed=seed)
        est = dynamics.simulate(sim)
        for k in range(req.num_classes):
            rows.append(ResultRow(cfg.scenario, cfg.engine, objective.value, level, k,
                                  "gamma", float(est.gamma[k]), float(est.gamma_ci[k]), seed))
            rows.append(ResultRow(cfg.scenario, cfg.engine, objective.value, level, k,
                                  "E_n", float(est.mean_counts[k]),
                                  float(est.mean_count_ci[k]), seed))
    return rows


def run_stationary(cfg: ExperimentConfig) -> list[ResultRow]:
    req = cfg.requirement_matrix()
    load = _workload(cfg, req)
    level = float(check_stability(req, load).resource_loads.max(initial=0.0))
    rows = []
    for objective in cfg.objectives:
        dist, gamma = dynamics.stationary_solve(req, load, objective, cfg.n_max,
                                                state_cap=cfg.state_cap)
        counts = dist.mean_counts()
        print(f"[{objective.value}] truncation deficit = {dist.deficit:.3e}")
        for k in range(req.num_classes):
            rows.append(ResultRow(cfg.scenario, cfg.engine, objective.value, level, k,
                                  "gamma", float(gamma[k]), None, cfg.seed))
            rows.append(ResultRow(cfg.scenario, cfg.engine, objective.value, level, k,
                                  "E_n", float(counts[k]), None, cfg.seed))
    return rows


def run_packet(cfg: ExperimentConfig) -> list[ResultRow]:
    req = cfg.requirement_matrix()
    _require(cfg, "rates", "packet-sim")
    mean = cfg.mean_flow_size
    packet_loads = np.asarray(cfg.rates) * mean @ req.a
    level = float(packet_loads.max(initial=0.0))
    rows = []
    for oi, objective in enumerate(cfg.objectives):
        seed = dynamics.derive_seed(cfg.seed, 0, oi)
        sim = packetsim.PacketSimConfig(
            req, objective, tuple(cfg.rates), cfg.flow_arrivals, window=cfg.window,
            mean_flow_size=mean, propagation=cfg.propagation, rng_seed=seed)
        res = packetsim.run(sim)
        for k in range(req.num_classes):
            rows.append(ResultRow(cfg.scenario, cfg.engine, objective.value, level, k,
                                  "gamma", float(res.gamma[k]), float(res.gamma_ci[k]), seed))
            rows.append(ResultRow(cfg.scenario, cfg.engine, objective.value, level, k,
                                  "E_n", float(res.mean_counts[k]), None, seed))
    return rows


def _packet_sweep_one(args):
    cfg, load_value, objective, oi, gi = args
    req = cfg.requirement_matrix()
    rho = dynamics.scale_direction(req, cfg.load_direction, load_value)
    seed = dynamics.derive_seed(cfg.seed, gi, oi)
    sim = packetsim.PacketSimConfig(
        req, objective, tuple(rho / cfg.mean_flow_size), cfg.flow_arrivals,
        window=cfg.window, mean_flow_size=cfg.mean_flow_size,
        propagation=cfg.propagation, rng_seed=seed)
    res = packetsim.run(sim)
    return [
        ResultRow(cfg.scenario, cfg.engine, objective.value, load_value, k, "gamma",
                  float(res.gamma[k]), float(res.gamma_ci[k]), seed)
        for k in range(req.num_classes)
    ]


def run_sweep(cfg: ExperimentConfig, workers: int | None = None) -> list[ResultRow]:
    if cfg.engine not in ("fluid-sim", "packet-sim"):
        raise ConfigError("sweep requires engine fluid-sim or packet-sim")
    _require(cfg, "load_direction", "sweep")
    _require(cfg, "load_grid", "sweep")
    workers = workers if workers is not None else cfg.workers
    req = cfg.requirement_matrix()
    rows: list[ResultRow] = []
    if cfg.engine == "fluid-sim":
        mean_work = cfg.mean_work if cfg.mean_work is not None else (1.0,) * req.num_classes
        cells = dynamics.sweep(req, cfg.load_direction, cfg.objectives, cfg.load_grid,
                               mean_work=mean_work, horizon=cfg.horizon, warmup=cfg.warmup,
                               base_seed=cfg.seed, max_workers=workers)
        for c in cells:
            rows.append(ResultRow(cfg.scenario, cfg.engine, c.objective.value, c.load,
                                  c.class_index, "gamma", c.gamma, c.gamma_ci, c.seed))
            rows.append(ResultRow(cfg.scenario, cfg.engine, c.objective.value, c.load,
                                  c.class_index, "E_n", c.mean_count, c.mean_count_ci, c.seed))
    else:
        jobs = [
            (cfg, load_value, objective, oi, gi)
            for gi, load_value in enumerate(cfg.load_grid)
            for oi, objective in enumerate(cfg.objectives)
        ]
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                for group in pool.map(_packet_sweep_one, jobs):
                    rows.extend(group)
        else:
            for job in jobs:
                rows.extend(_packet_sweep_one(job))
    return rows


# ---------------------------------------------------------------------------
# Verification harness

def _verify_instances(rng, count, max_k, max_j):
    for _ in range(count):
        K = int(rng.integers(1, max_k + 1))
        J = int(rng.integers(1, max_j + 1))
        a = rng.uniform(0.05, 1.0, (K, J))
        a[np.arange(K), rng.integers(0, J, K)] = 1.0
        yield normalize(a), rng.integers(1, 4, K)


def run_verify(quick: bool = False) -> int:
    """Self-contained oracle suites; exits nonzero on any failure."""
    failures = 0

    def report(name: str, ok: bool, detail: str):
        nonlocal failures
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        if not ok:
            failures += 1

    rng = np.random.default_rng(20240901)

    worst = 0.0
    n_inst = 20 if quick else 80
    for req, mult in _verify_instances(rng, n_inst, 5, 5):
        rep = alloc.check_properties(req, alloc.solve_pf(req, mult))
        worst = max(worst, rep.kkt_stationarity, rep.kkt_slackness)
    report("pf-kkt-residuals", worst <= 1e-8,
           f"max residual {worst:.2e} over {n_inst} random instances (bound 1e-8)")

    step = 1 / 60 if quick else 1 / 100
    worst_gap = 0.0
    n_inst = 4 if quick else 8
    for req, mult in _verify_instances(rng, n_inst, 3, 3):
        allocation, _ = alloc.solve_bmf(req, mult)
        points = alloc.bmf_oracle(req, mult, step)
        if points.size == 0:
            worst_gap = np.inf
            break
        active = mult > 0
        gap = float(np.abs(points - allocation.phi[active]).max(axis=1).min())
        worst_gap = max(worst_gap, gap)
    report("bmf-oracle-agreement", worst_gap <= step + 1e-12,
           f"max distance to an oracle point {worst_gap:.4f} (grid step {step:.4f})")

    req = normalize([[1.0]])
    load = WorkloadSpec([0.5], [1.0])
    est = dynamics.simulate(dynamics.FluidSimConfig(
        req, load, AllocObjective.PF, horizon=20_000 if quick else 60_000, rng_seed=5))
    gap = abs(float(est.gamma[0] - est.gamma_little[0]))
    width = float(est.gamma_ci[0] + est.gamma_little_ci[0])
    report("littles-law-crosscheck", gap <= width,
           f"|gamma - rho/E[n]| = {gap:.4f} within width {width:.4f}")

    fig = normalize([[0.1, 1.0], [1.0, 0.1], [1.0, 1.0]])
    duo = normalize([[0.5, 1.0], [1.0, 0.5]])
    worst_rel = 0.0
    for req in (duo, fig):
        classes = list(range(req.num_classes))
        for objective in AllocObjective:
            fluid = alloc.solve(objective, req).phi
            thr = packetsim.measure_static(req, objective, classes, window=60,
                                           warmup=1_000 if quick else 2_000,
                                           duration=2_000 if quick else 5_000)
            ratios = thr / thr[0]
            target = fluid / fluid[0]
            worst_rel = max(worst_rel, float(np.abs(ratios / target - 1.0).max()))
    report("static-packet-convergence", worst_rel <= 0.05,
           f"max throughput-ratio error {worst_rel:.3%} (bound 5%)")

    print(f"{'OK' if failures == 0 else 'FAILED'}: {4 - failures}/4 oracle suites passed")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# Argument parsing / dispatch

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fairshare",
        description="Multi-resource fair sharing: allocations, demand models, packet simulation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("config", help="config file path or bundled scenario name")
        p.add_argument("--output", help="override the CSV output path")
        p.add_argument("--seed", type=int, help="override the seed")
        return p

    add_config_command("alloc", "solve the fluid allocations and print a property report")
    f = add_config_command("fluid-sim", "simulate Markovian demand at the configured rates")
    f.add_argument("--horizon", type=int, help="override the number of arrivals")
    s = add_config_command("stationary", "solve the truncated stationary distribution")
    s.add_argument("--n-max", type=int, help="override the per-class truncation bound")
    p = add_config_command("packet-sim", "run the packet-level simulator at the configured rates")
    p.add_argument("--flows", type=int, help="override the number of flow arrivals")
    w = add_config_command("sweep", "sweep the load grid with the configured engine")
    w.add_argument("--workers", type=int, help="worker pool size for grid points")
    w.add_argument("--grid", help="override the load grid, e.g. 0.3,0.5,0.7")
    v = sub.add_parser("verify", help="run the self-contained oracle suites")
    v.add_argument("--quick", action="store_true", help="smaller instances, faster run")
    return parser


_ENGINE_FOR_COMMAND = {
    "alloc": ("static-alloc",),
    "fluid-sim": ("fluid-sim",),
    "stationary": ("stationary",),
    "packet-sim": ("packet-sim",),
    "sweep": ("fluid-sim", "packet-sim"),
}


def run_command(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "verify":
        return run_verify(quick=args.quick)
    try:
        cfg = load_config(args.config, seed_override=args.seed)
        allowed = _ENGINE_FOR_COMMAND[args.command]
        if cfg.engine not in allowed:
            raise ConfigError(
                f"scenario '{cfg.scenario}' has engine '{cfg.engine}'; "
                f"'{args.command}' needs one of: {', '.join(allowed)}"
            )
        if args.command == "fluid-sim" and args.horizon:
            cfg = _replace(cfg, horizon=args.horizon)
        if args.command == "stationary" and args.n_max:
            cfg = _replace(cfg, n_max=args.n_max)
        if args.command == "packet-sim" and args.flows:
            cfg = _replace(cfg, flow_arrivals=args.flows)
        if args.command == "sweep" and args.grid:
            grid = tuple(float(x) for x in args.grid.split(","))
            cfg = _replace(cfg, load_grid=grid)

        if args.command == "alloc":
            rows = run_static(cfg)
        elif args.command == "fluid-sim":
            rows = run_fluid(cfg)
        elif args.command == "stationary":
            rows = run_stationary(cfg)
        elif args.command == "packet-sim":
            rows = run_packet(cfg)
        else:
            rows = run_sweep(cfg, workers=args.workers)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (alloc.AllocationError, dynamics.SimulationAborted, dynamics.StateSpaceError) as exc:
        print(f"engine error: {exc}", file=sys.stderr)
        return 3

    output = args.output or cfg.output
    if output:
        write_results(rows, output)
        print(f"wrote {len(rows)} rows to {output}")
    elif rows and args.command != "alloc":
        write_results(rows, f"{cfg.scenario}.csv")
        print(f"wrote {len(rows)} rows to {cfg.scenario}.csv")
    return 0


def _replace(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    import dataclasses

    return dataclasses.replace(cfg, **kw)


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
