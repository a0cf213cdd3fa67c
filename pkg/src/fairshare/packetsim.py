"""Packet-level discrete-event simulator for the three start-tag disciplines.

Packets traverse all resources in pipeline order; resource j holds a packet
of class k for a_kj time units. A per-flow window of W packets gates
admission: the credit for a packet returns once it has cleared the last
resource plus the flow's propagation delay. Scheduling at each resource is
by increasing start tag, ties broken by (flow id, sequence number).

Tag rules per discipline:
  drf  — one global tag per packet assigned at admission, incremented by 1
         (the normalized dominant requirement); one global virtual clock set
         to the largest tag ever started anywhere.
  pf   — per-resource tags incremented by a_kj / Q (Q = the flow's backlog
         at that resource sampled when the packet arrives there, including
         itself); per-resource clock = tag of the packet last started there.
  bmf  — per-resource tags incremented by a_kj; same per-resource clock.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .alloc import AllocObjective
from .model import RequirementMatrix, ValidationError

NEG_INF = float("-inf")
_PERSISTENT = 1 << 60


def tag_drf(prev_tag: float, vclock: float) -> float:
    """Global start tag: resume from the clock after an idle spell, else one
    unit after the previous tag (rows are normalized, so the dominant
    requirement is exactly 1)."""
    return max(vclock, prev_tag + 1.0)


def tag_pf(prev_tag: float, vclock: float, requirement: float, backlog: int) -> float:
    """Per-resource start tag with increment requirement/backlog; serving in
    tag order then shares the resource in proportion to backlog over
    requirement. The arriving packet counts toward its own backlog."""
    if backlog <= 0:
        raise AssertionError("backlog must include the arriving packet")
    return max(vclock, prev_tag + requirement / backlog)


def tag_bmf(prev_tag: float, vclock: float, requirement: float) -> float:
    """Per-resource start tag with increment equal to the requirement,
    yielding weighted max-min sharing with weights 1/requirement."""
    return max(vclock, prev_tag + requirement)


@dataclass(frozen=True)
class PacketSimConfig:
    req: RequirementMatrix
    discipline: AllocObjective
    flow_rates: tuple[float, ...]  # Poisson flow arrival rate per class
    num_flows: int
    window: int = 30
    mean_flow_size: float = 500.0  # geometric number of packets
    propagation: tuple[float, ...] | None = None  # per-class credit delay
    rng_seed: int = 0
    warmup_fraction: float = 0.1

    def __post_init__(self):
        if self.window < 1:
            raise ValidationError("window must be at least 1")
        if self.mean_flow_size < 1:
            raise ValidationError("mean flow size must be at least 1 packet")
        if self.num_flows < 1:
            raise ValidationError("need at least one flow arrival")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ValidationError("warmup fraction must be in [0, 1)")
        rates = tuple(float(r) for r in self.flow_rates)
        if len(rates) != self.req.num_classes or any(r < 0 for r in rates) or sum(rates) <= 0:
            raise ValidationError("flow_rates must be nonnegative, one per class, with positive sum")
        object.__setattr__(self, "flow_rates", rates)
        prop = self.propagation
        if prop is None:
            prop = (0.0,) * self.req.num_classes
        prop = tuple(float(x) for x in prop)
        if len(prop) != self.req.num_classes or any(x < 0 for x in prop):
            raise ValidationError("propagation must be nonnegative, one entry per class")
        object.__setattr__(self, "propagation", prop)


@dataclass(frozen=True)
class FlowRecord:
    flow_id: int
    class_index: int
    arrival: float
    completion: float
    packets: int


@dataclass(frozen=True)
class PacketSimResult:
    gamma: np.ndarray
    gamma_ci: np.ndarray
    gamma_little: np.ndarray
    mean_counts: np.ndarray  # time-averaged flows in progress per class
    completed: np.ndarray
    records: tuple[FlowRecord, ...]
    batches: int


# event kinds
_EV_FLOW = 0
_EV_FINISH = 1
_EV_CREDIT = 2


class _Engine:
    """Shared event loop. Flow state lives in parallel lists indexed by flow
    id; per-resource pending packets are heaps of (tag, flow, seq)."""

    def __init__(self, req: RequirementMatrix, discipline: AllocObjective,
                 window: int, propagation):
        self.req = req
        self.discipline = AllocObjective(discipline)
        self.window = window
        self.a = [list(map(float, row)) for row in req.a]
        self.propagation = [float(x) for x in propagation]
        J = req.num_resources
        self.J = J
        self.queues: list[list] = [[] for _ in range(J)]
        self.busy = [False] * J
        self.vclock = [0.0] * J  # per-resource clocks (pf / bmf)
        self.vglobal = 0.0  # global clock (drf)
        self.events: list = []
        self.serial = 0
        # per-flow state
        self.cls: list[int] = []
        self.remaining: list[int] = []  # packets not yet admitted
        self.credits: list[int] = []
        self.next_seq: list[int] = []
        self.done_pkts: list[int] = []
        self.total_pkts: list[int] = []
        self.arrival_t: list[float] = []
        self.completion_t: list[float] = []
        self.prev_global: list[float] = []
        self.prev_tag: list[list[float]] = [[] for _ in range(J)]
        self.backlog: list[list[int]] = [[] for _ in range(J)]
        self.inflight_hwm: list[int] = []
        self.trace: list | None = None

    def push_event(self, time: float, kind: int, a: int, b: int, seq: int, tag: float):
        self.serial += 1
        heapq.heappush(self.events, (time, self.serial, kind, a, b, seq, tag))

    def add_flow(self, cls: int, total_pkts: int, now: float) -> int:
        f = len(self.cls)
        self.cls.append(cls)
        self.remaining.append(total_pkts)
        self.total_pkts.append(total_pkts)
        self.credits.append(self.window)
        self.next_seq.append(0)
        self.done_pkts.append(0)
        self.arrival_t.append(now)
        self.completion_t.append(math.nan)
        self.prev_global.append(NEG_INF)
        self.inflight_hwm.append(0)
        for j in range(self.J):
            self.prev_tag[j].append(NEG_INF)
            self.backlog[j].append(0)
        self.admit(f, now)
        return f

    def admit(self, f: int, now: float):
        while self.credits[f] > 0 and self.remaining[f] > 0:
            self.credits[f] -= 1
            self.remaining[f] -= 1
            seq = self.next_seq[f]
            self.next_seq[f] = seq + 1
            inflight = self.window - self.credits[f]
            if inflight > self.inflight_hwm[f]:
                self.inflight_hwm[f] = inflight
            if self.discipline is AllocObjective.DRF:
                tag = tag_drf(self.prev_global[f], self.vglobal)
                self.prev_global[f] = tag
            else:
                tag = 0.0  # per-resource tags assigned on arrival at each resource
            self.enter_resource(0, f, seq, tag, now)

    def enter_resource(self, j: int, f: int, seq: int, carried_tag: float, now: float):
        k = self.cls[f]
        if self.discipline is AllocObjective.DRF:
            tag = carried_tag
        elif self.discipline is AllocObjective.PF:
            self.backlog[j][f] += 1
            tag = tag_pf(self.prev_tag[j][f], self.vclock[j], self.a[k][j], self.backlog[j][f])
            self.prev_tag[j][f] = tag
        else:
            tag = tag_bmf(self.prev_tag[j][f], self.vclock[j], self.a[k][j])
            self.prev_tag[j][f] = tag
        heapq.heappush(self.queues[j], (tag, f, seq))
        if not self.busy[j]:
            self.start_service(j, now)

    def start_service(self, j: int, now: float):
        tag, f, seq = heapq.heappop(self.queues[j])
        self.busy[j] = True
        if self.discipline is AllocObjective.DRF:
            if tag > self.vglobal:
                self.vglobal = tag
        else:
            self.vclock[j] = tag
        if self.trace is not None:
            self.trace.append(("start", now, j, f, seq, tag))
        self.push_event(now + self.a[self.cls[f]][j], _EV_FINISH, j, f, seq, tag)

    def finish(self, j: int, f: int, seq: int, tag: float, now: float):
        self.busy[j] = False
        if self.discipline is AllocObjective.PF:
            self.backlog[j][f] -= 1
        if j + 1 < self.J:
            self.enter_resource(j + 1, f, seq, tag, now)
        else:
            self.done_pkts[f] += 1
            delay = self.propagation[self.cls[f]]
            if delay > 0.0:
                self.push_event(now + delay, _EV_CREDIT, f, 0, 0, 0.0)
            else:
                self.credits[f] += 1
                self.admit(f, now)
            if self.done_pkts[f] == self.total_pkts[f]:
                self.completion_t[f] = now
        if not self.busy[j] and self.queues[j]:
            self.start_service(j, now)


def _class_batches(values_per_flow, classes, batch_of_flow, num_classes, batches):
    """Batch means per class; returns (totals, per-batch arrays)."""
    sums = np.zeros((batches, num_classes))
    cnts = np.zeros((batches, num_classes), dtype=np.int64)
    for v, k, b in zip(values_per_flow, classes, batch_of_flow):
        sums[b, k] += v
        cnts[b, k] += 1
    return sums, cnts


def run(config: PacketSimConfig) -> PacketSimResult:
    """Simulate Poisson flow arrivals with geometric sizes under the
    configured discipline until every flow completes. Service rates are the
    mean packet count over the mean completion time, per class, with
    batch-means confidence intervals over arrival-ordered flow batches."""
    req = config.req
    K = req.num_classes
    engine = _Engine(req, config.discipline, config.window, config.propagation)
    rng = np.random.default_rng(config.rng_seed)
    rates = np.asarray(config.flow_rates)
    total_rate = float(rates.sum())
    cum = np.cumsum(rates) / total_rate

    # pre-draw the arrival process so the event loop stays branch-light
    gaps = rng.exponential(1.0 / total_rate, config.num_flows)
    classes = np.searchsorted(cum, rng.random(config.num_flows), side="right")
    sizes = rng.geometric(1.0 / config.mean_flow_size, config.num_flows)
    arrival_times = np.cumsum(gaps)

    engine.push_event(float(arrival_times[0]), _EV_FLOW, 0, 0, 0, 0.0)
    events = engine.events
    next_flow = 0
    while events:
        time, _, kind, a, b, seq, tag = heapq.heappop(events)
        if kind == _EV_FINISH:
            engine.finish(a, b, seq, tag, time)
        elif kind == _EV_CREDIT:
            engine.credits[a] += 1
            engine.admit(a, time)
        else:
            engine.add_flow(int(classes[next_flow]), int(sizes[next_flow]), time)
            next_flow += 1
            if next_flow < config.num_flows:
                engine.push_event(float(arrival_times[next_flow]), _EV_FLOW, 0, 0, 0, 0.0)

    flows = len(engine.cls)
    warm = int(config.warmup_fraction * flows)
    measured = list(range(warm, flows))
    batches = min(20, max(1, len(measured)))
    batch_of = {f: min((i * batches) // len(measured), batches - 1) for i, f in enumerate(measured)}

    records = tuple(
        FlowRecord(f, engine.cls[f], engine.arrival_t[f], engine.completion_t[f],
                   engine.total_pkts[f])
        for f in range(flows)
    )
    m_classes = [engine.cls[f] for f in measured]
    m_batches = [batch_of[f] for f in measured]
    work_sums, counts = _class_batches([engine.total_pkts[f] for f in measured],
                                       m_classes, m_batches, K, batches)
    time_sums, _ = _class_batches(
        [engine.completion_t[f] - engine.arrival_t[f] for f in measured],
        m_classes, m_batches, K, batches)

    completed = counts.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = work_sums.sum(axis=0) / time_sums.sum(axis=0)
        batch_gamma = work_sums / time_sums
    gamma_ci = np.empty(K)
    for k in range(K):
        vals = batch_gamma[:, k][counts[:, k] > 0]
        if vals.size >= 2:
            gamma_ci[k] = stats.t.ppf(0.975, vals.size - 1) * vals.std(ddof=1) / np.sqrt(vals.size)
        else:
            gamma_ci[k] = np.nan

    # time-averaged flows in progress per class, measured while arrivals are
    # still running (the drain at the end is excluded, keeping the window
    # comparable to a stationary regime)
    t0 = engine.arrival_t[measured[0]] if measured else 0.0
    t1 = max(engine.arrival_t)
    deltas = []
    for f in range(flows):
        deltas.append((engine.arrival_t[f], engine.cls[f], 1))
        deltas.append((engine.completion_t[f], engine.cls[f], -1))
    deltas.sort()
    area = np.zeros(K)
    live = np.zeros(K)
    prev = t0
    for when, k, d in deltas:
        if when > t0:
            span = min(when, t1) - prev
            if span > 0:
                area += live * span
                prev = min(when, t1)
        live[k] += d
    mean_counts = area / (t1 - t0) if t1 > t0 else np.zeros(K)
    with np.errstate(divide="ignore", invalid="ignore"):
        # Little's-law route with flow work = packet count
        gamma_little = rates * config.mean_flow_size / mean_counts

    return PacketSimResult(
        gamma=gamma,
        gamma_ci=gamma_ci,
        gamma_little=gamma_little,
        mean_counts=mean_counts,
        completed=completed,
        records=records,
        batches=batches,
    )


def measure_static(
    req: RequirementMatrix,
    discipline: AllocObjective,
    flow_classes,
    *,
    window: int = 60,
    warmup: float = 2_000.0,
    duration: float = 5_000.0,
    propagation=None,
) -> np.ndarray:
    """Throughput of persistent (never-ending) flows, one entry per flow in
    ``flow_classes``: packets completed per unit time over the measurement
    span after a warmup. Fully deterministic."""
    if propagation is None:
        propagation = [0.0] * req.num_classes
    engine = _Engine(req, discipline, window, propagation)
    for k in flow_classes:
        engine.add_flow(int(k), _PERSISTENT, 0.0)
    completions = [0] * len(engine.cls)
    end = warmup + duration
    events = engine.events
    done_before = [0] * len(engine.cls)
    warm_done = False
    while events and events[0][0] <= end:
        time, _, kind, a, b, seq, tag = heapq.heappop(events)
        if not warm_done and time > warmup:
            done_before = list(engine.done_pkts)
            warm_done = True
        if kind == _EV_FINISH:
            engine.finish(a, b, seq, tag, time)
        elif kind == _EV_CREDIT:
            engine.credits[a] += 1
            engine.admit(a, time)
    if not warm_done:
        done_before = list(engine.done_pkts)
    for f in range(len(engine.cls)):
        completions[f] = engine.done_pkts[f] - done_before[f]
    return np.asarray(completions, dtype=float) / duration
