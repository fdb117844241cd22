"""Discrete-event simulation of mixed-precision tile scheduling over SMs.

Times are exact rationals. A tile of precision W4A4 costs ``cost4`` and a
W4A8 tile ``cost8``; a tile is made of ``cost_units`` equal chunks (one for
W4A4, two for W4A8), which is the granularity at which an idle SM can take
over part of a running tile.

Policies:

* ``barrier_policy`` ``per-iteration`` runs the i-th tile of every SM in
  lock step; ``final-only`` lets SMs run their queues freely and joins once.
* ``mapping`` ``round-robin`` gives tile i to SM i mod S; ``balanced`` deals
  tiles by longest-processing-time greedy.
* ``stealing``: an idle SM first takes a queued tile from the most loaded
  SM, otherwise the unstarted chunks (``steal_granularity`` of them, rounded
  up) of the running tile with the most remaining time.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import List, Optional, Sequence

from .gemm import GemmPlan, Precision

PER_ITERATION = "per-iteration"
FINAL_ONLY = "final-only"
ROUND_ROBIN = "round-robin"
BALANCED = "balanced"


@dataclass(frozen=True)
class SimTask:
    task_id: int
    precision: Precision

    @property
    def cost_units(self) -> int:
        return self.precision.cost_units


@dataclass(frozen=True)
class SimConfig:
    num_sms: int = 4
    cost4: Fraction = Fraction(1)
    cost8: Fraction = Fraction(2)
    barrier_policy: str = PER_ITERATION
    mapping: str = ROUND_ROBIN
    stealing: bool = False
    barrier_overhead: Fraction = Fraction(0)
    steal_granularity: Fraction = Fraction(1, 2)

    def __post_init__(self):
        object.__setattr__(self, "cost4", Fraction(self.cost4))
        object.__setattr__(self, "cost8", Fraction(self.cost8))
        object.__setattr__(self, "barrier_overhead", Fraction(self.barrier_overhead))
        object.__setattr__(self, "steal_granularity", Fraction(self.steal_granularity))
        if self.num_sms < 1:
            raise ValueError("num_sms must be at least 1")
        if not self.cost8 >= self.cost4 > 0:
            raise ValueError("need cost8 >= cost4 > 0")
        if self.barrier_policy not in (PER_ITERATION, FINAL_ONLY):
            raise ValueError(f"unknown barrier policy {self.barrier_policy!r}")
        if self.mapping not in (ROUND_ROBIN, BALANCED):
            raise ValueError(f"unknown mapping {self.mapping!r}")
        if self.barrier_overhead < 0:
            raise ValueError("barrier overhead must be non-negative")
        if not 0 < self.steal_granularity <= 1:
            raise ValueError("steal granularity must be in (0, 1]")

    def cost(self, task: SimTask) -> Fraction:
        return self.cost4 if task.precision is Precision.W4A4 else self.cost8


@dataclass(frozen=True)
class Event:
    sm: int
    task_id: int
    start: Fraction
    end: Fraction
    chunks: int
    stolen: bool


@dataclass
class SimReport:
    makespan: Fraction
    busy_time: List[Fraction]
    events: List[Event]
    config: SimConfig
    total_work: Fraction

    @property
    def utilization(self) -> List[float]:
        if self.makespan == 0:
            return [0.0] * len(self.busy_time)
        return [float(b / self.makespan) for b in self.busy_time]

    def timeline_json(self) -> str:
        return json.dumps(
            {
                "makespan": float(self.makespan),
                "num_sms": self.config.num_sms,
                "events": [
                    {
                        "sm": e.sm,
                        "task": e.task_id,
                        "start": float(e.start),
                        "end": float(e.end),
                        "chunks": e.chunks,
                        "stolen": e.stolen,
                    }
                    for e in self.events
                ],
            }
        )


class _Piece:
    """A contiguous run of chunks of one tile executing on one SM."""

    __slots__ = ("task_id", "start", "dur", "chunks", "stolen")

    def __init__(self, task_id, start, dur, chunks, stolen):
        self.task_id, self.start, self.dur, self.chunks, self.stolen = task_id, start, dur, chunks, stolen

    @property
    def end(self) -> Fraction:
        return self.start + self.dur * self.chunks

    def unstarted(self, t: Fraction) -> int:
        # a chunk that begins exactly at t belongs to the owner
        begun = math.floor((t - self.start) / self.dur) + 1
        return max(self.chunks - begun, 0)


def _map_tasks(tasks: Sequence[SimTask], cfg: SimConfig) -> List[List[SimTask]]:
    S = cfg.num_sms
    lists: List[List[SimTask]] = [[] for _ in range(S)]
    if cfg.mapping == ROUND_ROBIN:
        for i, t in enumerate(tasks):
            lists[i % S].append(t)
        return lists
    load = [Fraction(0)] * S
    for i in sorted(range(len(tasks)), key=lambda i: (-cfg.cost(tasks[i]), i)):
        sm = min(range(S), key=lambda s: (load[s], s))
        load[sm] += cfg.cost(tasks[i])
        lists[sm].append(tasks[i])
    return lists


def _run_phase(queues: List[List[SimTask]], cfg: SimConfig, t0: Fraction):
    """Event loop for one barrier-to-barrier phase; returns (end time, events)."""
    S = cfg.num_sms
    queues = [list(q) for q in queues]
    running: List[Optional[_Piece]] = [None] * S
    events: List[Event] = []

    def remaining(sm: int, t: Fraction) -> Fraction:
        p = running[sm]
        r = (p.end - t) if p is not None else Fraction(0)
        return r + sum(cfg.cost(x) for x in queues[sm])

    def start_task(sm: int, task: SimTask, t: Fraction, stolen: bool) -> None:
        units = task.cost_units
        running[sm] = _Piece(task.task_id, t, cfg.cost(task) / units, units, stolen)

    def dispatch(t: Fraction) -> None:
        for sm in range(S):
            if running[sm] is not None:
                continue
            if queues[sm]:
                start_task(sm, queues[sm].pop(0), t, False)
                continue
            if not cfg.stealing:
                continue
            victims = [v for v in range(S) if v != sm and queues[v]]
            if victims:
                v = max(victims, key=lambda v: (remaining(v, t), -v))
                start_task(sm, queues[v].pop(), t, True)
                continue
            split = [v for v in range(S) if running[v] is not None and running[v].unstarted(t) > 0]
            if split:
                v = max(split, key=lambda v: (running[v].end - t, -v))
                p = running[v]
                u = p.unstarted(t)
                take = min(u, max(1, math.ceil(u * cfg.steal_granularity)))
                p.chunks -= take
                running[sm] = _Piece(p.task_id, t, p.dur, take, True)

    t = t0
    dispatch(t)
    while any(p is not None for p in running):
        t = min(p.end for p in running if p is not None)
        for sm in range(S):
            p = running[sm]
            if p is not None and p.end == t:
                events.append(Event(sm, p.task_id, p.start, p.end, p.chunks, p.stolen))
                running[sm] = None
        dispatch(t)
    return t, events


def simulate(tasks: Sequence[SimTask], cfg: SimConfig) -> SimReport:
    """Schedule ``tasks`` on ``cfg.num_sms`` SMs and report the timeline."""
    tasks = list(tasks)
    if not tasks:
        raise ValueError("need at least one task")
    per_sm = _map_tasks(tasks, cfg)
    events: List[Event] = []
    t = Fraction(0)
    if cfg.barrier_policy == PER_ITERATION:
        for it in range(max(len(q) for q in per_sm)):
            phase = [q[it : it + 1] for q in per_sm]
            t, ev = _run_phase(phase, cfg, t)
            events += ev
            t += cfg.barrier_overhead
    else:
        t, events = _run_phase(per_sm, cfg, t)
        t += cfg.barrier_overhead
    busy = [Fraction(0)] * cfg.num_sms
    for e in events:
        busy[e.sm] += e.end - e.start
    total = sum((cfg.cost(x) for x in tasks), Fraction(0))
    return SimReport(t, busy, events, cfg, total)


def per_iteration_makespan(tasks: Sequence[SimTask], cfg: SimConfig) -> Fraction:
    """Closed form for per-iteration barriers with round-robin mapping, no stealing."""
    S = cfg.num_sms
    total = Fraction(0)
    iters = math.ceil(len(tasks) / S)
    for it in range(iters):
        total += max(cfg.cost(x) for x in tasks[it * S : (it + 1) * S])
    return total + cfg.barrier_overhead * iters


STRATEGIES = (
    ("naive", dict(barrier_policy=PER_ITERATION, mapping=ROUND_ROBIN, stealing=False)),
    ("final-barrier", dict(barrier_policy=FINAL_ONLY, mapping=ROUND_ROBIN, stealing=False)),
    ("remap", dict(barrier_policy=FINAL_ONLY, mapping=BALANCED, stealing=False)),
    ("stealing", dict(barrier_policy=FINAL_ONLY, mapping=BALANCED, stealing=True)),
)
BASELINE = "w4a8-uniform"


@dataclass(frozen=True)
class StrategyRow:
    name: str
    makespan: Fraction
    speedup: float
    mean_utilization: float
    report: SimReport = field(repr=False, compare=False)


def compare_strategies(tasks: Sequence[SimTask], base_cfg: SimConfig = SimConfig()) -> List[StrategyRow]:
    """Makespan of each cumulative strategy and its speedup over uniform W4A8.

    The baseline runs every tile at ``cost8`` under the naive policy.
    """
    tasks = list(tasks)
    uniform = [SimTask(t.task_id, Precision.W4A8) for t in tasks]
    base = simulate(uniform, replace(base_cfg, **STRATEGIES[0][1]))
    rows = [StrategyRow(BASELINE, base.makespan, 1.0, _mean(base.utilization), base)]
    for name, kw in STRATEGIES:
        rep = simulate(tasks, replace(base_cfg, **kw))
        rows.append(StrategyRow(name, rep.makespan, float(base.makespan / rep.makespan), _mean(rep.utilization), rep))
    return rows


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs)


def ordering_holds(rows: Sequence[StrategyRow]) -> bool:
    """naive >= final-barrier >= remap >= stealing."""
    ms = {r.name: r.makespan for r in rows}
    names = [n for n, _ in STRATEGIES]
    return all(ms[a] >= ms[b] for a, b in zip(names, names[1:]))


def workload_from_plan(plan: GemmPlan) -> List[SimTask]:
    return [SimTask(i, t.precision) for i, t in enumerate(plan.tasks)]


def alternating_workload(n: int = 18, first: Precision = Precision.W4A8) -> List[SimTask]:
    """Tiles alternating W4A8 / W4A4, the pattern of a 50% 8-bit GEMM."""
    other = Precision.W4A4 if first is Precision.W4A8 else Precision.W4A8
    return [SimTask(i, first if i % 2 == 0 else other) for i in range(n)]


def random_workload(n: int, frac8: float, seed: int) -> List[SimTask]:
    rng = random.Random(seed)
    return [SimTask(i, Precision.W4A8 if rng.random() < frac8 else Precision.W4A4) for i in range(n)]


def parse_tiles_spec(spec: str, seed: int = 0) -> List[SimTask]:
    """Parse a workload description.

    Accepted forms:

    * ``alt:N`` - N alternating tiles starting with W4A8
    * ``mix:N:F[:SEED]`` - N tiles, each W4A8 with probability F
    * a comma list of ``8`` / ``4`` tokens with optional ``xR`` repeat, e.g. ``8,4x3``
    """
    s = spec.strip().lower()
    if not s:
        raise ValueError("empty tiles spec")
    head, _, rest = s.partition(":")
    if head == "alt":
        n = int(rest)
        if n < 1:
            raise ValueError("alt needs a positive count")
        return alternating_workload(n)
    if head == "mix":
        parts = rest.split(":")
        if len(parts) not in (2, 3):
            raise ValueError("mix takes N:F[:SEED]")
        n, frac = int(parts[0]), float(parts[1])
        if n < 1 or not 0 <= frac <= 1:
            raise ValueError("mix needs N >= 1 and 0 <= F <= 1")
        return random_workload(n, frac, int(parts[2]) if len(parts) == 3 else seed)
    tasks: List[SimTask] = []
    for tok in s.split(","):
        bits, _, rep = tok.strip().partition("x")
        count = int(rep) if rep else 1
        if bits not in ("4", "8") or count < 1:
            raise ValueError(f"bad tile token {tok!r}")
        prec = Precision.W4A8 if bits == "8" else Precision.W4A4
        tasks.extend(SimTask(len(tasks) + i, prec) for i in range(count))
    return tasks
