"""Deterministic three-stage pipeline simulator.

Each task flows device compute -> transmission -> cloud compute through
FIFO unit-capacity stages: stage k of task n starts at
max(finish of stage k-1 of task n, finish of stage k of task n-1).
Stage durations come from the deployed strategy (plain per-stage sums);
transmission durations integrate the piecewise-constant bandwidth trace.
An online scheduler may retarget the transmission precision per task or
exit a task early, in which case it never occupies the transmission and
cloud stages and completes at its device finish plus a configurable
decision cost.  Cloud result return is not modelled (three stages only).
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .graph_core import ModelGraph
from .offline_opt import PartitionStrategy, stage_times

WARMUP_FRACTION = 0.1


class TraceError(ValueError):
    pass


class SimulationError(ValueError):
    pass


@dataclass(frozen=True)
class BandwidthTrace:
    """Piecewise-constant bandwidth, defined for all t >= 0."""

    segments: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.segments:
            raise TraceError("trace needs at least one segment")
        if self.segments[0][0] != 0.0:
            raise TraceError("first trace segment must start at time 0")
        prev = -math.inf
        for start, mbps in self.segments:
            if start <= prev:
                raise TraceError("trace start times must be strictly increasing")
            if mbps <= 0:
                raise TraceError("trace bandwidth must be positive")
            prev = start

    def value_at(self, t_ms: float) -> float:
        idx = bisect_right([s for s, _ in self.segments], t_ms) - 1
        return self.segments[max(idx, 0)][1]

    def transmit_ms(self, payload_bits: float, start_ms: float) -> float:
        """Smallest d with integral of bandwidth over [start, start+d] = payload."""
        if payload_bits <= 0:
            return 0.0
        starts = [s for s, _ in self.segments]
        idx = max(bisect_right(starts, start_ms) - 1, 0)
        t = start_ms
        remaining = float(payload_bits)
        while True:
            rate = self.segments[idx][1] * 1000.0  # bits per ms
            seg_end = self.segments[idx + 1][0] if idx + 1 < len(self.segments) \
                else math.inf
            capacity = rate * (seg_end - t)
            if remaining <= capacity:
                return t + remaining / rate - start_ms
            remaining -= capacity
            t = seg_end
            idx += 1


def constant_trace(mbps: float) -> BandwidthTrace:
    return BandwidthTrace(((0.0, mbps),))


def parse_trace(text: str) -> BandwidthTrace:
    segments = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) != 2:
            raise TraceError(f"trace line {lineno}: expected 'time_ms mbps'")
        segments.append((float(parts[0]), float(parts[1])))
    return BandwidthTrace(tuple(segments))


def dump_trace(trace: BandwidthTrace) -> str:
    return "".join(f"{s:g} {m:g}\n" for s, m in trace.segments)


def load_trace_file(path) -> BandwidthTrace:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_trace(fh.read())


def transmission_duration(payload_bits: float, start_time_ms: float,
                          trace: BandwidthTrace) -> float:
    return trace.transmit_ms(payload_bits, start_time_ms)


# -- task streams ------------------------------------------------------------

@dataclass(frozen=True)
class Task:
    arrival_ms: float
    feature: Optional[object] = None  # C x H x W ndarray when online is used
    label: Optional[int] = None


@dataclass(frozen=True)
class TaskStream:
    tasks: tuple[Task, ...]

    def __post_init__(self):
        prev = -math.inf
        for t in self.tasks:
            if t.arrival_ms < prev:
                raise SimulationError("task arrivals must be nondecreasing")
            prev = t.arrival_ms

    def __len__(self) -> int:
        return len(self.tasks)


def fixed_interval_stream(count: int, interval_ms: float,
                          features: Sequence | None = None,
                          labels: Sequence[int] | None = None,
                          start_ms: float = 0.0) -> TaskStream:
    """Arrivals every ``interval_ms``; features/labels cycle when shorter."""
    tasks = []
    for i in range(count):
        feat = features[i % len(features)] if features is not None and len(features) else None
        lab = labels[i % len(labels)] if labels is not None and len(labels) else None
        tasks.append(Task(start_ms + i * interval_ms, feat, lab))
    return TaskStream(tuple(tasks))


# -- reports -----------------------------------------------------------------

@dataclass(frozen=True)
class TaskRecord:
    index: int
    arrival_ms: float
    device_start_ms: float
    device_end_ms: float
    tx_start_ms: Optional[float]
    tx_end_ms: Optional[float]
    cloud_start_ms: Optional[float]
    cloud_end_ms: Optional[float]
    completion_ms: float
    latency_ms: float
    exited_early: bool
    precision_used: Optional[int]
    bits_transmitted: int

    @property
    def service_ms(self) -> float:
        """Sum of this task's own stage durations (no queueing)."""
        total = self.device_end_ms - self.device_start_ms
        if not self.exited_early:
            total += (self.tx_end_ms - self.tx_start_ms) + \
                     (self.cloud_end_ms - self.cloud_start_ms)
        return total


@dataclass(frozen=True)
class SimReport:
    per_task: tuple[TaskRecord, ...]
    makespan_ms: float
    throughput_it_per_s: float
    steady_throughput_it_per_s: float
    stage_busy_ms: tuple[float, float, float]
    stage_idle_ms: tuple[float, float, float]
    exited_count: int
    mean_latency_ms: float
    mean_bits_per_task: float


def simulate(g: ModelGraph, strategy: PartitionStrategy, stream: TaskStream,
             trace: BandwidthTrace, online=None) -> SimReport:
    """Run the stream through the three-stage pipeline.

    ``online`` (optional) is duck-typed: ``online.decide(feature, mbps)``
    returning an object with ``exited``, ``q_chosen`` and (for scheduler
    bookkeeping) ``result_label``; its ``exit_cost_ms`` attribute is the
    device-side cost of an early-exit decision.
    """
    if not stream.tasks:
        raise SimulationError("task stream must be nonempty")
    t_e, _, t_c = stage_times(g, strategy, trace.value_at(0.0))
    payload_elements = strategy.payload_elements(g)
    offline_bits = strategy.total_payload_bits(g)
    max_offline_precision = max((c.bits for c in strategy.cuts), default=0)

    dev_free = 0.0
    tx_free = 0.0
    cloud_free = 0.0
    records: list[TaskRecord] = []
    busy = [0.0, 0.0, 0.0]
    exit_cost = getattr(online, "exit_cost_ms", 0.0) if online is not None else 0.0

    for idx, task in enumerate(stream.tasks):
        dev_start = max(task.arrival_ms, dev_free)
        dev_end = dev_start + t_e
        dev_free = dev_end
        busy[0] += t_e

        decision = None
        if online is not None and task.feature is not None:
            decision = online.decide(task.feature, trace.value_at(dev_end))
        if decision is not None and decision.exited:
            completion = dev_end + exit_cost
            records.append(TaskRecord(idx, task.arrival_ms, dev_start, dev_end,
                                      None, None, None, None, completion,
                                      completion - task.arrival_ms, True,
                                      None, 0))
            continue
        if decision is not None:
            bits = payload_elements * decision.q_chosen
            precision = decision.q_chosen
        else:
            bits = offline_bits
            precision = max_offline_precision if strategy.cuts else None
        tx_start = max(dev_end, tx_free)
        tx_dur = trace.transmit_ms(bits, tx_start)
        tx_end = tx_start + tx_dur
        tx_free = tx_end
        busy[1] += tx_dur
        cloud_start = max(tx_end, cloud_free)
        cloud_end = cloud_start + t_c
        cloud_free = cloud_end
        busy[2] += t_c
        if decision is not None and task.label is not None:
            observe = getattr(online, "observe_cloud_result", None)
            if observe is not None:
                observe(task.feature, task.label)
        records.append(TaskRecord(idx, task.arrival_ms, dev_start, dev_end,
                                  tx_start, tx_end, cloud_start, cloud_end,
                                  cloud_end, cloud_end - task.arrival_ms,
                                  False, precision, bits))

    makespan = max(r.completion_ms for r in records)
    n = len(records)
    throughput = n / makespan * 1000.0 if makespan > 0 else math.inf
    steady = _steady_throughput(records)
    idle = tuple(makespan - b for b in busy)
    mean_latency = sum(r.latency_ms for r in records) / n
    mean_bits = sum(r.bits_transmitted for r in records) / n
    return SimReport(tuple(records), makespan, throughput, steady,
                     tuple(busy), idle, sum(r.exited_early for r in records),
                     mean_latency, mean_bits)


def _steady_throughput(records: list[TaskRecord]) -> float:
    """Completion rate excluding the first WARMUP_FRACTION of tasks."""
    completions = sorted(r.completion_ms for r in records)
    skip = math.ceil(len(completions) * WARMUP_FRACTION)
    window = completions[skip:]
    if len(window) < 2 or window[-1] <= window[0]:
        return len(completions) / completions[-1] * 1000.0 if completions[-1] > 0 \
            else math.inf
    return (len(window) - 1) / (window[-1] - window[0]) * 1000.0


def steady_inter_completion_ms(report: SimReport) -> float:
    completions = sorted(r.completion_ms for r in report.per_task)
    skip = math.ceil(len(completions) * WARMUP_FRACTION)
    window = completions[skip:]
    if len(window) < 2:
        raise SimulationError("not enough completions past warm-up")
    return (window[-1] - window[0]) / (len(window) - 1)


# -- bubble (idle gap) analysis ----------------------------------------------

STAGE_NAMES = ("device", "transmission", "cloud")


@dataclass(frozen=True)
class StageBubbles:
    stage: str
    first_use_ms: float
    last_release_ms: float
    busy_ms: float
    gaps_ms: tuple[float, ...]
    total_gap_ms: float
    histogram: tuple[int, ...]
    bin_edges: tuple[float, ...]


def bubble_report(report: SimReport, bins: int = 5) -> tuple[StageBubbles, ...]:
    """Idle gaps between consecutive occupancies per stage."""
    out = []
    for stage_idx, name in enumerate(STAGE_NAMES):
        intervals = []
        for r in report.per_task:
            if stage_idx == 0:
                intervals.append((r.device_start_ms, r.device_end_ms))
            elif not r.exited_early:
                if stage_idx == 1:
                    intervals.append((r.tx_start_ms, r.tx_end_ms))
                else:
                    intervals.append((r.cloud_start_ms, r.cloud_end_ms))
        if not intervals:
            out.append(StageBubbles(name, 0.0, 0.0, 0.0, (), 0.0,
                                    (0,) * bins, (0.0,) * (bins + 1)))
            continue
        intervals.sort()
        gaps = []
        for (s0, e0), (s1, _) in zip(intervals, intervals[1:]):
            if s1 > e0:
                gaps.append(s1 - e0)
        first = intervals[0][0]
        last = intervals[-1][1]
        busy = sum(e - s for s, e in intervals)
        top = max(gaps) if gaps else 1.0
        edges = [top * i / bins for i in range(bins + 1)]
        counts = [0] * bins
        for gap in gaps:
            slot = min(int(gap / top * bins), bins - 1)
            counts[slot] += 1
        out.append(StageBubbles(name, first, last, busy, tuple(gaps),
                                sum(gaps), tuple(counts), tuple(edges)))
    return tuple(out)


# -- text rendering ----------------------------------------------------------

def fmt(x) -> str:
    """Canonical numeric formatting for all report output: 6 significant digits."""
    if x is None:
        return "-"
    if isinstance(x, bool):
        return "yes" if x else "no"
    if isinstance(x, int):
        return str(x)
    return f"{x:.6g}"


_TASK_COLUMNS = ("task", "arrival", "dev_start", "dev_end", "tx_start",
                 "tx_end", "cloud_start", "cloud_end", "completion",
                 "latency", "exited", "precision", "bits")


def render_task_table(report: SimReport) -> str:
    lines = ["\t".join(_TASK_COLUMNS)]
    for r in report.per_task:
        lines.append("\t".join([
            str(r.index), fmt(r.arrival_ms), fmt(r.device_start_ms),
            fmt(r.device_end_ms), fmt(r.tx_start_ms), fmt(r.tx_end_ms),
            fmt(r.cloud_start_ms), fmt(r.cloud_end_ms), fmt(r.completion_ms),
            fmt(r.latency_ms), fmt(r.exited_early),
            fmt(r.precision_used), str(r.bits_transmitted),
        ]))
    return "\n".join(lines) + "\n"


def render_summary(report: SimReport) -> str:
    lines = [
        f"tasks {len(report.per_task)}",
        f"exited_early {report.exited_count}",
        f"makespan_ms {fmt(report.makespan_ms)}",
        f"throughput_it_per_s {fmt(report.throughput_it_per_s)}",
        f"steady_throughput_it_per_s {fmt(report.steady_throughput_it_per_s)}",
        f"mean_latency_ms {fmt(report.mean_latency_ms)}",
        f"mean_bits_per_task {fmt(report.mean_bits_per_task)}",
    ]
    for name, b, i in zip(STAGE_NAMES, report.stage_busy_ms, report.stage_idle_ms):
        lines.append(f"stage_{name}_busy_ms {fmt(b)}")
        lines.append(f"stage_{name}_idle_ms {fmt(i)}")
    return "\n".join(lines) + "\n"


def render_bubbles(bubbles: tuple[StageBubbles, ...]) -> str:
    lines = []
    for sb in bubbles:
        lines.append(f"stage {sb.stage}")
        lines.append(f"  first_use_ms {fmt(sb.first_use_ms)}")
        lines.append(f"  last_release_ms {fmt(sb.last_release_ms)}")
        lines.append(f"  busy_ms {fmt(sb.busy_ms)}")
        lines.append(f"  gap_count {len(sb.gaps_ms)}")
        lines.append(f"  total_gap_ms {fmt(sb.total_gap_ms)}")
        hist = " ".join(str(c) for c in sb.histogram)
        lines.append(f"  gap_histogram {hist}")
    return "\n".join(lines) + "\n"


def parse_task_table(text: str) -> list[dict]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].split("\t") != list(_TASK_COLUMNS):
        raise SimulationError("unrecognized task table header")
    rows = []
    for ln in lines[1:]:
        vals = ln.split("\t")
        row = dict(zip(_TASK_COLUMNS, vals))
        rows.append(row)
    return rows


def report_from_task_rows(rows: list[dict]) -> SimReport:
    """Rebuild a SimReport (summary quantities recomputed) from a task table."""
    records = []
    for row in rows:
        exited = row["exited"] == "yes"

        def num(key):
            return None if row[key] == "-" else float(row[key])

        records.append(TaskRecord(
            int(row["task"]), float(row["arrival"]), float(row["dev_start"]),
            float(row["dev_end"]), num("tx_start"), num("tx_end"),
            num("cloud_start"), num("cloud_end"), float(row["completion"]),
            float(row["latency"]), exited,
            None if row["precision"] == "-" else int(row["precision"]),
            int(row["bits"]),
        ))
    makespan = max(r.completion_ms for r in records)
    n = len(records)
    busy = (
        sum(r.device_end_ms - r.device_start_ms for r in records),
        sum(r.tx_end_ms - r.tx_start_ms for r in records if not r.exited_early),
        sum(r.cloud_end_ms - r.cloud_start_ms for r in records if not r.exited_early),
    )
    return SimReport(tuple(records), makespan, n / makespan * 1000.0,
                     _steady_throughput(records), busy,
                     tuple(makespan - b for b in busy),
                     sum(r.exited_early for r in records),
                     sum(r.latency_ms for r in records) / n,
                     sum(r.bits_transmitted for r in records) / n)
