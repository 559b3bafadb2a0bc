"""Offline joint partitioning / quantization optimizer.

A strategy assigns every layer to the device or the cloud (no cloud->device
edge) and gives each cut layer -- a device layer with at least one cloud
consumer -- a transmission precision.  Each cut layer's output is sent once,
so the transmission payload is summed per producer, not per edge.

The objective for a strategy is the computation bubble plus the transmission
bubble plus the longest pipeline stage, where the bubbles compare stage
durations after accounting for the parallel time a single task's transfers
and cloud layers can hide.  Those parallel times come from a deterministic
earliest-start schedule of one task over three unit resources (device CPU,
link, cloud CPU); see ``parallel_overlaps``.

Two search modes share one evaluator:

* exact -- recursively enumerates every cut of the chain-flow decomposition
  (equivalently, every topologically valid bipartition on series-parallel
  graphs) with every feasible precision assignment;
* sweep -- the linear-time pass: chain positions first, then each block's
  internal flows scanned one at a time holding the others fixed, then a
  coordinate pass over cut precisions.  Evaluation count grows with (layers
  per flow x number of flows) instead of the exponential joint space.

``brute_force_optimize`` is an independent oracle: it enumerates downward
closed device sets directly and every precision assignment in the domain.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

from .graph_core import (ChainFlow, ModelGraph, VirtualBlock,
                         cluster_virtual_blocks, element_ids)
from .quant import OptimizerConfig, transmission_ms


class StrategyError(ValueError):
    pass


class InfeasibleStrategyError(StrategyError):
    """No strategy satisfies the accuracy / latency / overlap constraints."""


class GraphTooLargeError(StrategyError):
    """Guard for the exponential oracle."""


BRUTE_FORCE_MAX_LAYERS = 16

# Float guard for the overlap-bound feasibility comparison only; stage and
# bubble arithmetic is exact-by-construction elsewhere.
_OVERLAP_TOL = 1e-9


@dataclass(frozen=True)
class CutPoint:
    """One cut layer: its severed edges and the transmission precision."""

    producer: str
    edges: tuple[tuple[str, str], ...]
    bits: int


@dataclass(frozen=True)
class PartitionStrategy:
    device_layers: frozenset[str]
    cloud_layers: frozenset[str]
    cuts: tuple[CutPoint, ...]

    def bits_by_producer(self) -> dict[str, int]:
        return {c.producer: c.bits for c in self.cuts}

    def payload_elements(self, g: ModelGraph) -> int:
        return sum(g.nodes[c.producer].output_elements for c in self.cuts)

    def total_payload_bits(self, g: ModelGraph) -> int:
        return sum(g.nodes[c.producer].output_elements * c.bits for c in self.cuts)


@dataclass(frozen=True)
class PlanMetrics:
    """Stage times, overlaps, bubbles and the scheduling objective.

    For feasible plans ``t_t_parallel_ms + t_c_parallel_ms <= max_stage_ms``
    holds; infeasible plans keep their raw numbers plus a reason code
    (``accuracy`` | ``latency-budget`` | ``overlap-bound``).
    """

    t_e_ms: float
    t_t_ms: float
    t_c_ms: float
    t_t_parallel_ms: float
    t_c_parallel_ms: float
    b_c: float
    b_t: float
    max_stage_ms: float
    objective: float
    feasible: bool = True
    reason: str | None = None


@dataclass
class OptimizerStats:
    """Instrumentation: how many full-strategy evaluations a search made."""

    eval_calls: int = 0


def strategy_from_device_set(g: ModelGraph, device: frozenset[str] | set[str],
                             bits_by_producer: dict[str, int]) -> PartitionStrategy:
    device = frozenset(device)
    cloud = frozenset(g.nodes) - device
    by_producer: dict[str, list[tuple[str, str]]] = {}
    for u, v in g.edges:
        if u in device and v in cloud:
            by_producer.setdefault(u, []).append((u, v))
    cuts = tuple(
        CutPoint(u, tuple(sorted(by_producer[u])), int(bits_by_producer[u]))
        for u in sorted(by_producer))
    return PartitionStrategy(device, cloud, cuts)


def validate_strategy(g: ModelGraph, s: PartitionStrategy) -> None:
    if s.device_layers & s.cloud_layers:
        raise StrategyError("device and cloud layer sets overlap")
    if s.device_layers | s.cloud_layers != frozenset(g.nodes):
        raise StrategyError("strategy does not cover every layer")
    for u, v in g.edges:
        if u in s.cloud_layers and v in s.device_layers:
            raise StrategyError(f"edge ({u}, {v}) runs cloud->device")
    try:
        expected = strategy_from_device_set(g, s.device_layers,
                                            s.bits_by_producer())
    except KeyError as exc:
        raise StrategyError(f"severed edge without a precision: {exc}") from exc
    if tuple((c.producer, c.edges) for c in expected.cuts) != \
            tuple((c.producer, c.edges) for c in s.cuts):
        raise StrategyError("cut set does not match the severed edges of the partition")
    for c in s.cuts:
        if not 2 <= c.bits <= 16:
            raise StrategyError(f"cut {c.producer}: bits {c.bits} outside [2, 16]")


# -- stage times, overlaps, bubbles ----------------------------------------

def stage_times(g: ModelGraph, s: PartitionStrategy,
                bandwidth_mbps: float) -> tuple[float, float, float]:
    t_e = sum(g.nodes[i].device_time_ms for i in s.device_layers)
    t_c = sum(g.nodes[i].cloud_time_ms for i in s.cloud_layers)
    t_t = transmission_ms(s.total_payload_bits(g), bandwidth_mbps) if s.cuts else 0.0
    return t_e, t_t, t_c


def _single_task_schedule(g: ModelGraph, s: PartitionStrategy,
                          bandwidth_mbps: float):
    """Earliest-start schedule of one task over device, link and cloud.

    Device layers run back-to-back in topological order.  Each cut payload
    becomes ready when its producer finishes and the link serves payloads
    FIFO by (ready time, producer id).  Cloud layers run serially,
    earliest-ready first, where an input arrives at its transfer completion
    (device producers) or compute completion (cloud producers).
    """
    dev_fin: dict[str, float] = {}
    clock = 0.0
    for v in g.topo_order:
        if v in s.device_layers:
            clock += g.nodes[v].device_time_ms
            dev_fin[v] = clock
    t_e_total = clock

    transfers: list[tuple[str, float, float]] = []
    link_free = 0.0
    ready_list = sorted(((dev_fin[c.producer], c.producer,
                          g.nodes[c.producer].output_elements * c.bits)
                         for c in s.cuts))
    arrival: dict[str, float] = {}
    for ready, producer, bits in ready_list:
        start = max(ready, link_free)
        fin = start + transmission_ms(bits, bandwidth_mbps)
        transfers.append((producer, start, fin))
        link_free = fin
        arrival[producer] = fin

    cloud_fin: dict[str, float] = {}
    cloud_ready: dict[str, float] = {}
    cloud_free = 0.0
    pending = {v for v in g.nodes if v in s.cloud_layers}
    while pending:
        available = []
        for v in pending:
            ready = 0.0
            ok = True
            for p in g.predecessors(v):
                if p in s.device_layers:
                    ready = max(ready, arrival[p])
                elif p in cloud_fin:
                    ready = max(ready, cloud_fin[p])
                else:
                    ok = False
                    break
            if ok:
                available.append((ready, v))
        ready, v = min(available)
        cloud_ready[v] = ready
        start = max(ready, cloud_free)
        cloud_free = start + g.nodes[v].cloud_time_ms
        cloud_fin[v] = cloud_free
        pending.remove(v)

    return t_e_total, transfers, cloud_ready


def parallel_overlaps(g: ModelGraph, s: PartitionStrategy,
                      bandwidth_mbps: float) -> tuple[float, float]:
    """Transmission time hidden behind device compute, and the cloud compute
    of layers whose inputs all arrive before the last transfer completes."""
    t_e_total, transfers, cloud_ready = _single_task_schedule(g, s, bandwidth_mbps)
    if not transfers:
        return 0.0, 0.0
    t_t_parallel = sum(max(0.0, min(fin, t_e_total) - start)
                       for _, start, fin in transfers)
    final_fin = max(fin for _, _, fin in transfers)
    t_c_parallel = sum(g.nodes[v].cloud_time_ms
                       for v, ready in cloud_ready.items() if ready < final_fin)
    return t_t_parallel, t_c_parallel


def bubble_functions(t_e_ms: float, t_t_ms: float, t_c_ms: float,
                     t_t_parallel_ms: float, t_c_parallel_ms: float
                     ) -> tuple[float, float]:
    """Computation and transmission bubble values for one strategy."""
    b_c = abs(t_e_ms - t_c_ms)
    b_t = abs(t_t_ms - max(t_e_ms, t_t_ms - t_t_parallel_ms,
                           t_c_ms - t_c_parallel_ms))
    return b_c, b_t


def evaluate_strategy(g: ModelGraph, s: PartitionStrategy, bandwidth_mbps: float,
                      cfg: OptimizerConfig | None = None) -> PlanMetrics:
    """Assemble stage times, overlaps and bubbles; flag infeasibility.

    A strategy with no cuts runs on one side only; it has no transmission
    stage, so its transmission bubble is zero by convention (a full-device
    plan scores 2 * T_e: the stage itself plus the matching compute bubble).
    """
    cfg = cfg or OptimizerConfig()
    t_e, t_t, t_c = stage_times(g, s, bandwidth_mbps)
    t_t_p, t_c_p = parallel_overlaps(g, s, bandwidth_mbps)
    b_c, b_t = bubble_functions(t_e, t_t, t_c, t_t_p, t_c_p)
    if not s.cuts:
        b_t = 0.0
    max_stage = max(t_e, t_t, t_c)
    objective = b_c + b_t + max_stage

    feasible, reason = True, None
    for cut in s.cuts:
        node = g.nodes[cut.producer]
        if node.full_accuracy - node.accuracy_at(cut.bits) > cfg.epsilon:
            feasible, reason = False, "accuracy"
            break
    if feasible and t_e + t_t + t_c > cfg.t_max_ms:
        feasible, reason = False, "latency-budget"
    if feasible and t_t_p + t_c_p > max_stage + _OVERLAP_TOL:
        feasible, reason = False, "overlap-bound"
    return PlanMetrics(t_e, t_t, t_c, t_t_p, t_c_p, b_c, b_t, max_stage,
                       objective, feasible, reason)


# -- candidate enumeration over the chain-flow decomposition ----------------

def flow_cut_options(g: ModelGraph, flow: ChainFlow,
                     include_outer: bool = True) -> list[frozenset[str]]:
    """Every device-side layer set reachable by cutting ``flow`` once.

    Positions between elements contribute prefix sets; a non-opaque block
    contributes the product of its internal flows' options (each internal
    flow is cut exactly once, possibly at its boundary edges).  With
    ``include_outer`` the flow's own boundary cuts (empty and full prefix)
    are included; the top-level call therefore also yields the all-cloud and
    all-device assignments.
    """
    opts: list[frozenset[str]] = []
    seen: set[frozenset[str]] = set()

    def add(dev: frozenset[str]) -> None:
        if dev not in seen:
            seen.add(dev)
            opts.append(dev)

    coverage = [element_ids(el) for el in flow.elements]
    if include_outer:
        add(frozenset())
    prefix: frozenset[str] = frozenset()
    last = len(flow.elements) - 1
    for j, el in enumerate(flow.elements):
        if isinstance(el, VirtualBlock) and not el.is_opaque:
            entry_part = frozenset({el.entry_id}) & el.member_ids
            per_flow = [flow_cut_options(g, f, include_outer=True)
                        for f in el.internal_flows]
            for combo in itertools.product(*per_flow):
                dev = prefix | entry_part
                for choice in combo:
                    dev |= choice
                add(dev)
        prefix |= coverage[j]
        if j < last or include_outer:
            add(prefix)
    return opts


# -- search ------------------------------------------------------------------

def _plan_key(s: PartitionStrategy, m: PlanMetrics):
    """Total order on plans: objective, then max stage, then fewer severed
    edges, then fewer total bits, then a canonical id for full determinism."""
    return (m.objective, m.max_stage_ms,
            sum(len(c.edges) for c in s.cuts),
            sum(c.bits for c in s.cuts),
            tuple((c.producer, c.bits) for c in s.cuts),
            tuple(sorted(s.device_layers)))


class _Search:
    def __init__(self, g: ModelGraph, bandwidth_mbps: float,
                 cfg: OptimizerConfig, stats: OptimizerStats, passes: int = 2):
        self.g = g
        self.bw = bandwidth_mbps
        self.cfg = cfg
        self.stats = stats
        self.passes = passes
        self.best_key = None
        self.best_strategy: PartitionStrategy | None = None
        self.best_metrics: PlanMetrics | None = None
        self.reasons: set[str] = set()
        self._fb_cache: dict[str, tuple[int, ...]] = {}

    def feasible_bits(self, layer_id: str) -> tuple[int, ...]:
        fb = self._fb_cache.get(layer_id)
        if fb is None:
            node = self.g.nodes[layer_id]
            full = node.full_accuracy
            fb = tuple(b for b in self.cfg.precision_domain
                       if full - node.accuracy_at(b) <= self.cfg.epsilon)
            self._fb_cache[layer_id] = fb
        return fb

    def producers(self, dev: frozenset[str]) -> list[str]:
        return sorted(u for u in dev
                      if any(w not in dev for w in self.g.successors(u)))

    def evaluate(self, dev: frozenset[str], bits_map: dict[str, int]):
        s = strategy_from_device_set(self.g, dev, bits_map)
        m = evaluate_strategy(self.g, s, self.bw, self.cfg)
        self.stats.eval_calls += 1
        if m.feasible:
            key = _plan_key(s, m)
            if self.best_key is None or key < self.best_key:
                self.best_key, self.best_strategy, self.best_metrics = key, s, m
        elif m.reason:
            self.reasons.add(m.reason)
        return s, m

    def _rank(self, s: PartitionStrategy, m: PlanMetrics):
        return (0 if m.feasible else 1,) + _plan_key(s, m)

    def evaluate_min_bits(self, dev: frozenset[str]):
        bits = {}
        for u in self.producers(dev):
            fb = self.feasible_bits(u)
            bits[u] = fb[0] if fb else self.cfg.precision_domain[0]
        return self.evaluate(dev, bits)

    # exact mode ------------------------------------------------------------

    def exact(self, flow: ChainFlow) -> None:
        for dev in flow_cut_options(self.g, flow, include_outer=True):
            prods = self.producers(dev)
            fb = [self.feasible_bits(u) for u in prods]
            if any(not f for f in fb):
                self.reasons.add("accuracy")
                continue
            for combo in itertools.product(*fb):
                self.evaluate(dev, dict(zip(prods, combo)))

    # sweep mode --------------------------------------------------------------

    def sweep(self, flow: ChainFlow) -> None:
        self.evaluate_min_bits(frozenset())
        self.evaluate_min_bits(frozenset(self.g.nodes))
        coverage = [element_ids(el) for el in flow.elements]
        prefix: frozenset[str] = frozenset()
        prefixes: list[frozenset[str]] = []
        for j in range(len(flow.elements)):
            prefixes.append(prefix)
            prefix |= coverage[j]
            if j < len(flow.elements) - 1:
                self.evaluate_min_bits(prefix)
        for j, el in enumerate(flow.elements):
            if isinstance(el, VirtualBlock) and not el.is_opaque:
                self.sweep_block(el, prefixes[j])
        self.refine_precisions()

    def sweep_block(self, block: VirtualBlock,
                    base: frozenset[str]) -> frozenset[str]:
        """Scan each internal flow's cut positions holding the others fixed.

        Returns the block-relative device subset chosen (entry layer plus one
        prefix per internal flow); every candidate is also fed to the global
        incumbent.
        """
        entry_part = frozenset({block.entry_id}) & block.member_ids
        flows = block.internal_flows
        choices: list[frozenset[str]] = [frozenset()] * len(flows)
        for _ in range(self.passes):
            for i, f in enumerate(flows):
                others: frozenset[str] = frozenset()
                for k, ch in enumerate(choices):
                    if k != i:
                        others |= ch
                ctx = base | entry_part | others
                best_rank = None
                best_opt = choices[i]
                for opt in self.flow_sweep_options(f, ctx):
                    s, m = self.evaluate_min_bits(ctx | opt)
                    rank = self._rank(s, m)
                    if best_rank is None or rank < best_rank:
                        best_rank, best_opt = rank, opt
                choices[i] = best_opt
        out = entry_part
        for ch in choices:
            out |= ch
        return out

    def flow_sweep_options(self, f: ChainFlow,
                           ctx: frozenset[str]) -> list[frozenset[str]]:
        """Chain positions of one internal flow, plus one recursively swept
        choice per nested block."""
        opts: list[frozenset[str]] = [frozenset()]
        seen = {frozenset()}
        prefix: frozenset[str] = frozenset()
        for el in f.elements:
            if isinstance(el, VirtualBlock) and not el.is_opaque:
                rel = self.sweep_block(el, ctx | prefix)
                cand = prefix | rel
                if cand not in seen:
                    seen.add(cand)
                    opts.append(cand)
            prefix |= element_ids(el)
            if prefix not in seen:
                seen.add(prefix)
                opts.append(prefix)
        return opts

    def refine_precisions(self) -> None:
        if self.best_strategy is None or not self.best_strategy.cuts:
            return
        dev = self.best_strategy.device_layers
        current = self.best_strategy.bits_by_producer()
        for _ in range(self.passes):
            for u in sorted(current):
                fb = self.feasible_bits(u)
                if fb == (current[u],):
                    continue  # nothing else to try
                best_rank = None
                best_bits = current[u]
                for b in fb:
                    trial = dict(current)
                    trial[u] = b
                    s, m = self.evaluate(dev, trial)
                    rank = self._rank(s, m)
                    if best_rank is None or rank < best_rank:
                        best_rank, best_bits = rank, b
                current[u] = best_bits


def optimize(g: ModelGraph, bandwidth_mbps: float,
             cfg: OptimizerConfig | None = None,
             stats: OptimizerStats | None = None
             ) -> tuple[PartitionStrategy, PlanMetrics]:
    """Search the chain-flow decomposition for the minimum-objective plan."""
    cfg = cfg or OptimizerConfig()
    stats = stats if stats is not None else OptimizerStats()
    mode = cfg.search_mode
    if mode == "auto":
        mode = "exact" if len(g) <= cfg.exact_layer_limit else "sweep"
    flow = cluster_virtual_blocks(g)
    search = _Search(g, bandwidth_mbps, cfg, stats)
    if mode == "exact":
        search.exact(flow)
    else:
        search.sweep(flow)
    if search.best_strategy is None:
        reasons = ", ".join(sorted(search.reasons)) or "n/a"
        raise InfeasibleStrategyError(
            f"no feasible strategy under the given config (reasons seen: {reasons})")
    return search.best_strategy, search.best_metrics


# -- exhaustive oracle -------------------------------------------------------

def enumerate_bipartitions(g: ModelGraph):
    """Yield every downward-closed device set (no cloud->device edge)."""
    order = g.topo_order
    n = len(order)
    dev: set[str] = set()

    def rec(i: int):
        if i == n:
            yield frozenset(dev)
            return
        v = order[i]
        yield from rec(i + 1)
        if all(p in dev for p in g.predecessors(v)):
            dev.add(v)
            yield from rec(i + 1)
            dev.remove(v)

    yield from rec(0)


def count_bipartitions(g: ModelGraph) -> int:
    """Size of the oracle's bipartition space (no evaluation, no size guard)."""
    order = g.topo_order
    n = len(order)
    dev: set[str] = set()

    def rec(i: int) -> int:
        if i == n:
            return 1
        v = order[i]
        total = rec(i + 1)
        if all(p in dev for p in g.predecessors(v)):
            dev.add(v)
            total += rec(i + 1)
            dev.remove(v)
        return total

    return rec(0)


def brute_force_optimize(g: ModelGraph, bandwidth_mbps: float,
                         cfg: OptimizerConfig | None = None,
                         stats: OptimizerStats | None = None
                         ) -> tuple[PartitionStrategy, PlanMetrics]:
    """Exhaustive reference optimizer over bipartitions x precision domain."""
    if len(g) > BRUTE_FORCE_MAX_LAYERS:
        raise GraphTooLargeError(
            f"{len(g)} layers exceeds the brute-force guard "
            f"({BRUTE_FORCE_MAX_LAYERS})")
    cfg = cfg or OptimizerConfig()
    stats = stats if stats is not None else OptimizerStats()
    best_key = None
    best: tuple[PartitionStrategy, PlanMetrics] | None = None
    reasons: set[str] = set()
    for dev in enumerate_bipartitions(g):
        prods = sorted(u for u in dev if any(w not in dev for w in g.successors(u)))
        for combo in itertools.product(cfg.precision_domain, repeat=len(prods)):
            s = strategy_from_device_set(g, dev, dict(zip(prods, combo)))
            m = evaluate_strategy(g, s, bandwidth_mbps, cfg)
            stats.eval_calls += 1
            if not m.feasible:
                if m.reason:
                    reasons.add(m.reason)
                continue
            key = _plan_key(s, m)
            if best_key is None or key < best_key:
                best_key, best = key, (s, m)
    if best is None:
        raise InfeasibleStrategyError(
            f"no feasible strategy under the given config "
            f"(reasons seen: {', '.join(sorted(reasons)) or 'n/a'})")
    return best


# -- strategy documents ------------------------------------------------------

def strategy_to_json(s: PartitionStrategy) -> str:
    import json

    doc = {
        "device_layers": sorted(s.device_layers),
        "cloud_layers": sorted(s.cloud_layers),
        "cuts": [
            {"producer": c.producer, "bits": c.bits,
             "edges": [list(e) for e in c.edges]}
            for c in s.cuts
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


def strategy_from_json(text: str,
                       g: ModelGraph | None = None) -> PartitionStrategy:
    import json

    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise StrategyError(f"strategy is not valid JSON: {exc}") from exc
    try:
        s = PartitionStrategy(
            device_layers=frozenset(doc["device_layers"]),
            cloud_layers=frozenset(doc["cloud_layers"]),
            cuts=tuple(CutPoint(c["producer"],
                                tuple(sorted((e[0], e[1]) for e in c["edges"])),
                                int(c["bits"]))
                       for c in doc["cuts"]),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise StrategyError(f"bad strategy document: {exc}") from exc
    if g is not None:
        validate_strategy(g, s)
    return s


def load_strategy_file(path, g: ModelGraph | None = None) -> PartitionStrategy:
    with open(path, "r", encoding="utf-8") as fh:
        return strategy_from_json(fh.read(), g)
