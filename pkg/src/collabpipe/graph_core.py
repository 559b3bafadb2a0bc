"""Profiled model graphs and their chain-flow decomposition.

A model profile is a DAG of layers, each annotated with per-tier compute
costs, output tensor size and a per-precision accuracy table.  The
partitioning optimizer does not work on the raw DAG: parallel regions are
clustered into virtual blocks, giving a linear "chain flow" view whose
boundaries are the candidate cut positions.  Blocks nest, so the same view
applies recursively inside each parallel branch.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Union


class ModelError(ValueError):
    """Base for profile parsing and graph validation failures."""


class ProfileError(ModelError):
    """Malformed profile document or layer record."""


class GraphValidationError(ModelError):
    """Structural violation: cycles, multiple sources/sinks, unreachable nodes."""


@dataclass(frozen=True)
class LayerNode:
    """One profiled layer: costs, output tensor shape and accuracy proxy."""

    id: str
    device_time_ms: float
    cloud_time_ms: float
    output_elements: int
    output_channels: int
    output_range: tuple[float, float]
    accuracy_table: Mapping[int, float]

    def __post_init__(self):
        if not self.id:
            raise ProfileError("layer id must be a non-empty string")
        if self.device_time_ms < 0 or self.cloud_time_ms < 0:
            raise ProfileError(f"layer {self.id}: negative cost")
        if self.output_elements < 0:
            raise ProfileError(f"layer {self.id}: negative output_elements")
        if self.output_channels < 1:
            raise ProfileError(f"layer {self.id}: output_channels must be positive")
        if self.output_elements and self.output_elements < self.output_channels:
            raise ProfileError(
                f"layer {self.id}: output_elements < output_channels"
            )
        lo, hi = self.output_range
        if not lo < hi:
            raise ProfileError(f"layer {self.id}: output_range min must be < max")
        table = dict(self.accuracy_table)
        if not table:
            raise ProfileError(f"layer {self.id}: empty accuracy table")
        prev = None
        for bits in sorted(table):
            if not isinstance(bits, int) or not 2 <= bits <= 16:
                raise ProfileError(
                    f"layer {self.id}: accuracy table key {bits!r} outside [2, 16]"
                )
            acc = table[bits]
            if not 0.0 <= acc <= 1.0:
                raise ProfileError(f"layer {self.id}: accuracy {acc} outside [0, 1]")
            if prev is not None and acc < prev:
                raise ProfileError(
                    f"layer {self.id}: accuracy table not monotone at {bits} bits"
                )
            prev = acc
        object.__setattr__(self, "accuracy_table", table)

    @property
    def full_accuracy(self) -> float:
        """Accuracy at the highest tabulated precision."""
        return self.accuracy_table[max(self.accuracy_table)]

    def accuracy_at(self, bits: int) -> float:
        """Step-function lookup: value at the largest tabulated key <= bits."""
        keys = [b for b in self.accuracy_table if b <= bits]
        if not keys:
            return float("-inf")
        return self.accuracy_table[max(keys)]


class ModelGraph:
    """Validated single-source single-sink DAG of LayerNodes.

    Immutable after construction; adjacency and topological order are
    precomputed so evaluation code can treat lookups as O(1).
    """

    def __init__(self, name: str, nodes: Iterable[LayerNode],
                 edges: Iterable[tuple[str, str]]):
        self.name = name
        self.nodes: dict[str, LayerNode] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise GraphValidationError(f"duplicate layer id {node.id}")
            self.nodes[node.id] = node
        self.edges: tuple[tuple[str, str], ...] = tuple(dict.fromkeys(
            (str(u), str(v)) for u, v in edges))
        self._succ: dict[str, tuple[str, ...]] = {i: () for i in self.nodes}
        self._pred: dict[str, tuple[str, ...]] = {i: () for i in self.nodes}
        succ: dict[str, list[str]] = {i: [] for i in self.nodes}
        pred: dict[str, list[str]] = {i: [] for i in self.nodes}
        for u, v in self.edges:
            if u not in self.nodes or v not in self.nodes:
                raise GraphValidationError(f"edge ({u}, {v}) references unknown layer")
            if u == v:
                raise GraphValidationError(f"self-loop on {u}")
            succ[u].append(v)
            pred[v].append(u)
        for i in self.nodes:
            self._succ[i] = tuple(sorted(succ[i]))
            self._pred[i] = tuple(sorted(pred[i]))
        self.edge_set = frozenset(self.edges)
        self.entry, self.exit = self._validate()
        self.topo_order: tuple[str, ...] = self._topological_order()
        self._topo_index = {v: i for i, v in enumerate(self.topo_order)}

    # -- structure ---------------------------------------------------------

    def successors(self, node_id: str) -> tuple[str, ...]:
        return self._succ[node_id]

    def predecessors(self, node_id: str) -> tuple[str, ...]:
        return self._pred[node_id]

    def topo_index(self, node_id: str) -> int:
        return self._topo_index[node_id]

    def __len__(self) -> int:
        return len(self.nodes)

    def _validate(self) -> tuple[str, str]:
        sources = sorted(i for i in self.nodes if not self._pred[i])
        sinks = sorted(i for i in self.nodes if not self._succ[i])
        if len(sources) != 1:
            raise GraphValidationError(
                f"expected exactly one source, found {sources or 'none'}")
        if len(sinks) != 1:
            raise GraphValidationError(
                f"expected exactly one sink, found {sinks or 'none'}")
        entry, exit_ = sources[0], sinks[0]
        seen = self._reachable_from(entry)
        if seen != set(self.nodes):
            missing = sorted(set(self.nodes) - seen)
            raise GraphValidationError(f"unreachable from entry: {missing}")
        reaches = self._reaching(exit_)
        if reaches != set(self.nodes):
            missing = sorted(set(self.nodes) - reaches)
            raise GraphValidationError(f"cannot reach exit: {missing}")
        return entry, exit_

    def _topological_order(self) -> tuple[str, ...]:
        indeg = {i: len(self._pred[i]) for i in self.nodes}
        ready = sorted(i for i, d in indeg.items() if d == 0)
        order: list[str] = []
        while ready:
            v = ready.pop(0)
            order.append(v)
            inserted = False
            for w in self._succ[v]:
                indeg[w] -= 1
                if indeg[w] == 0:
                    ready.append(w)
                    inserted = True
            if inserted:
                ready.sort()
        if len(order) != len(self.nodes):
            cyclic = sorted(i for i, d in indeg.items() if d > 0)
            raise GraphValidationError(f"cycle detected involving {cyclic}")
        return tuple(order)

    def _reachable_from(self, start: str) -> set[str]:
        seen = {start}
        stack = [start]
        while stack:
            for w in self._succ[stack.pop()]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return seen

    def _reaching(self, target: str) -> set[str]:
        seen = {target}
        stack = [target]
        while stack:
            for w in self._pred[stack.pop()]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return seen


# -- profile documents -----------------------------------------------------

_LAYER_FIELDS = {"id", "device_time_ms", "cloud_time_ms", "output_elements",
                 "output_channels", "output_range", "accuracy_table"}


def load_model(text: str) -> ModelGraph:
    """Parse and validate a model-profile document (JSON)."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ProfileError(f"profile is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "layers" not in doc or "edges" not in doc:
        raise ProfileError("profile must be an object with 'layers' and 'edges'")
    layers = []
    for rec in doc["layers"]:
        if not isinstance(rec, dict):
            raise ProfileError("layer record must be an object")
        unknown = set(rec) - _LAYER_FIELDS
        if unknown:
            raise ProfileError(f"unknown layer fields: {sorted(unknown)}")
        try:
            table = {int(k): float(v) for k, v in rec["accuracy_table"].items()}
            layers.append(LayerNode(
                id=str(rec["id"]),
                device_time_ms=float(rec["device_time_ms"]),
                cloud_time_ms=float(rec["cloud_time_ms"]),
                output_elements=int(rec["output_elements"]),
                output_channels=int(rec["output_channels"]),
                output_range=(float(rec["output_range"][0]),
                              float(rec["output_range"][1])),
                accuracy_table=table,
            ))
        except (KeyError, TypeError, IndexError) as exc:
            raise ProfileError(f"bad layer record {rec.get('id', '?')}: {exc}") from exc
    edges = []
    for pair in doc["edges"]:
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ProfileError(f"bad edge record {pair!r}")
        edges.append((str(pair[0]), str(pair[1])))
    return ModelGraph(str(doc.get("name", "")), layers, edges)


def dump_model(g: ModelGraph) -> str:
    """Serialize a graph back to the profile document format (round-trips)."""
    doc = {
        "name": g.name,
        "layers": [
            {
                "id": n.id,
                "device_time_ms": n.device_time_ms,
                "cloud_time_ms": n.cloud_time_ms,
                "output_elements": n.output_elements,
                "output_channels": n.output_channels,
                "output_range": list(n.output_range),
                "accuracy_table": {str(b): n.accuracy_table[b]
                                   for b in sorted(n.accuracy_table)},
            }
            for n in (g.nodes[i] for i in sorted(g.nodes))
        ],
        "edges": [list(e) for e in sorted(g.edges)],
    }
    return json.dumps(doc, indent=2, sort_keys=False) + "\n"


def load_model_file(path) -> ModelGraph:
    with open(path, "r", encoding="utf-8") as fh:
        return load_model(fh.read())


# -- chain flows and virtual blocks ----------------------------------------

@dataclass(frozen=True)
class VirtualBlock:
    """Single-entry single-exit parallel region, one element of a chain flow.

    ``member_ids`` is the full layer coverage of the block, including any
    boundary layer absorbed from the enclosing flow.  ``entry_id``/``exit_id``
    name the unique layers through which every path enters and leaves; they
    are members only when absorbed (the graph's own entry/exit never are).
    A block with no ``internal_flows`` is opaque: a region that is not
    series-parallel decomposable, cuttable only at its boundary.
    """

    block_id: str
    member_ids: frozenset[str]
    internal_flows: tuple["ChainFlow", ...]
    entry_id: str
    exit_id: str

    @property
    def is_opaque(self) -> bool:
        return not self.internal_flows


FlowElement = Union[str, VirtualBlock]


@dataclass(frozen=True)
class ChainFlow:
    """Topologically ordered sequence of layers and virtual blocks."""

    elements: tuple[FlowElement, ...]

    def covered_ids(self) -> frozenset[str]:
        out: set[str] = set()
        for el in self.elements:
            out |= element_ids(el)
        return frozenset(out)

    def __len__(self) -> int:
        return len(self.elements)


def element_ids(el: FlowElement) -> frozenset[str]:
    if isinstance(el, VirtualBlock):
        return el.member_ids
    return frozenset((el,))


@dataclass(frozen=True)
class CutCandidate:
    """A boundary between consecutive flow elements and the edges it severs."""

    position: int
    severed_edges: tuple[tuple[str, str], ...]


def cluster_virtual_blocks(g: ModelGraph) -> ChainFlow:
    """Build the top-level chain flow of ``g``.

    Every maximal single-entry single-exit region containing parallel paths
    collapses to one VirtualBlock; interior articulation layers adjacent to a
    region are absorbed into it (entry side wins when contested), while the
    graph entry and exit always stay explicit flow elements.
    """
    counter = itertools.count(1)
    interior = set(g.nodes) - {g.entry, g.exit}
    middle = _segment_elements(g, g.entry, g.exit, interior, counter)
    return ChainFlow((g.entry, *middle, g.exit))


def _segment_elements(g: ModelGraph, s: str, t: str, interior: set[str],
                      counter) -> list[FlowElement]:
    """Decompose the region strictly between s and t into flow elements."""
    if not interior:
        return []
    mandatory = _mandatory_vertices(g, s, t, interior)
    waypoints = [s, *mandatory, t]
    assigned: dict[str, set[str]] = {w: set() for w in mandatory + [s]}
    for v in interior:
        if v in assigned:
            continue
        anchor = s
        for w in mandatory:
            if _reaches_within(g, w, v, interior | {v}):
                anchor = w
        assigned[anchor].add(v)
    raw: list[FlowElement] = []
    for a, b in zip(waypoints, waypoints[1:]):
        if a != s:
            raw.append(a)
        seg = assigned.get(a, set())
        if seg:
            raw.append(_make_region(g, a, b, seg, counter))
    return _fuse(raw)


def _make_region(g: ModelGraph, a: str, b: str, seg: set[str],
                 counter) -> VirtualBlock:
    block_id = f"b{next(counter)}"
    comps = _undirected_components(g, seg)
    flows: list[ChainFlow] = []
    if len(comps) == 1 and (a, b) not in g.edge_set:
        # One cross-linked component and no bypass edge: not decomposable.
        return VirtualBlock(block_id, frozenset(seg), (), a, b)
    for comp in sorted(comps, key=min):
        flows.append(ChainFlow(tuple(_segment_elements(g, a, b, comp, counter))))
    if (a, b) in g.edge_set:
        flows.append(ChainFlow(()))  # direct-edge branch
    return VirtualBlock(block_id, frozenset(seg), tuple(flows), a, b)


def _fuse(raw: list[FlowElement]) -> list[FlowElement]:
    """Absorb articulation layers into adjacent blocks (entry side wins)."""
    out: list[FlowElement] = []
    i = 0
    while i < len(raw):
        el = raw[i]
        if isinstance(el, str):
            if i + 1 < len(raw) and isinstance(raw[i + 1], VirtualBlock):
                blk: VirtualBlock = raw[i + 1]
                blk = replace(blk, member_ids=blk.member_ids | {el}, entry_id=el)
                raw[i + 1] = blk
                i += 1
                continue
            out.append(el)
            i += 1
            continue
        # el is a block; try to absorb the following layer as its exit
        if (i + 1 < len(raw) and isinstance(raw[i + 1], str)
                and not (i + 2 < len(raw) and isinstance(raw[i + 2], VirtualBlock))):
            v = raw[i + 1]
            el = replace(el, member_ids=el.member_ids | {v}, exit_id=v)
            i += 1
        out.append(el)
        i += 1
    return out


def _mandatory_vertices(g: ModelGraph, s: str, t: str,
                        interior: set[str]) -> list[str]:
    """Interior nodes lying on every s->t path, in topological order."""
    nodes = interior | {s, t}
    result = []
    for v in sorted(interior, key=g.topo_index):
        if not _reaches_within(g, s, t, nodes - {v}):
            result.append(v)
    return result


def _reaches_within(g: ModelGraph, src: str, dst: str, allowed: set[str]) -> bool:
    if src == dst:
        return True
    seen = {src}
    stack = [src]
    while stack:
        for w in g.successors(stack.pop()):
            if w == dst:
                return True
            if w in allowed and w not in seen:
                seen.add(w)
                stack.append(w)
    return False


def _undirected_components(g: ModelGraph, seg: set[str]) -> list[set[str]]:
    comps = []
    left = set(seg)
    while left:
        start = min(left)
        comp = {start}
        stack = [start]
        while stack:
            v = stack.pop()
            for w in itertools.chain(g.successors(v), g.predecessors(v)):
                if w in seg and w not in comp:
                    comp.add(w)
                    stack.append(w)
        comps.append(comp)
        left -= comp
    return comps


def enumerate_cut_candidates(g: ModelGraph, flow: ChainFlow) -> list[CutCandidate]:
    """Boundaries between consecutive flow elements, with severed edge sets."""
    if not flow.elements:
        raise ValueError("flow must be nonempty")
    coverage = [element_ids(el) for el in flow.elements]
    candidates = []
    prefix: set[str] = set()
    for pos in range(len(flow.elements) - 1):
        prefix |= coverage[pos]
        suffix: set[str] = set()
        for cov in coverage[pos + 1:]:
            suffix |= cov
        severed = tuple(sorted((u, v) for u, v in g.edges
                               if u in prefix and v in suffix))
        candidates.append(CutCandidate(pos, severed))
    return candidates


def flatten_flow(flow: ChainFlow) -> frozenset[str]:
    """All layer ids covered by a flow, expanding nested blocks."""
    return flow.covered_ids()
