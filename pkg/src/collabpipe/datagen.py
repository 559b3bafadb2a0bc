"""Synthetic inputs: Gaussian-cluster feature sets and random model graphs.

The feature generator emulates task streams with controlled temporal
correlation: labels arrive in runs whose mean length is the correlation
parameter, and samples within a run share a drift offset, so consecutive
frames of the same label look alike the way video frames do.  All output
is a pure function of the seeds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph_core import LayerNode, ModelGraph
from .online_sched import TaskFeature, gap


@dataclass(frozen=True)
class FeatureSetSpec:
    n_labels: int
    dims: tuple[int, int, int]  # C, H, W
    separation: float
    correlation: float  # mean same-label run length, >= 1
    count: int
    seed: int
    center_seed: int | None = None  # cluster geometry; defaults to seed
    drift_scale: float = 0.5
    noise_scale: float = 0.15
    pixel_noise: float = 0.1


def generate_feature_set(spec: FeatureSetSpec) -> list[tuple[int, np.ndarray]]:
    """Deterministic (label, C x H x W tensor) samples."""
    if spec.count < 1:
        raise ValueError("count must be >= 1")
    if spec.correlation < 1:
        raise ValueError("correlation (mean run length) must be >= 1")
    c, h, w = spec.dims
    if c < 1 or h < 1 or w < 1:
        raise ValueError(f"invalid dims {spec.dims}")
    center_seed = spec.seed if spec.center_seed is None else spec.center_seed
    center_rng = np.random.default_rng(center_seed)
    centers = center_rng.normal(size=(spec.n_labels, c))
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    centers = centers / norms * spec.separation

    rng = np.random.default_rng(spec.seed)
    samples: list[tuple[int, np.ndarray]] = []
    prev_label = -1
    while len(samples) < spec.count:
        label = int(rng.integers(spec.n_labels))
        if spec.n_labels > 1 and label == prev_label:
            label = (label + 1 + int(rng.integers(spec.n_labels - 1))) \
                % spec.n_labels
        prev_label = label
        run = int(rng.geometric(1.0 / spec.correlation))
        # fixed-magnitude drift, random direction: every run is a scene change
        # of the same severity, so run length is the only systematic difference
        # between correlation levels
        direction = rng.normal(0.0, 1.0, c)
        norm = float(np.linalg.norm(direction))
        drift = direction / norm * spec.drift_scale if norm > 0 else direction
        for _ in range(min(run, spec.count - len(samples))):
            feat = centers[label] + drift + rng.normal(0.0, spec.noise_scale, c)
            tensor = feat[:, None, None] + rng.normal(0.0, spec.pixel_noise,
                                                      (c, h, w))
            samples.append((label, tensor))
    return samples


def pooled(samples: list[tuple[int, np.ndarray]]) -> list[tuple[int, TaskFeature]]:
    return [(label, gap(tensor)) for label, tensor in samples]


def chunk_shuffled(samples: list, chunk_len: int, seed: int) -> list:
    """Reorder a stream by shuffling contiguous chunks.

    With chunk_len 1 the order is fully random (random frames); larger
    chunks keep short contiguous pieces together (clips from random
    videos); chunk_len >= len(samples) preserves the original sequential
    order.  The sample multiset is unchanged, so correlation levels built
    this way differ only in ordering.
    """
    if chunk_len < 1:
        raise ValueError("chunk_len must be >= 1")
    rng = np.random.default_rng(seed)
    chunks = [samples[i:i + chunk_len] for i in range(0, len(samples), chunk_len)]
    return [s for idx in rng.permutation(len(chunks)) for s in chunks[idx]]


def mean_run_length(labels: list[int]) -> float:
    runs = 1
    for a, b in zip(labels, labels[1:]):
        if a != b:
            runs += 1
    return len(labels) / runs


# -- feature-set files ---------------------------------------------------------

def dump_feature_set(samples: list[tuple[int, np.ndarray]]) -> str:
    """One record per line: label C H W then the flattened tensor values."""
    lines = []
    for label, tensor in samples:
        arr = np.asarray(tensor, dtype=np.float64)
        c, h, w = arr.shape
        values = " ".join(repr(float(v)) for v in arr.ravel())
        lines.append(f"{int(label)} {c} {h} {w} {values}")
    return "\n".join(lines) + "\n"


def parse_feature_set(text: str) -> list[tuple[int, np.ndarray]]:
    samples = []
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.strip()
        if not body:
            continue
        parts = body.split()
        if len(parts) < 4:
            raise ValueError(f"feature line {lineno}: expected label C H W values")
        label = int(parts[0])
        c, h, w = int(parts[1]), int(parts[2]), int(parts[3])
        values = np.asarray([float(x) for x in parts[4:]], dtype=np.float64)
        if values.size != c * h * w:
            raise ValueError(
                f"feature line {lineno}: expected {c * h * w} values, "
                f"got {values.size}")
        samples.append((label, values.reshape(c, h, w)))
    if not samples:
        raise ValueError("feature set is empty")
    return samples


def load_feature_file(path) -> list[tuple[int, np.ndarray]]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_feature_set(fh.read())


# -- random model graphs ---------------------------------------------------------

def _random_accuracy_table(rng, bits_list) -> dict[int, float]:
    full = float(rng.uniform(0.9, 0.99))
    loss = float(rng.uniform(0.0, 0.04))
    table: dict[int, float] = {}
    for b in sorted(bits_list):
        table[b] = max(0.0, full - loss)
        loss *= float(rng.uniform(0.05, 0.7))
    table[max(bits_list)] = full
    return table


def _build_units(rng, budget: int, max_width: int, parallel_prob: float):
    units = []
    while budget > 0:
        if budget >= 2 and rng.random() < parallel_prob:
            width = min(int(rng.integers(2, max_width + 1)), budget)
            if width >= 2:
                total = int(rng.integers(width, budget + 1))
                if total == width:
                    sizes = [1] * width
                else:
                    cuts = sorted(rng.choice(np.arange(1, total),
                                             size=width - 1, replace=False))
                    sizes = list(np.diff([0, *cuts, total]))
                branches = [_build_units(rng, int(sz), max_width, parallel_prob)
                            for sz in sizes]
                units.append(("p", branches))
                budget -= total
                if budget > 0:  # dedicated join layer keeps the region SESE
                    units.append(("n",))
                    budget -= 1
                continue
        units.append(("n",))
        budget -= 1
    return units


def random_series_parallel_graph(seed_or_rng, min_layers: int = 5,
                                 max_layers: int = 12, max_width: int = 3,
                                 parallel_prob: float = 0.5,
                                 table_bits=(2, 4, 8, 16),
                                 elements_range=(1_000, 30_000),
                                 cost_range=(0.1, 10.0),
                                 name: str = "random-sp") -> ModelGraph:
    """Random series-parallel DAG with random costs and accuracy tables."""
    rng = (seed_or_rng if isinstance(seed_or_rng, np.random.Generator)
           else np.random.default_rng(seed_or_rng))
    target = int(rng.integers(min_layers, max_layers + 1))
    counter = [0]
    edges: list[tuple[str, str]] = []
    ids: list[str] = []

    def new_node() -> str:
        counter[0] += 1
        nid = f"n{counter[0]:02d}"
        ids.append(nid)
        return nid

    entry = new_node()
    exit_ = None

    def materialize(units, a: str, b: str) -> None:
        cur = a
        i = 0
        while i < len(units):
            unit = units[i]
            if unit[0] == "n":
                n = new_node()
                edges.append((cur, n))
                cur = n
                i += 1
                continue
            if i + 1 < len(units):
                join = new_node()
                step = 2
            else:
                join = b
                step = 1
            for branch in unit[1]:
                materialize(branch, cur, join)
            cur = join
            i += step
        if cur != b:
            edges.append((cur, b))

    units = _build_units(rng, max(target - 2, 0), max_width, parallel_prob)
    exit_ = new_node()
    materialize(units, entry, exit_)

    nodes = []
    for nid in ids:
        nodes.append(LayerNode(
            id=nid,
            device_time_ms=float(rng.uniform(*cost_range)),
            cloud_time_ms=float(rng.uniform(*cost_range)),
            output_elements=int(rng.integers(*elements_range)),
            output_channels=8,
            output_range=(-1.0, 1.0),
            accuracy_table=_random_accuracy_table(rng, table_bits),
        ))
    return ModelGraph(name, nodes, edges)


def parallel_flows_graph(layers_per_flow: int, n_flows: int, seed: int = 0,
                         feasible_from: int = 4,
                         table_bits=(2, 4, 8, 16),
                         elements_range=(2_000, 20_000),
                         cost_range=(0.5, 2.0)) -> ModelGraph:
    """Entry -> n parallel chains of c layers -> exit (the c x n family)."""
    rng = np.random.default_rng(seed)
    nodes = []
    edges = []

    def table() -> dict[int, float]:
        return {b: (0.95 if b >= feasible_from else 0.85) for b in table_bits}

    def layer(nid: str) -> LayerNode:
        return LayerNode(
            id=nid,
            device_time_ms=float(rng.uniform(*cost_range)),
            cloud_time_ms=float(rng.uniform(*cost_range)),
            output_elements=int(rng.integers(*elements_range)),
            output_channels=8,
            output_range=(-1.0, 1.0),
            accuracy_table=table(),
        )

    nodes.append(layer("entry"))
    for f in range(n_flows):
        prev = "entry"
        for l in range(layers_per_flow):
            nid = f"f{f:02d}l{l:02d}"
            nodes.append(layer(nid))
            edges.append((prev, nid))
            prev = nid
        edges.append((prev, "exit"))
    nodes.append(layer("exit"))
    return ModelGraph(f"flows-{layers_per_flow}x{n_flows}", nodes, edges)
