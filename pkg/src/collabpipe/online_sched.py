"""Online per-task scheduler: semantic cache, early exit, precision retarget.

Each arriving task's intermediate tensor is pooled to a per-channel feature
vector, compared against per-label running-mean centers via cosine
similarity, and scored with a separability value that combines the
similarity-vector norm with the gap and ratio of the two best labels.
High separability either answers on the device (early exit, skipping
transmission and cloud entirely) or licenses a lower transmission
precision, which is then raised just enough to keep the transmission stage
level with the slowest compute stage at the current bandwidth.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .quant import QuantSpec, roundtrip


class OnlineError(ValueError):
    pass


class DegenerateFeatureError(OnlineError):
    """Zero-norm feature or center: cosine similarity undefined."""


@dataclass(frozen=True)
class TaskFeature:
    vector: np.ndarray
    source_dims: tuple[int, int, int]

    def __post_init__(self):
        vec = np.asarray(self.vector, dtype=np.float64)
        if vec.ndim != 1 or vec.shape[0] != self.source_dims[0]:
            raise OnlineError("feature length must equal the channel count")
        object.__setattr__(self, "vector", vec)


def gap(tensor) -> TaskFeature:
    """Global average pooling: per-channel spatial mean of a C x H x W tensor."""
    arr = np.asarray(tensor, dtype=np.float64)
    if arr.ndim != 3:
        raise OnlineError(f"expected a C x H x W tensor, got shape {arr.shape}")
    c, h, w = arr.shape
    if h * w < 1:
        raise OnlineError("empty spatial dimensions")
    return TaskFeature(arr.reshape(c, h * w).mean(axis=1), (c, h, w))


class SemanticCache:
    """Per-label semantic centers with sample counts.

    Single-writer: updates for a task stream are applied sequentially in
    arrival order; concurrent read-only assessment is safe.
    """

    def __init__(self, labels: Iterable[int], dim: int):
        self.dim = int(dim)
        self.centers: dict[int, np.ndarray] = {
            int(j): np.zeros(self.dim) for j in labels}
        self.counts: dict[int, int] = {j: 0 for j in self.centers}
        if not self.centers:
            raise OnlineError("cache needs at least one label")

    @property
    def labels(self) -> tuple[int, ...]:
        return tuple(sorted(self.centers))

    def update(self, label: int, feature: TaskFeature) -> None:
        label = int(label)
        if label not in self.centers:
            raise OnlineError(f"unknown label {label}")
        vec = feature.vector
        if vec.shape[0] != self.dim:
            raise OnlineError("feature dimension mismatch")
        m = self.counts[label]
        self.centers[label] = (m * self.centers[label] + vec) / (m + 1)
        self.counts[label] = m + 1

    def warm(self, samples: Sequence[tuple[int, TaskFeature]]) -> None:
        for label, feature in samples:
            self.update(label, feature)

    def copy(self) -> "SemanticCache":
        dup = SemanticCache(self.centers.keys(), self.dim)
        dup.centers = {j: c.copy() for j, c in self.centers.items()}
        dup.counts = dict(self.counts)
        return dup


def update_center(cache: SemanticCache, label: int, feature: TaskFeature) -> SemanticCache:
    cache.update(label, feature)
    return cache


@dataclass(frozen=True)
class TaskAssessment:
    labels: tuple[int, ...]
    similarities: np.ndarray  # aligned with labels, each in [0, 1]
    t_high: float
    t_second: float
    separability: float
    argmax_label: int


def assess(cache: SemanticCache, feature: TaskFeature) -> TaskAssessment:
    """Cosine similarities against all centers plus the separability score.

    Raw cosine is clamped to [0, 1]; negative similarity carries no label
    evidence here.  The separability is the Euclidean norm of the clamped
    similarity vector times the gap and the ratio of the two best labels,
    so it is scale-invariant in the feature but grows with the label count.
    """
    labels = cache.labels
    warmed = [j for j in labels if cache.counts[j] >= 1]
    if len(warmed) < 2:
        raise OnlineError("cache needs at least two warmed labels")
    vec = feature.vector
    fnorm = float(np.linalg.norm(vec))
    if fnorm == 0.0:
        raise DegenerateFeatureError("zero-norm task feature")
    sims = []
    for j in labels:
        center = cache.centers[j]
        cnorm = float(np.linalg.norm(center))
        if cache.counts[j] >= 1 and cnorm == 0.0:
            raise DegenerateFeatureError(f"zero-norm center for label {j}")
        if cache.counts[j] == 0 or cnorm == 0.0:
            sims.append(0.0)
            continue
        cos = float(np.dot(vec, center) / (fnorm * cnorm))
        sims.append(min(max(cos, 0.0), 1.0))
    arr = np.asarray(sims)
    order = np.argsort(-arr, kind="stable")
    hi, second = int(order[0]), int(order[1])
    t_h, t_sh = float(arr[hi]), float(arr[second])
    norm = float(np.linalg.norm(arr))
    if t_sh == 0.0:
        sep = math.inf if t_h > 0.0 else 0.0
    else:
        sep = norm * (t_h - t_sh) * (t_h / t_sh)
    return TaskAssessment(labels, arr, t_h, t_sh, sep, labels[hi])


# -- thresholds ----------------------------------------------------------------

@dataclass(frozen=True)
class Thresholds:
    """Early-exit threshold and per-precision separability floors.

    ``s_adj`` is monotone: fewer bits require higher separability.  A value
    of +inf disables the corresponding mechanism.  Thresholds are specific
    to the label set they were calibrated on.
    """

    s_ext: float
    s_adj: dict[int, float]

    def __post_init__(self):
        object.__setattr__(self, "s_adj",
                           {int(b): float(v) for b, v in self.s_adj.items()})
        prev = math.inf
        for bits in sorted(self.s_adj):
            if self.s_adj[bits] > prev:
                raise OnlineError("s_adj must not increase with precision")
            prev = self.s_adj[bits]


def thresholds_to_json(t: Thresholds, meta: dict | None = None) -> str:
    def enc(x: float):
        return "inf" if math.isinf(x) else x

    doc = {"s_ext": enc(t.s_ext),
           "s_adj": {str(b): enc(v) for b, v in sorted(t.s_adj.items())}}
    if meta:
        doc["meta"] = meta
    return json.dumps(doc, indent=2) + "\n"


def thresholds_from_json(text: str) -> Thresholds:
    def dec(x) -> float:
        return math.inf if x == "inf" else float(x)

    try:
        doc = json.loads(text)
        return Thresholds(dec(doc["s_ext"]),
                          {int(b): dec(v) for b, v in doc["s_adj"].items()})
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise OnlineError(f"bad thresholds document: {exc}") from exc


def load_thresholds_file(path) -> Thresholds:
    with open(path, "r", encoding="utf-8") as fh:
        return thresholds_from_json(fh.read())


def calibrate(cache: SemanticCache,
              samples: Sequence[tuple[int, TaskFeature]],
              epsilon: float,
              precision_domain: Sequence[int]) -> Thresholds:
    """Sweep separability thresholds so selected samples misclassify <= epsilon.

    The cache must already be warmed on ``samples``.  The exit threshold
    selects on raw separability; the per-precision floors select on raw
    separability but score the argmax after a quantize/dequantize round
    trip of the feature at that precision (feature range taken from the
    calibration set).  Sweeps run over the sorted separability values; when
    no nonempty selection meets epsilon the threshold is +inf, disabling
    the mechanism.
    """
    if not samples:
        raise OnlineError("empty calibration set")
    raw_sep: list[float] = []
    exit_correct: list[bool] = []
    for label, feature in samples:
        a = assess(cache, feature)
        raw_sep.append(a.separability)
        exit_correct.append(a.argmax_label == label)
    s_ext = _sweep_threshold(raw_sep, exit_correct, epsilon)

    lo = min(float(f.vector.min()) for _, f in samples)
    hi = max(float(f.vector.max()) for _, f in samples)
    if not lo < hi:
        lo, hi = lo - 0.5, hi + 0.5
    s_adj: dict[int, float] = {}
    for bits in sorted(precision_domain):
        spec = QuantSpec(bits, lo, hi)
        correct: list[bool] = []
        for label, feature in samples:
            rt = roundtrip(feature.vector, spec)
            if not np.any(rt):
                correct.append(False)  # degenerate round-trip: count as wrong
                continue
            a = assess(cache, TaskFeature(rt, feature.source_dims))
            correct.append(a.argmax_label == label)
        s_adj[bits] = _sweep_threshold(raw_sep, correct, epsilon)
    # enforce monotonicity: lower precision never gets a lower floor
    floor = -math.inf
    for bits in sorted(s_adj, reverse=True):
        floor = max(floor, s_adj[bits])
        s_adj[bits] = floor
    return Thresholds(s_ext, s_adj)


def _sweep_threshold(separability: Sequence[float], correct: Sequence[bool],
                     epsilon: float) -> float:
    """Smallest threshold t with error rate over {separability > t} <= epsilon.

    Candidates are the observed separability values plus one admit-all value
    below the minimum; an empty selection never qualifies.
    """
    pairs = sorted(zip(separability, correct))
    n = len(pairs)
    wrong_suffix = [0] * (n + 1)
    for i in range(n - 1, -1, -1):
        wrong_suffix[i] = wrong_suffix[i + 1] + (0 if pairs[i][1] else 1)
    candidates = [min(s for s, _ in pairs) - 1.0]
    candidates.extend(s for s, _ in pairs)
    for cand in candidates:
        # first index with separability strictly greater than cand
        lo_idx, hi_idx = 0, n
        while lo_idx < hi_idx:
            mid = (lo_idx + hi_idx) // 2
            if pairs[mid][0] > cand:
                hi_idx = mid
            else:
                lo_idx = mid + 1
        selected = n - lo_idx
        if selected == 0:
            continue
        if wrong_suffix[lo_idx] / selected <= epsilon:
            return cand
    return math.inf


# -- per-task decision ---------------------------------------------------------

@dataclass(frozen=True)
class QuantDecision:
    q_required: Optional[int]
    q_chosen: Optional[int]
    t_t_prime_ms: float
    exited: bool
    result_label: Optional[int] = None


def decide(cache: SemanticCache, thresholds: Thresholds, feature: TaskFeature,
           base_precision: int, t_e_ms: float, t_c_ms: float,
           payload_elements: int, bandwidth_mbps: float,
           precision_domain: Sequence[int],
           update_on_exit: bool = True) -> QuantDecision:
    """Early-exit or precision retarget for one task.

    On exit the predicted label's center absorbs the feature (running mean);
    otherwise the required precision is the smallest whose separability
    floor the task clears (falling back to the offline precision when it
    clears none), and the chosen precision minimizes the gap between the
    transmission stage and the slowest stage at the current bandwidth,
    ties going to the smaller transmission time and then fewer bits.
    """
    if bandwidth_mbps <= 0:
        raise OnlineError("bandwidth must be positive")
    a = assess(cache, feature)
    if a.separability > thresholds.s_ext:
        if update_on_exit:
            cache.update(a.argmax_label, feature)
        return QuantDecision(None, None, 0.0, True, a.argmax_label)
    domain = sorted(set(int(b) for b in precision_domain))
    q_required = None
    for bits in domain:
        floor = thresholds.s_adj.get(bits, math.inf)
        if a.separability >= floor:
            q_required = bits
            break
    if q_required is None:
        q_required = int(base_precision)

    def tx_ms(bits: int) -> float:
        return payload_elements * bits / (bandwidth_mbps * 1000.0)

    best = None
    for bits in domain:
        if bits < q_required:
            continue
        t_t = tx_ms(bits)
        gap_value = abs(t_t - max(t_e_ms, t_t, t_c_ms))
        key = (gap_value, t_t, bits)
        if best is None or key < best[0]:
            best = (key, bits, t_t)
    if best is None:
        raise OnlineError(
            f"no precision >= {q_required} in domain {domain}")
    _, q_chosen, t_t_prime = best
    return QuantDecision(q_required, q_chosen, t_t_prime, False, a.argmax_label)


class OnlineScheduler:
    """Binds a warmed cache and thresholds to one deployed strategy.

    ``decide`` accepts either a raw C x H x W tensor or a TaskFeature and is
    what the pipeline simulator calls per task.
    """

    def __init__(self, cache: SemanticCache, thresholds: Thresholds,
                 base_precision: int, t_e_ms: float, t_c_ms: float,
                 payload_elements: int, precision_domain: Sequence[int],
                 exit_cost_ms: float = 0.0, update_on_exit: bool = True,
                 update_on_cloud_labels: bool = False):
        self.cache = cache
        self.thresholds = thresholds
        self.base_precision = int(base_precision)
        self.t_e_ms = float(t_e_ms)
        self.t_c_ms = float(t_c_ms)
        self.payload_elements = int(payload_elements)
        self.precision_domain = tuple(sorted(set(int(b) for b in precision_domain)))
        self.exit_cost_ms = float(exit_cost_ms)
        self.update_on_exit = update_on_exit
        self.update_on_cloud_labels = update_on_cloud_labels
        self.decisions: list[QuantDecision] = []

    def decide(self, feature, bandwidth_mbps: float) -> QuantDecision:
        if not isinstance(feature, TaskFeature):
            feature = gap(feature)
        d = decide(self.cache, self.thresholds, feature, self.base_precision,
                   self.t_e_ms, self.t_c_ms, self.payload_elements,
                   bandwidth_mbps, self.precision_domain,
                   update_on_exit=self.update_on_exit)
        self.decisions.append(d)
        return d

    def observe_cloud_result(self, feature, label: int) -> None:
        """Fold a cloud-returned label into the cache (opt-in).

        The device only learns a non-exited task's label when the cloud
        result comes back; with ``update_on_cloud_labels`` those tasks also
        refresh their center, keeping it tracking the current context.
        """
        if not self.update_on_cloud_labels:
            return
        if not isinstance(feature, TaskFeature):
            feature = gap(feature)
        self.cache.update(int(label), feature)
