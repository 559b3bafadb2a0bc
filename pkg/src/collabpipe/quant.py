"""Uniform affine quantization and minimum-precision search.

Payload size for a transmitted tensor is defined as ``output_elements *
bits`` exactly; there is no container or header overhead anywhere in the
pipeline model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_EPSILON = 0.005
DEFAULT_PRECISION_DOMAIN = (2, 3, 4, 5, 6, 7, 8, 16)


class QuantError(ValueError):
    pass


class InfeasiblePrecisionError(QuantError):
    """No precision in the domain meets the accuracy-loss limit."""


@dataclass(frozen=True)
class QuantSpec:
    """Affine code parameters: bits and the clamp range of the tensor."""

    bits: int
    range_min: float
    range_max: float

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise QuantError(f"bits {self.bits} outside [2, 16]")
        if not self.range_min < self.range_max:
            raise QuantError("range_min must be < range_max")

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def scale(self) -> float:
        return (self.range_max - self.range_min) / self.levels


@dataclass(frozen=True)
class OptimizerConfig:
    """Knobs shared by the offline optimizer and the calibration sweep.

    ``search_mode`` selects the partition search strategy: "exact"
    enumerates the recursive chain-flow candidate space exhaustively,
    "sweep" runs the linear per-flow scan, and "auto" (default) picks
    exact for graphs up to ``exact_layer_limit`` layers and sweep beyond.
    """

    epsilon: float = DEFAULT_EPSILON
    t_max_ms: float = math.inf
    precision_domain: tuple[int, ...] = DEFAULT_PRECISION_DOMAIN
    search_mode: str = "auto"
    exact_layer_limit: int = 16

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise QuantError(f"epsilon {self.epsilon} outside [0, 1]")
        if self.t_max_ms < 0:
            raise QuantError("t_max_ms must be nonnegative")
        domain = tuple(sorted(set(int(b) for b in self.precision_domain)))
        if not domain:
            raise QuantError("precision_domain must be nonempty")
        for b in domain:
            if not 2 <= b <= 16:
                raise QuantError(f"precision {b} outside [2, 16]")
        object.__setattr__(self, "precision_domain", domain)
        if self.search_mode not in ("auto", "exact", "sweep"):
            raise QuantError(f"unknown search_mode {self.search_mode!r}")


def quantize(values, spec: QuantSpec) -> np.ndarray:
    """Map reals to integer codes; out-of-range inputs clamp.

    Rounding is half-away-from-zero so reimplementations are bit-compatible.
    """
    x = np.asarray(values, dtype=np.float64)
    t = (x - spec.range_min) / spec.scale
    rounded = np.copysign(np.floor(np.abs(t) + 0.5), t)
    return np.clip(rounded, 0, spec.levels).astype(np.int64)


def dequantize(codes, spec: QuantSpec) -> np.ndarray:
    """Invert quantize up to scale/2 per element."""
    q = np.asarray(codes)
    if q.size and (q.min() < 0 or q.max() > spec.levels):
        raise QuantError(f"code outside [0, {spec.levels}]")
    return spec.range_min + q.astype(np.float64) * spec.scale


def roundtrip(values, spec: QuantSpec) -> np.ndarray:
    return dequantize(quantize(values, spec), spec)


def min_precision(accuracy_table: dict[int, float], full_accuracy: float,
                  cfg: OptimizerConfig) -> int:
    """Smallest precision whose accuracy loss stays within cfg.epsilon.

    Binary search over the ordered precision domain; the loss predicate is
    monotone because the table is nondecreasing in bits.  A precision not
    tabulated takes the value of the largest tabulated key below it.
    """
    table = dict(accuracy_table)
    prev = None
    for bits in sorted(table):
        if prev is not None and table[bits] < prev:
            raise QuantError(f"accuracy table not monotone at {bits} bits")
        prev = table[bits]

    def feasible(bits: int) -> bool:
        keys = [b for b in table if b <= bits]
        acc = table[max(keys)] if keys else float("-inf")
        return full_accuracy - acc <= cfg.epsilon

    domain = cfg.precision_domain
    lo, hi = 0, len(domain) - 1
    if not feasible(domain[hi]):
        raise InfeasiblePrecisionError(
            f"no precision in {domain} meets epsilon={cfg.epsilon}")
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(domain[mid]):
            hi = mid
        else:
            lo = mid + 1
    return domain[lo]


def payload_bits(elements: int, bits: int) -> int:
    return elements * bits


def transmission_ms(total_bits: float, bandwidth_mbps: float) -> float:
    """Milliseconds to push ``total_bits`` at a constant rate.

    1 Mbps = 1e6 bits/s = 1e3 bits/ms.
    """
    if bandwidth_mbps <= 0:
        raise QuantError("bandwidth must be positive")
    return total_bits / (bandwidth_mbps * 1000.0)
