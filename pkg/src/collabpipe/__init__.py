"""End-cloud collaborative inference scheduling against profiled cost models.

Offline: joint DAG partitioning and transmission-precision search that
minimizes pipeline bubbles.  Online: semantic-center cache with early exit
and per-task precision retargeting under dynamic bandwidth, evaluated in a
deterministic three-stage pipeline simulator.
"""

from .graph_core import (ChainFlow, LayerNode, ModelGraph, VirtualBlock,
                         cluster_virtual_blocks, enumerate_cut_candidates,
                         load_model, dump_model)
from .offline_opt import (PartitionStrategy, PlanMetrics, OptimizerStats,
                          brute_force_optimize, bubble_functions,
                          evaluate_strategy, optimize, parallel_overlaps,
                          stage_times)
from .online_sched import (OnlineScheduler, SemanticCache, TaskFeature,
                           Thresholds, assess, calibrate, decide, gap,
                           update_center)
from .pipeline_sim import (BandwidthTrace, SimReport, Task, TaskStream,
                           bubble_report, simulate, transmission_duration)
from .quant import (OptimizerConfig, QuantSpec, dequantize, min_precision,
                    quantize)

__version__ = "0.1.0"

__all__ = [
    "BandwidthTrace", "ChainFlow", "LayerNode", "ModelGraph",
    "OnlineScheduler", "OptimizerConfig", "OptimizerStats",
    "PartitionStrategy", "PlanMetrics", "QuantSpec", "SemanticCache",
    "SimReport", "Task", "TaskFeature", "TaskStream", "Thresholds",
    "assess", "brute_force_optimize", "bubble_functions", "bubble_report",
    "calibrate", "cluster_virtual_blocks", "decide", "dequantize",
    "dump_model", "enumerate_cut_candidates", "evaluate_strategy", "gap",
    "load_model", "min_precision", "optimize", "parallel_overlaps",
    "quantize", "simulate", "stage_times", "transmission_duration",
    "update_center",
]
