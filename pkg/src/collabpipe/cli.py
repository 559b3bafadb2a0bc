"""Command-line front end.

Subcommands: optimize | calibrate | simulate | gen-features | report.
All configuration is via flags and files; no environment variables are
read.  Exit statuses: 0 success, 2 input error, 3 infeasible, 4 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import datagen, graph_core, offline_opt, online_sched, pipeline_sim
from .pipeline_sim import fmt
from .quant import OptimizerConfig, QuantError


class ScenarioError(ValueError):
    pass


_INPUT_ERRORS = (OSError, json.JSONDecodeError, QuantError, ScenarioError,
                 graph_core.ModelError, offline_opt.StrategyError,
                 pipeline_sim.TraceError, pipeline_sim.SimulationError,
                 online_sched.OnlineError, ValueError)


@dataclass(frozen=True)
class ScenarioConfig:
    model_path: Path
    strategy_path: Path
    trace_path: Path
    arrivals: object  # ("interval", ms, count) | ("times", tuple)
    online_enabled: bool
    feature_set_path: Optional[Path] = None
    feature_spec: Optional[datagen.FeatureSetSpec] = None
    thresholds_path: Optional[Path] = None
    calibration_path: Optional[Path] = None
    calibration_spec: Optional[datagen.FeatureSetSpec] = None
    exit_cost_ms: float = 0.0
    epsilon: float = 0.005
    precision_domain: tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8, 16)
    seed: int = 0
    output_dir: Optional[Path] = None


def _parse_feature_spec(doc: dict, seed: int) -> datagen.FeatureSetSpec:
    dims = doc.get("dims", [8, 2, 2])
    return datagen.FeatureSetSpec(
        n_labels=int(doc["labels"]),
        dims=(int(dims[0]), int(dims[1]), int(dims[2])),
        separation=float(doc.get("separation", 3.0)),
        correlation=float(doc.get("correlation", 1.0)),
        count=int(doc["count"]),
        seed=int(doc.get("seed", seed)),
        center_seed=(int(doc["center_seed"]) if "center_seed" in doc else None),
    )


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    base = path.parent

    def resolve(key) -> Optional[Path]:
        return (base / doc[key]) if key in doc and doc[key] else None

    if "model" not in doc or "strategy" not in doc or "trace" not in doc:
        raise ScenarioError("scenario needs 'model', 'strategy' and 'trace'")
    arr = doc.get("arrivals", {})
    if "times_ms" in arr:
        arrivals = ("times", tuple(float(t) for t in arr["times_ms"]))
    else:
        arrivals = ("interval", float(arr.get("interval_ms", 2.0)),
                    int(arr.get("count", 40)))
    online = doc.get("online", {}) or {}
    enabled = bool(online.get("enabled", False))
    seed = int(doc.get("seed", 0))
    feature_spec = None
    cal_spec = None
    if "features_spec" in doc:
        feature_spec = _parse_feature_spec(doc["features_spec"], seed)
    if enabled and "calibration_spec" in online:
        cal_spec = _parse_feature_spec(online["calibration_spec"], seed)
    return ScenarioConfig(
        model_path=base / doc["model"],
        strategy_path=base / doc["strategy"],
        trace_path=base / doc["trace"],
        arrivals=arrivals,
        online_enabled=enabled,
        feature_set_path=resolve("features"),
        feature_spec=feature_spec,
        thresholds_path=(base / online["thresholds"])
        if online.get("thresholds") else None,
        calibration_path=(base / online["calibration_features"])
        if online.get("calibration_features") else None,
        calibration_spec=cal_spec,
        exit_cost_ms=float(online.get("exit_cost_ms", 0.0)),
        epsilon=float(online.get("epsilon", 0.005)),
        precision_domain=tuple(int(b) for b in online.get(
            "domain", (2, 3, 4, 5, 6, 7, 8, 16))),
        seed=seed,
        output_dir=Path(doc["output_dir"]) if doc.get("output_dir") else None,
    )


def _domain_arg(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(b) for b in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad precision list {text!r}") from exc


def _dims_arg(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("dims must look like CxHxW, e.g. 8x4x4")
    return tuple(int(p) for p in parts)  # type: ignore[return-value]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="collabpipe",
        description="Partition, calibrate and simulate end-cloud pipelines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_opt = sub.add_parser("optimize", help="offline partition/precision search")
    p_opt.add_argument("model")
    p_opt.add_argument("--bw", type=float, required=True,
                       help="offline bandwidth in Mbps")
    p_opt.add_argument("--epsilon", type=float, default=0.005)
    p_opt.add_argument("--tmax", type=float, default=math.inf,
                       help="latency budget in ms (default unbounded)")
    p_opt.add_argument("--domain", type=_domain_arg,
                       default=(2, 3, 4, 5, 6, 7, 8, 16))
    p_opt.add_argument("--mode", choices=("auto", "exact", "sweep"),
                       default="auto")
    p_opt.add_argument("--out", default=None,
                       help="strategy file to write (default: <model>.strategy)")
    p_opt.set_defaults(func=cmd_optimize)

    p_cal = sub.add_parser("calibrate", help="derive exit/precision thresholds")
    p_cal.add_argument("model")
    p_cal.add_argument("features")
    p_cal.add_argument("--epsilon", type=float, default=0.005)
    p_cal.add_argument("--domain", type=_domain_arg,
                       default=(2, 3, 4, 5, 6, 7, 8, 16))
    p_cal.add_argument("--out", default=None,
                       help="thresholds file (default: <features>.thresholds)")
    p_cal.set_defaults(func=cmd_calibrate)

    p_sim = sub.add_parser("simulate", help="run a scenario file")
    p_sim.add_argument("scenario")
    p_sim.add_argument("--out-dir", default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_gen = sub.add_parser("gen-features", help="synthesize a feature set")
    p_gen.add_argument("--labels", type=int, required=True)
    p_gen.add_argument("--dims", type=_dims_arg, default=(8, 2, 2))
    p_gen.add_argument("--separation", type=float, default=3.0)
    p_gen.add_argument("--correlation", type=float, default=1.0,
                       help="mean same-label run length")
    p_gen.add_argument("--count", type=int, required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--center-seed", type=int, default=None)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen_features)

    p_rep = sub.add_parser("report", help="summarize a saved per-task table")
    p_rep.add_argument("tasks_file")
    p_rep.set_defaults(func=cmd_report)
    return parser


# -- subcommands ---------------------------------------------------------------

def cmd_optimize(args) -> int:
    with open(args.model, "r", encoding="utf-8") as fh:
        g = graph_core.load_model(fh.read())
    cfg = OptimizerConfig(epsilon=args.epsilon, t_max_ms=args.tmax,
                          precision_domain=args.domain, search_mode=args.mode)
    strategy, metrics = offline_opt.optimize(g, args.bw, cfg)
    out = Path(args.out) if args.out else Path(args.model).with_suffix(".strategy")
    out.write_text(offline_opt.strategy_to_json(strategy), encoding="utf-8")
    print(f"strategy {out}")
    print(f"device_layers {' '.join(sorted(strategy.device_layers))}")
    print(f"cloud_layers {' '.join(sorted(strategy.cloud_layers))}")
    for cut in strategy.cuts:
        print(f"cut {cut.producer} bits {cut.bits} edges "
              + " ".join(f"{u}->{v}" for u, v in cut.edges))
    print(f"t_e_ms {fmt(metrics.t_e_ms)}")
    print(f"t_t_ms {fmt(metrics.t_t_ms)}")
    print(f"t_c_ms {fmt(metrics.t_c_ms)}")
    print(f"t_t_parallel_ms {fmt(metrics.t_t_parallel_ms)}")
    print(f"t_c_parallel_ms {fmt(metrics.t_c_parallel_ms)}")
    print(f"b_c {fmt(metrics.b_c)}")
    print(f"b_t {fmt(metrics.b_t)}")
    print(f"max_stage_ms {fmt(metrics.max_stage_ms)}")
    print(f"objective {fmt(metrics.objective)}")
    return 0


def cmd_calibrate(args) -> int:
    with open(args.model, "r", encoding="utf-8") as fh:
        g = graph_core.load_model(fh.read())
    samples = datagen.load_feature_file(args.features)
    features = datagen.pooled(samples)
    labels = sorted({label for label, _ in features})
    if len(labels) < 2:
        raise ScenarioError("feature set must contain at least two labels")
    cache = online_sched.SemanticCache(labels, features[0][1].vector.shape[0])
    cache.warm(features)
    thresholds = online_sched.calibrate(cache, features, args.epsilon,
                                        args.domain)
    out = Path(args.out) if args.out else Path(args.features).with_suffix(
        ".thresholds")
    out.write_text(online_sched.thresholds_to_json(
        thresholds, meta={"model": g.name, "epsilon": args.epsilon}),
        encoding="utf-8")
    print(f"thresholds {out}")
    print(f"s_ext {fmt(thresholds.s_ext)}")
    for bits in sorted(thresholds.s_adj):
        print(f"s_adj[{bits}] {fmt(thresholds.s_adj[bits])}")
    return 0


def build_online(scenario: ScenarioConfig, g, strategy) -> Optional[object]:
    if not scenario.online_enabled:
        return None
    if scenario.calibration_path is not None:
        cal_samples = datagen.load_feature_file(scenario.calibration_path)
    elif scenario.calibration_spec is not None:
        cal_samples = datagen.generate_feature_set(scenario.calibration_spec)
    else:
        raise ScenarioError("online scenario needs calibration features")
    cal = datagen.pooled(cal_samples)
    labels = sorted({label for label, _ in cal})
    if len(labels) < 2:
        raise ScenarioError("calibration set must contain at least two labels")
    cache = online_sched.SemanticCache(labels, cal[0][1].vector.shape[0])
    cache.warm(cal)
    if scenario.thresholds_path is not None:
        thresholds = online_sched.load_thresholds_file(scenario.thresholds_path)
    else:
        thresholds = online_sched.calibrate(cache, cal, scenario.epsilon,
                                            scenario.precision_domain)
    t_e, _, t_c = offline_opt.stage_times(g, strategy, 1.0)
    base_bits = max((c.bits for c in strategy.cuts), default=min(
        scenario.precision_domain))
    return online_sched.OnlineScheduler(
        cache, thresholds, base_bits, t_e, t_c,
        strategy.payload_elements(g), scenario.precision_domain,
        exit_cost_ms=scenario.exit_cost_ms)


def run_scenario(scenario: ScenarioConfig):
    g = graph_core.load_model_file(scenario.model_path)
    strategy = offline_opt.load_strategy_file(scenario.strategy_path, g)
    trace = pipeline_sim.load_trace_file(scenario.trace_path)
    features = labels = None
    if scenario.feature_set_path is not None:
        samples = datagen.load_feature_file(scenario.feature_set_path)
    elif scenario.feature_spec is not None:
        samples = datagen.generate_feature_set(scenario.feature_spec)
    else:
        samples = None
    if samples:
        features = [tensor for _, tensor in samples]
        labels = [label for label, _ in samples]
    if scenario.arrivals[0] == "times":
        times = scenario.arrivals[1]
        tasks = []
        for i, t in enumerate(times):
            feat = features[i % len(features)] if features else None
            lab = labels[i % len(labels)] if labels else None
            tasks.append(pipeline_sim.Task(t, feat, lab))
        stream = pipeline_sim.TaskStream(tuple(tasks))
    else:
        _, interval, count = scenario.arrivals
        stream = pipeline_sim.fixed_interval_stream(count, interval,
                                                    features, labels)
    online = build_online(scenario, g, strategy)
    report = pipeline_sim.simulate(g, strategy, stream, trace, online)
    return report


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    report = run_scenario(scenario)
    out_dir = Path(args.out_dir) if args.out_dir else (
        scenario.output_dir or Path(args.scenario).with_suffix(".out"))
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "tasks.txt").write_text(
        pipeline_sim.render_task_table(report), encoding="utf-8")
    (out_dir / "summary.txt").write_text(
        pipeline_sim.render_summary(report), encoding="utf-8")
    (out_dir / "bubbles.txt").write_text(
        pipeline_sim.render_bubbles(pipeline_sim.bubble_report(report)),
        encoding="utf-8")
    print(f"report {out_dir}")
    print(f"throughput_it_per_s {fmt(report.throughput_it_per_s)}")
    print(f"steady_throughput_it_per_s {fmt(report.steady_throughput_it_per_s)}")
    print(f"mean_latency_ms {fmt(report.mean_latency_ms)}")
    return 0


def cmd_gen_features(args) -> int:
    spec = datagen.FeatureSetSpec(
        n_labels=args.labels, dims=args.dims, separation=args.separation,
        correlation=args.correlation, count=args.count, seed=args.seed,
        center_seed=args.center_seed)
    samples = datagen.generate_feature_set(spec)
    Path(args.out).write_text(datagen.dump_feature_set(samples),
                              encoding="utf-8")
    print(f"features {args.out}")
    print(f"samples {len(samples)}")
    return 0


def cmd_report(args) -> int:
    with open(args.tasks_file, "r", encoding="utf-8") as fh:
        rows = pipeline_sim.parse_task_table(fh.read())
    report = pipeline_sim.report_from_task_rows(rows)
    sys.stdout.write(pipeline_sim.render_summary(report))
    sys.stdout.write(pipeline_sim.render_bubbles(
        pipeline_sim.bubble_report(report)))
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except offline_opt.InfeasibleStrategyError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 3
    except _INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # invariant violation / bug
        print(f"internal error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
