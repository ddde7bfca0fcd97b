"""Command-line entry points.

Subcommands: simulate (config -> dataset dir), train (dataset -> checkpoint),
diagnose (checkpoint + window file -> report), run (closed loop),
eval (standard suite -> scores + figures), retrain (checkpoint + new config
-> reshaped, partially retrained checkpoint).
"""

from __future__ import annotations

import argparse
import json
import shutil
import sys
from pathlib import Path

import numpy as np

from . import bench
from .config import load_experiment, load_schedule, Schedule, save_experiment
from .dataset import (
    NormalValues,
    aggregate,
    load_dataset,
    save_dataset,
)
from .gvae import (
    checkpoint_meta,
    incremental_reshape,
    load_checkpoint,
    partial_retrain,
    save_checkpoint,
)
from .rca import RcaConfig, diagnose
from .simulator import WindowTrace, generate_dataset, make_cluster
from .topology import build_cbn, graph_diff, graph_from_config, schema_from_config


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="microcause",
                                     description="counterfactual root-cause analysis toolkit")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--config", type=Path, help="experiment config (YAML)")
    parser.add_argument("--out", type=Path, help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a schedule and write a dataset directory")
    p.add_argument("--schedule", type=Path, help="schedule YAML; defaults to healthy load")
    p.add_argument("--windows", type=int, default=120)
    p.add_argument("--spans", action="store_true", help="also write raw spans (windows.jsonl)")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("diagnose", help="diagnose violating windows from a window file")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--window-file", type=Path, required=True,
                   help="line-delimited window traces with spans")
    p.add_argument("--window-index", type=int, default=None,
                   help="diagnose this window instead of the most recent violation")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--tau", type=float, default=0.9)

    p = sub.add_parser("run", help="closed control loop against the simulator")
    p.add_argument("--schedule", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--windows", type=int, default=40)

    p = sub.add_parser("eval", help="standard suite: detectors, scores, figures")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--requests", type=int, default=200)
    p.add_argument("--topologies", nargs="+", default=["chain5", "fanout5"])

    p = sub.add_parser("retrain", help="reshape a checkpoint to a new topology and retrain")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True,
                   help="dataset directory generated under the new topology")
    p.add_argument("--epochs", type=int, default=30)

    args = parser.parse_args(argv)
    return COMMANDS[args.command](args)


def _require(args, attr: str):
    value = getattr(args, attr, None)
    if value is None:
        print(f"error: --{attr} is required for this command", file=sys.stderr)
        raise SystemExit(2)
    return value


def cmd_simulate(args) -> int:
    config = load_experiment(_require(args, "config"))
    out = _require(args, "out")
    schedule = load_schedule(args.schedule) if args.schedule else Schedule(
        loads=config.workload.load_rps)
    if config.qos.target_p99_us <= 0:
        config.qos.target_p99_us = bench.calibrate_qos_target(config, args.seed)
        print(f"calibrated QoS target: {config.qos.target_p99_us:.0f} us")
    ds = bench.build_dataset(config, schedule, args.windows, args.seed,
                             emit_spans=args.spans)
    save_dataset(out, ds)
    save_experiment(config, Path(out) / "experiment.yaml")
    if args.spans:
        cluster = make_cluster(config, args.seed)
        rng = np.random.default_rng(args.seed)
        traces, _ = generate_dataset(cluster, schedule, args.windows, rng,
                                     emit_spans=True)
        with open(Path(out) / "windows.jsonl", "w") as fh:
            for t in traces:
                fh.write(json.dumps(t.to_dict(), sort_keys=True) + "\n")
    met = sum(1 for s in ds.samples if s.qos_met)
    print(f"wrote {len(ds.samples)} windows ({met} met QoS) to {out}")
    return 0


def cmd_train(args) -> int:
    out = _require(args, "out")
    ds = load_dataset(args.data)
    config = load_experiment(Path(args.data) / "experiment.yaml")
    model, log = bench.train_model(ds, config.model, args.seed, epochs=args.epochs)
    save_checkpoint(model, out, extra_meta={
        "qos_target_p99_us": ds.meta.get("qos_target_p99_us"),
        "percentiles": ds.meta.get("percentiles"),
    })
    shutil.copy(Path(args.data) / "normal_values.json", Path(out) / "normal_values.json")
    shutil.copy(Path(args.data) / "experiment.yaml", Path(out) / "experiment.yaml")
    print(f"trained {len(model.units)} units for {len(log)} epochs; "
          f"final loss {log[-1]['loss']:.3f}" if log else "zero-epoch train")
    return 0


def _load_normals(checkpoint: Path) -> NormalValues:
    with open(checkpoint / "normal_values.json") as fh:
        return NormalValues.from_dict(json.load(fh))


def cmd_diagnose(args) -> int:
    model = load_checkpoint(args.checkpoint)
    meta = checkpoint_meta(args.checkpoint)
    qos = float(meta["extra"]["qos_target_p99_us"])
    normals = _load_normals(args.checkpoint)
    traces = []
    with open(args.window_file) as fh:
        for line in fh:
            traces.append(WindowTrace.from_dict(json.loads(line)))
    percentiles = tuple(meta["extra"]["percentiles"])
    samples = [aggregate(t, model.cbn.graph.root_rpc, qos, percentiles) for t in traces]
    if args.window_index is not None:
        chosen = [s for s in samples if s.window_index == args.window_index]
        if not chosen:
            print(f"window {args.window_index} not in file", file=sys.stderr)
            return 1
    else:
        chosen = [s for s in samples if not s.qos_met][-1:]
        if not chosen:
            print("no violating window found; nothing to diagnose")
            return 0
    cfg = RcaConfig(tau=args.tau, n_counterfactual_samples=args.samples)
    report = diagnose(model, chosen[0], normals, qos, cfg,
                      np.random.default_rng(args.seed), force=True)
    print(report.render_text())
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"report_w{report.window_index}.json").write_text(report.to_json())
    return 0


def cmd_run(args) -> int:
    from .actuator import control_loop

    out = _require(args, "out")
    model = load_checkpoint(args.checkpoint)
    meta = checkpoint_meta(args.checkpoint)
    qos = float(meta["extra"]["qos_target_p99_us"])
    normals = _load_normals(args.checkpoint)
    config = load_experiment(args.config or Path(args.checkpoint) / "experiment.yaml")
    schedule = load_schedule(args.schedule)
    cluster = make_cluster(config, args.seed)
    log = control_loop(model, cluster, schedule, normals, qos, RcaConfig(),
                       np.random.default_rng(args.seed), args.windows)
    out.mkdir(parents=True, exist_ok=True)
    log.save_jsonl(out / "episode.jsonl")
    bench.timeline_figure(log, out / "timeline.png", out / "timeline.csv")
    n_act = len(log.actions)
    n_viol = sum(1 for r in log.records if not r.qos_met)
    print(f"{len(log.records)} windows, {n_viol} violations, {n_act} actions; "
          f"log in {out}")
    return 0


def cmd_eval(args) -> int:
    out = _require(args, "out")
    out.mkdir(parents=True, exist_ok=True)
    result = bench.run_suite(seed=args.seed, topologies=tuple(args.topologies),
                             epochs=args.epochs,
                             requests_per_window=args.requests, verbose=True)
    bench.write_scores(result.scores, out / "scores.json")
    bench.accuracy_figure(result.scores, out / "accuracy.png", out / "accuracy.csv")
    for name, score in result.scores.items():
        print(f"{name:18s} accuracy={score.accuracy:.2f} "
              f"fp={score.false_positive_rate:.3f} fn={score.false_negative_rate:.3f}")
    timing = bench.measure_timing(
        next(iter(result.runs.values())).model,
        next(iter(result.runs.values())).dataset, seed=args.seed)
    (out / "timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True))
    print(f"inference: {timing['inference_ms_per_window']:.1f} ms/window")
    return 0


def cmd_retrain(args) -> int:
    out = _require(args, "out")
    model = load_checkpoint(args.checkpoint)
    meta = checkpoint_meta(args.checkpoint)
    new_config = load_experiment(args.config or Path(args.data) / "experiment.yaml")
    ds = load_dataset(args.data)
    graph = graph_from_config(new_config.topology)
    new_cbn = build_cbn(graph, schema_from_config(graph, new_config.metrics.service,
                                                  new_config.metrics.channel))
    delta = graph_diff(model.cbn, new_cbn)
    print(f"delta: added={list(delta.added)} removed={list(delta.removed)} "
          f"reshaped={list(delta.reshaped)}")
    model = incremental_reshape(model, delta, np.random.default_rng(args.seed))
    changed = set(delta.added) | set(delta.reshaped)
    if changed:
        model.normalizer = ds.normalizer
        model, _log = partial_retrain(model, changed, ds.samples, args.epochs,
                                      np.random.default_rng(args.seed))
    save_checkpoint(model, out, extra_meta=meta.get("extra"))
    shutil.copy(Path(args.data) / "normal_values.json", Path(out) / "normal_values.json")
    save_experiment(new_config, Path(out) / "experiment.yaml")
    print(f"retrained {len(changed)} changed + downstream units; checkpoint in {out}")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "diagnose": cmd_diagnose,
    "run": cmd_run,
    "eval": cmd_eval,
    "retrain": cmd_retrain,
}


if __name__ == "__main__":
    raise SystemExit(main())
