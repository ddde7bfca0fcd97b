#!/usr/bin/env python3
"""Inspect baseline tails, injection impact and utilization profiles.

Run this after touching the latency-model constants: every eval-intensity
injection should push the frontend p99 past the calibrated target in most
windows, healthy windows should stay below it, and the hot-but-harmless
tier should sit near the threshold detectors' trigger range.
"""

import argparse

import numpy as np

from microcause import bench
from microcause.config import INJECTION_KINDS, InjectionSpec, Schedule
from microcause.dataset import aggregate_from_truth
from microcause.simulator import generate_dataset, make_cluster


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--topology", default="chain5", choices=["chain5", "fanout5"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--windows", type=int, default=20)
    args = ap.parse_args()

    config = bench.standard_experiment(args.topology, seed=args.seed)
    target = config.qos.target_p99_us
    print(f"{args.topology}: QoS target {target / 1e3:.1f} ms")

    cluster = make_cluster(config, args.seed)
    traces, _ = generate_dataset(cluster, Schedule(loads=config.workload.load_rps),
                                 args.windows, np.random.default_rng(args.seed),
                                 emit_spans=False)
    samples = [aggregate_from_truth(t, cluster.graph.root_rpc, target) for t in traces]
    p99 = np.array([s.e2e_p99_us for s in samples])
    print(f"healthy p99: median {np.median(p99)/1e3:.1f} ms  "
          f"max {p99.max()/1e3:.1f} ms  violations {np.mean(p99 > target):.0%}")
    utils = samples[len(samples) // 2].x["services"]
    for svc in sorted(utils):
        vals = " ".join(f"{m}={v:.2f}" for m, v in utils[svc].items())
        print(f"  {svc}: {vals}")

    print("\ninjection sweeps (violation rate over injected windows, util peak):")
    for service in sorted(config.topology.services):
        for kind in INJECTION_KINDS:
            intensity = bench.SUITE_EVAL_INTENSITY[kind]
            sched = Schedule(loads=config.workload.load_rps, injections=[
                InjectionSpec(service=service, kind=kind, intensity=intensity,
                              start_window=0, end_window=args.windows - 1)])
            cl = make_cluster(config, args.seed)
            tr, _ = generate_dataset(cl, sched, args.windows,
                                     np.random.default_rng(args.seed + 17),
                                     emit_spans=False)
            ss = [aggregate_from_truth(t, cl.graph.root_rpc, target) for t in tr]
            viol = np.mean([not s.qos_met for s in ss])
            metric = bench.KIND_TO_METRIC_CLASS[kind]
            if kind == "network":
                cid = [c for c in ss[0].x["channels"]
                       if c.split("->")[1] == service][0]
                peak = np.median([s.x["channels"][cid]["net_util"] for s in ss])
            else:
                peak = np.median([s.x["services"][service][metric] for s in ss])
            p99i = np.median([s.e2e_p99_us for s in ss])
            print(f"  {service:5s} {kind:8s} i={intensity:.2f}: "
                  f"viol {viol:4.0%}  p99 {p99i/1e3:6.1f} ms  {metric} {peak:.2f}")


if __name__ == "__main__":
    main()
