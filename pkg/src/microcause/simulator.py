"""Deterministic synthetic microservice cluster.

Latency model, all integer microseconds per request:

  proc(v)   = rint((base_proc / freq * cache_mult * (1 + k*u/(1-u))
                    + mem_penalty + disk_penalty) * window_noise * request_noise)
  y_req/y_resp = rint(base_delay * (1 + k_net*u_net/(1-u_net)) * noises)
  y_s(rpc)  = proc(callee) + sum(child y_c)          (sequential children)
            = proc(callee) + max(child y_c)          (parallel children)
  y_c(rpc)  = y_req + y_s + y_resp

Utilization u aggregates the request load with any active cpu injections
and is capped below 1 so latencies stay finite under overload.  Memory and
disk pressure add absolute stall time (thrashing does not scale with a
service's nominal compute), and only above a knee; together with the
per-service queue gain this makes hot-but-harmless tiers possible -- the
regime where pure threshold detectors rank the wrong culprit.

Everything is driven by a caller-supplied numpy Generator; identical
(config, seed, schedule) runs are byte-identical.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .config import (
    ExperimentConfig,
    InjectionSpec,
    InvalidConfigError,
    PARALLEL,
    Schedule,
)
from .topology import RpcGraph, Span, graph_from_config

LOG2 = math.log(2.0)


class CapExceededError(RuntimeError):
    """An action would push a resource past its configured node cap."""

    def __init__(self, action: "Action", reason: str):
        super().__init__(f"{action.kind} on {action.service}: {reason}")
        self.action = action
        self.reason = reason


@dataclass
class Injection:
    kind: str                   # cpu | memory | disk_io | network
    intensity: float            # fraction of capacity consumed, [0, 1]
    start_window: int
    end_window: int

    def active(self, window: int) -> bool:
        return self.start_window <= window <= self.end_window


@dataclass
class ServiceState:
    service: str
    replicas: int
    cpu_capacity: float
    cpu_freq_scale: float
    mem_capacity: float
    disk_capacity: float
    cache_ways: int
    max_cache_ways: int
    net_bandwidth: float
    base_proc_us: float
    base_mem_frac: float
    base_disk_frac: float
    queue_gain: float | None = None    # None -> global tuning value
    util_jitter: float | None = None
    injected: list[Injection] = field(default_factory=list)
    # initial allocations anchor injection demand and actuation caps
    initial_cpu_capacity: float = 0.0
    initial_mem_capacity: float = 0.0
    initial_disk_capacity: float = 0.0

    def intensity(self, kind: str, window: int) -> float:
        return sum(i.intensity for i in self.injected if i.kind == kind and i.active(window))

    def intensity_timeline(self, kind: str, first_window: int, n: int) -> np.ndarray:
        out = np.zeros(n)
        for i in self.injected:
            if i.kind != kind:
                continue
            lo = max(0, i.start_window - first_window)
            hi = min(n - 1, i.end_window - first_window)
            if lo <= hi:
                out[lo:hi + 1] += i.intensity
        return out


@dataclass
class ChannelState:
    channel_id: str
    caller: str
    callee: str
    base_delay_us: float
    net_bandwidth: float
    base_net_frac: float
    initial_net_bandwidth: float = 0.0


@dataclass
class ClusterState:
    config: ExperimentConfig
    graph: RpcGraph
    services: dict[str, ServiceState]
    channels: dict[str, ChannelState]
    seed: int
    window_index: int = 0

    def service(self, name: str) -> ServiceState:
        return self.services[name]

    def snapshot(self) -> "ClusterState":
        return copy.deepcopy(self)


@dataclass
class WindowTrace:
    window_index: int
    spans: list[Span]
    metrics: dict                       # {"services": {...}, "channels": {...}}
    offered_load_rps: float
    truth: dict | None = None           # per-rpc int64 arrays; oracle only, not serialized

    def to_dict(self) -> dict:
        return {
            "window_index": self.window_index,
            "offered_load_rps": self.offered_load_rps,
            "metrics": self.metrics,
            "spans": [s.to_dict() for s in self.spans],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WindowTrace":
        return cls(
            window_index=int(d["window_index"]),
            spans=[Span.from_dict(s) for s in d["spans"]],
            metrics=d["metrics"],
            offered_load_rps=float(d["offered_load_rps"]),
        )


def make_cluster(config: ExperimentConfig, seed: int) -> ClusterState:
    """Build the cluster state; deterministic for a given (config, seed)."""
    config.topology.validate()
    graph = graph_from_config(config.topology)
    services: dict[str, ServiceState] = {}
    for name, svc in config.topology.services.items():
        cpu_capacity = svc.cpu_capacity
        if svc.base_cpu_util is not None:
            # derive capacity so the configured workload sits at this utilization
            demand = config.workload.load_rps * svc.base_proc_us / 1e6
            cpu_capacity = demand / (svc.base_cpu_util * svc.replicas * svc.cpu_freq_scale)
        services[name] = ServiceState(
            service=name,
            replicas=svc.replicas,
            cpu_capacity=cpu_capacity,
            cpu_freq_scale=svc.cpu_freq_scale,
            mem_capacity=svc.mem_capacity,
            disk_capacity=svc.disk_capacity,
            cache_ways=svc.cache_ways,
            max_cache_ways=svc.max_cache_ways,
            net_bandwidth=1.0,
            base_proc_us=svc.base_proc_us,
            base_mem_frac=svc.base_mem_frac,
            base_disk_frac=svc.base_disk_frac,
            queue_gain=svc.queue_gain,
            util_jitter=svc.util_jitter,
            initial_cpu_capacity=cpu_capacity,
            initial_mem_capacity=svc.mem_capacity,
            initial_disk_capacity=svc.disk_capacity,
        )
    channels: dict[str, ChannelState] = {}
    for cid in graph.channel_ids():
        caller, callee = cid.split("->")
        ch = config.topology.channel_of(caller, callee)
        channels[cid] = ChannelState(
            channel_id=cid, caller=caller, callee=callee,
            base_delay_us=ch.base_delay_us, net_bandwidth=ch.net_bandwidth,
            base_net_frac=ch.base_net_frac, initial_net_bandwidth=ch.net_bandwidth,
        )
    return ClusterState(config=config, graph=graph, services=services,
                        channels=channels, seed=seed)


def install_schedule(cluster: ClusterState, schedule: Schedule) -> None:
    """Attach the schedule's injections to the targeted services."""
    for spec in schedule.injections:
        spec.validate()
        if spec.service not in cluster.services:
            raise InvalidConfigError(f"injection targets unknown service {spec.service!r}")
        cluster.services[spec.service].injected.append(
            Injection(kind=spec.kind, intensity=spec.intensity,
                      start_window=spec.start_window, end_window=spec.end_window)
        )


# ---------------------------------------------------------------------------
# latency core

def _lognormal(rng: np.random.Generator, sigma: float, shape) -> np.ndarray:
    """Unit-median multiplicative noise; degenerates to exactly 1 at sigma=0."""
    if sigma <= 0.0:
        return np.ones(shape)
    return np.exp(sigma * rng.standard_normal(shape))


def _knee(util: np.ndarray, knee: float, cap: float) -> np.ndarray:
    return np.minimum(cap, np.maximum(0.0, (util - knee) / np.maximum(1e-9, 1.0 - util)))


@dataclass
class _Block:
    """Per-request latency arrays for a run of windows, shape (W, R) each."""

    rpc_arrays: dict            # rpc_id -> {"proc","y_req","y_resp","y_s","y_c"}
    service_util: dict          # service -> {"cpu_util","mem_util","disk_util","cache_pressure"}  (W,)
    channel_util: dict          # channel_id -> {"net_util","rtt_us"}  (W,)


def _simulate_block(cluster: ClusterState, loads: np.ndarray, rng: np.random.Generator,
                    n_requests: int, first_window: int) -> _Block:
    tun = cluster.config.sim
    W = len(loads)
    R = n_requests
    cap = tun.util_cap

    service_util: dict[str, dict[str, np.ndarray]] = {}
    proc_base: dict[str, np.ndarray] = {}
    for name in sorted(cluster.services):
        svc = cluster.services[name]
        inj = {kind: svc.intensity_timeline(kind, first_window, W)
               for kind in ("cpu", "memory", "disk_io", "network")}
        sigma_u = tun.sigma_util_window if svc.util_jitter is None else svc.util_jitter
        jitter = _lognormal(rng, sigma_u, W)
        load_demand = loads * svc.base_proc_us / 1e6 * jitter
        cpu_total = svc.cpu_capacity * svc.replicas * svc.cpu_freq_scale
        u_cpu = np.minimum(cap, (load_demand + inj["cpu"] * svc.initial_cpu_capacity)
                           / cpu_total)
        mem_util = np.minimum(cap, (svc.base_mem_frac * svc.initial_mem_capacity * jitter
                                    + inj["memory"] * svc.initial_mem_capacity)
                              / (svc.mem_capacity * svc.replicas))
        disk_util = np.minimum(cap, (svc.base_disk_frac * svc.initial_disk_capacity * jitter
                                     + inj["disk_io"] * svc.initial_disk_capacity)
                               / (svc.disk_capacity * svc.replicas))
        cache_pressure = np.full(W, 1.0 - svc.cache_ways / svc.max_cache_ways)
        gain = tun.queue_gain if svc.queue_gain is None else svc.queue_gain
        queue = 1.0 + gain * u_cpu / (1.0 - u_cpu)
        base = (svc.base_proc_us / svc.cpu_freq_scale
                * (1.0 + tun.cache_penalty * cache_pressure) * queue
                + tun.mem_penalty * tun.mem_ref_us * _knee(mem_util, tun.mem_knee, tun.knee_cap)
                + tun.disk_penalty * tun.disk_ref_us * _knee(disk_util, tun.disk_knee, tun.knee_cap))
        service_util[name] = {
            "cpu_util": u_cpu, "mem_util": mem_util, "disk_util": disk_util,
            "cache_pressure": cache_pressure,
        }
        proc_base[name] = base

    channel_util: dict[str, dict[str, np.ndarray]] = {}
    delay_base: dict[str, np.ndarray] = {}
    for cid in sorted(cluster.channels):
        ch = cluster.channels[cid]
        callee = cluster.services.get(ch.callee)
        inj_net = (callee.intensity_timeline("network", first_window, W)
                   if callee is not None else np.zeros(W))
        jitter = _lognormal(rng, tun.sigma_util_window, W)
        u_net = np.minimum(cap, (ch.base_net_frac * ch.initial_net_bandwidth * jitter
                                 + inj_net * ch.initial_net_bandwidth) / ch.net_bandwidth)
        contention = np.minimum(tun.knee_cap, u_net / (1.0 - u_net))
        base = ch.base_delay_us * (1.0 + tun.net_gain * contention)
        channel_util[cid] = {"net_util": u_net, "rtt_us": 2.0 * base}
        delay_base[cid] = base

    rpc_arrays: dict[str, dict[str, np.ndarray]] = {}
    for r in sorted(cluster.graph.rpcs, key=lambda r: r.rpc_id):
        win = _lognormal(rng, tun.sigma_window, (W, 1))
        req = _lognormal(rng, tun.sigma_request, (W, R))
        proc = np.rint(proc_base[r.callee][:, None] * win * req).astype(np.int64)
        cid = cluster.graph.channel_id(r.rpc_id)
        chw = _lognormal(rng, tun.sigma_channel_window, (W, 1))
        y_req = np.rint(delay_base[cid][:, None] * chw
                        * _lognormal(rng, tun.sigma_channel_request, (W, R))).astype(np.int64)
        y_resp = np.rint(delay_base[cid][:, None] * chw
                         * _lognormal(rng, tun.sigma_channel_request, (W, R))).astype(np.int64)
        rpc_arrays[r.rpc_id] = {"proc": np.maximum(proc, 0),
                                "y_req": np.maximum(y_req, 0),
                                "y_resp": np.maximum(y_resp, 0)}

    # compose leaves -> root; a child's path id always has one more ">" than
    # its parent's, so depth-descending order resolves children first
    for rpc_id in sorted(rpc_arrays, key=lambda rid: (rid.count(">"), rid), reverse=True):
        r = cluster.graph.rpc(rpc_id)
        arrays = rpc_arrays[rpc_id]
        kids = cluster.graph.children(rpc_id)
        y_s = arrays["proc"].copy()
        if kids:
            child_yc = [rpc_arrays[k.rpc_id]["y_c"] for k in kids]
            if r.child_combine == PARALLEL:
                y_s += np.maximum.reduce(child_yc)
            else:
                y_s += np.sum(child_yc, axis=0)
        arrays["y_s"] = y_s
        arrays["y_c"] = arrays["y_req"] + y_s + arrays["y_resp"]

    return _Block(rpc_arrays=rpc_arrays, service_util=service_util,
                  channel_util=channel_util)


def _materialize_metrics(cluster: ClusterState, block: _Block, w: int,
                         rng: np.random.Generator) -> dict:
    noise = cluster.config.sim.metric_noise
    services = {}
    for name in sorted(block.service_util):
        u = block.service_util[name]
        # a service's network utilization is that of its ingress links only;
        # counting egress too would place one channel's signal in two services
        incident = [cid for cid in sorted(cluster.channels)
                    if cluster.channels[cid].callee == name]
        net = max(float(block.channel_util[cid]["net_util"][w]) for cid in incident)
        vals = {
            "cpu_util": float(u["cpu_util"][w]),
            "mem_util": float(u["mem_util"][w]),
            "disk_util": float(u["disk_util"][w]),
            "net_util": net,
            "cache_pressure": float(u["cache_pressure"][w]),
        }
        if noise > 0.0:
            eps = rng.normal(0.0, noise, size=len(vals))
            vals = {k: float(np.clip(v + e, 0.0, 1.0))
                    for (k, v), e in zip(vals.items(), eps)}
        services[name] = vals
    channels = {}
    for cid in sorted(block.channel_util):
        u = block.channel_util[cid]
        vals = {"net_util": float(u["net_util"][w]), "rtt_us": float(u["rtt_us"][w])}
        if noise > 0.0:
            vals["net_util"] = float(np.clip(vals["net_util"] + rng.normal(0.0, noise), 0.0, 1.0))
            vals["rtt_us"] = float(max(0.0, vals["rtt_us"] * (1.0 + rng.normal(0.0, noise))))
        channels[cid] = vals
    return {"services": services, "channels": channels}


def _emit_spans(cluster: ClusterState, block: _Block, w: int, window_index: int,
                n_requests: int) -> list[Span]:
    graph = cluster.graph
    window_us = int(cluster.config.workload.window_seconds * 1e6)
    t0 = window_index * window_us
    spacing = max(1, window_us // max(1, n_requests))
    spans: list[Span] = []

    def emit(rpc_id: str, parent_instance: str | None, trace_id: str,
             client_start: int, i: int) -> tuple[int, str]:
        r = graph.rpc(rpc_id)
        a = block.rpc_arrays[rpc_id]
        y_req = int(a["y_req"][w, i])
        y_resp = int(a["y_resp"][w, i])
        y_s = int(a["y_s"][w, i])
        y_c = y_req + y_s + y_resp
        instance = f"{trace_id}/{rpc_id}"
        server_start = client_start + y_req
        spans.append(Span(trace_id=trace_id, rpc_id=instance, parent_rpc_id=parent_instance,
                          service=r.caller, peer_service=r.callee, kind="client",
                          start_us=client_start, duration_us=y_c))
        spans.append(Span(trace_id=trace_id, rpc_id=instance, parent_rpc_id=parent_instance,
                          service=r.callee, peer_service=r.caller, kind="server",
                          start_us=server_start, duration_us=y_s))
        cursor = server_start
        for child in graph.children(rpc_id):
            end, _ = emit(child.rpc_id, instance, trace_id, cursor, i)
            if r.child_combine != PARALLEL:
                cursor = end
        return client_start + y_c, instance

    for i in range(n_requests):
        trace_id = f"t{window_index}-{i}"
        emit(graph.root_rpc, None, trace_id, t0 + i * spacing, i)
    return spans


def step_window(cluster: ClusterState, load_rps: float, rng: np.random.Generator,
                n_requests: int | None = None) -> WindowTrace:
    """Simulate one window at the cluster's current window index and advance it."""
    if load_rps <= 0:
        raise InvalidConfigError("load must be positive")
    R = n_requests or cluster.config.workload.requests_per_window
    w_idx = cluster.window_index
    block = _simulate_block(cluster, np.array([load_rps]), rng, R, w_idx)
    spans = _emit_spans(cluster, block, 0, w_idx, R)
    metrics = _materialize_metrics(cluster, block, 0, rng)
    cluster.window_index += 1
    truth = {rid: {k: v[0] for k, v in arrays.items()}
             for rid, arrays in block.rpc_arrays.items()}
    return WindowTrace(window_index=w_idx, spans=spans, metrics=metrics,
                       offered_load_rps=float(load_rps), truth=truth)


def generate_dataset(cluster: ClusterState, schedule: Schedule, n_windows: int,
                     rng: np.random.Generator, n_requests: int | None = None,
                     emit_spans: bool = True) -> tuple[list[WindowTrace], list[list]]:
    """Run the schedule; returns window traces plus ground-truth labels.

    Labels echo the injection schedule per window and exist for the
    evaluator only -- training and diagnosis never see them.
    """
    if n_windows < 1:
        raise InvalidConfigError("n_windows must be >= 1")
    install_schedule(cluster, schedule)
    R = n_requests or cluster.config.workload.requests_per_window
    loads = np.array([schedule.load_at(w) for w in range(n_windows)], dtype=float)
    first = cluster.window_index
    block = _simulate_block(cluster, loads, rng, R, first)
    traces = []
    for w in range(n_windows):
        spans = _emit_spans(cluster, block, w, first + w, R) if emit_spans else []
        metrics = _materialize_metrics(cluster, block, w, rng)
        truth = {rid: {k: v[w] for k, v in arrays.items()}
                 for rid, arrays in block.rpc_arrays.items()}
        traces.append(WindowTrace(window_index=first + w, spans=spans, metrics=metrics,
                                  offered_load_rps=float(loads[w]), truth=truth))
    cluster.window_index += n_windows
    return traces, schedule.labels(n_windows)


# ---------------------------------------------------------------------------
# actuation

@dataclass(frozen=True)
class Action:
    service: str
    kind: str                   # see ACTION_KINDS
    magnitude: float = 0.0
    resource: str | None = None # injection kind targeted by rate limiting

    def describe(self) -> str:
        extra = f" ({self.resource})" if self.resource else ""
        return f"{self.kind}[{self.magnitude:g}] on {self.service}{extra}"


ACTION_KINDS = (
    "cpu_freq_boost", "scale_up_cpu", "scale_up_mem", "scale_up_disk",
    "scale_out", "rate_limit_interference", "cache_partition", "net_partition",
    "migrate",
)


def apply_action(cluster: ClusterState, action: Action) -> ClusterState:
    """Apply one corrective action; raises CapExceededError at the node caps."""
    if action.service not in cluster.services:
        raise InvalidConfigError(f"action targets unknown service {action.service!r}")
    svc = cluster.services[action.service]
    tun = cluster.config.sim
    kind = action.kind

    if kind == "cpu_freq_boost":
        if svc.cpu_freq_scale >= 1.0:
            raise CapExceededError(action, "frequency already at maximum")
        svc.cpu_freq_scale = min(1.0, svc.cpu_freq_scale + (action.magnitude or 0.1))
    elif kind == "scale_up_cpu":
        cap = svc.initial_cpu_capacity * tun.max_cpu_capacity_factor
        if svc.cpu_capacity >= cap:
            raise CapExceededError(action, "cpu allocation at node cap")
        svc.cpu_capacity = min(cap, svc.cpu_capacity
                               + (action.magnitude or 0.5) * svc.initial_cpu_capacity)
    elif kind == "scale_up_mem":
        cap = svc.initial_mem_capacity * tun.max_mem_capacity_factor
        if svc.mem_capacity >= cap:
            raise CapExceededError(action, "memory allocation at node cap")
        svc.mem_capacity = min(cap, svc.mem_capacity
                               + (action.magnitude or 0.5) * svc.initial_mem_capacity)
    elif kind == "scale_up_disk":
        cap = svc.initial_disk_capacity * tun.max_disk_capacity_factor
        if svc.disk_capacity >= cap:
            raise CapExceededError(action, "disk allocation at node cap")
        svc.disk_capacity = min(cap, svc.disk_capacity
                                + (action.magnitude or 0.5) * svc.initial_disk_capacity)
    elif kind == "scale_out":
        if svc.replicas >= tun.max_replicas:
            raise CapExceededError(action, "replica count at cap")
        svc.replicas += 1
    elif kind == "rate_limit_interference":
        factor = action.magnitude or 0.5
        w = cluster.window_index
        for inj in svc.injected:
            if inj.active(w) and (action.resource is None or inj.kind == action.resource):
                inj.intensity *= factor
    elif kind == "cache_partition":
        if svc.cache_ways >= svc.max_cache_ways:
            raise CapExceededError(action, "all cache ways already allocated")
        svc.cache_ways = min(svc.max_cache_ways, svc.cache_ways + int(action.magnitude or 1))
    elif kind == "net_partition":
        for cid, ch in cluster.channels.items():
            if ch.callee != action.service:
                continue
            cap = ch.initial_net_bandwidth * tun.max_net_bandwidth_factor
            if ch.net_bandwidth >= cap:
                raise CapExceededError(action, f"bandwidth of {cid} at cap")
            ch.net_bandwidth = min(cap, ch.net_bandwidth
                                   + (action.magnitude or 0.5) * ch.initial_net_bandwidth)
    elif kind == "migrate":
        # moving to a fresh node leaves collocated interferers behind
        w = cluster.window_index
        for inj in svc.injected:
            if inj.active(w):
                inj.intensity = 0.0
    else:
        raise InvalidConfigError(f"unknown action kind {kind!r}")
    return cluster
