"""Experiment configuration: dataclasses, topology generators, YAML round-trip.

Topology conventions: ``chain(n)`` and ``fanout(n)`` count *serving*
services.  Every generated topology additionally has an entry caller
(named ``client``) that issues the ingress RPC to the frontend service;
the entry caller runs no code of its own and owns no resources, it is the
observation point for end-to-end latency.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

SEQUENTIAL = "sequential"
PARALLEL = "parallel"

INJECTION_KINDS = ("cpu", "memory", "disk_io", "network")

DEFAULT_SERVICE_METRICS = ("cpu_util", "mem_util", "disk_util", "net_util", "cache_pressure")
DEFAULT_CHANNEL_METRICS = ("net_util", "rtt_us")


class InvalidConfigError(ValueError):
    pass


@dataclass
class ServiceConfig:
    base_proc_us: float = 2000.0
    cpu_capacity: float = 1.0          # cores per replica
    replicas: int = 1
    cpu_freq_scale: float = 1.0        # in [0.5, 1.0]
    mem_capacity: float = 1.0
    disk_capacity: float = 1.0
    cache_ways: int = 6
    max_cache_ways: int = 8
    base_mem_frac: float = 0.30        # memory demand at rest, fraction of capacity
    base_disk_frac: float = 0.15
    base_cpu_util: float | None = None # if set, cpu_capacity is derived from the load
    queue_gain: float | None = None    # per-service override of sim.queue_gain
    util_jitter: float | None = None   # per-service override of sim.sigma_util_window


@dataclass
class ChannelConfig:
    base_delay_us: float = 350.0       # one-way delay at zero contention
    net_bandwidth: float = 1.0
    base_net_frac: float = 0.20


@dataclass
class TopologyConfig:
    name: str
    services: dict[str, ServiceConfig]       # serving services only
    edges: list[tuple[str, str]]             # (caller, callee), ingress edge included
    combine: dict[str, str] = field(default_factory=dict)  # service -> how its children merge
    channels: dict[str, ChannelConfig] = field(default_factory=dict)  # "caller->callee"
    entry_caller: str = "client"

    def combine_of(self, service: str) -> str:
        return self.combine.get(service, SEQUENTIAL)

    def channel_of(self, caller: str, callee: str) -> ChannelConfig:
        return self.channels.setdefault(f"{caller}->{callee}", ChannelConfig())

    def validate(self) -> None:
        if len(self.services) < 1:
            raise InvalidConfigError("topology needs at least one serving service")
        callees = {b for _, b in self.edges}
        callers = {a for a, _ in self.edges}
        for name, svc in self.services.items():
            if name not in callees:
                raise InvalidConfigError(f"service {name!r} is never called")
            if svc.cpu_capacity <= 0 or svc.mem_capacity <= 0 or svc.disk_capacity <= 0:
                raise InvalidConfigError(f"service {name!r} has nonpositive capacity")
            if not (0.5 <= svc.cpu_freq_scale <= 1.0):
                raise InvalidConfigError(f"service {name!r} cpu_freq_scale outside [0.5, 1.0]")
            if svc.replicas < 1:
                raise InvalidConfigError(f"service {name!r} needs >= 1 replica")
        if self.entry_caller not in callers:
            raise InvalidConfigError("entry caller issues no RPC")
        for mode in self.combine.values():
            if mode not in (SEQUENTIAL, PARALLEL):
                raise InvalidConfigError(f"unknown combine mode {mode!r}")
        for ch in self.channels.values():
            if ch.net_bandwidth <= 0:
                raise InvalidConfigError("channel bandwidth must be positive")


@dataclass
class WorkloadConfig:
    load_rps: float = 100.0
    requests_per_window: int = 1000
    window_seconds: float = 30.0


@dataclass
class QosConfig:
    target_p99_us: float = 0.0         # 0 means "set from a calibration run"
    percentiles: tuple[int, ...] = (50, 95)


@dataclass
class SimTuning:
    """Knobs of the latency model; defaults calibrated for the standard suite."""

    queue_gain: float = 1.3            # k in proc *= 1 + k*u/(1-u)
    util_cap: float = 0.99
    mem_knee: float = 0.50             # additive penalty kicks in above this utilization
    mem_penalty: float = 2.0           # x mem_ref_us per unit of knee excess ratio
    mem_ref_us: float = 1500.0         # absolute scale of thrashing stalls
    disk_knee: float = 0.50
    disk_penalty: float = 2.6
    disk_ref_us: float = 1400.0
    knee_cap: float = 8.0              # stall inflation saturates near full utilization
    cache_penalty: float = 0.30        # proc multiplier slope per unit cache pressure
    net_gain: float = 2.0              # channel delay inflation gain
    sigma_window: float = 0.07         # per-(window, service) lognormal spread of proc
    sigma_request: float = 0.16        # per-request lognormal spread of proc
    sigma_channel_window: float = 0.05
    sigma_channel_request: float = 0.12
    sigma_util_window: float = 0.08    # per-window demand jitter (relative)
    metric_noise: float = 0.004        # observation noise on utilization metrics
    # actuation caps, relative to the initial allocation
    max_replicas: int = 8
    max_cpu_capacity_factor: float = 4.0
    max_mem_capacity_factor: float = 4.0
    max_disk_capacity_factor: float = 4.0
    max_net_bandwidth_factor: float = 4.0


@dataclass
class ModelConfig:
    latent_dim: int = 4
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "tanh"
    learning_rate: float = 1e-3
    beta: float = 4.0                  # KL weight; high enough that latents stay exogenous
    batch_size: int = 64
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    logvar_clamp: float = 8.0
    epochs: int = 200
    replay_fraction: float = 0.0


@dataclass
class MetricsConfig:
    service: tuple[str, ...] = DEFAULT_SERVICE_METRICS
    channel: tuple[str, ...] = DEFAULT_CHANNEL_METRICS


@dataclass
class ExperimentConfig:
    topology: TopologyConfig
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    qos: QosConfig = field(default_factory=QosConfig)
    sim: SimTuning = field(default_factory=SimTuning)
    model: ModelConfig = field(default_factory=ModelConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    seed: int = 0


@dataclass
class InjectionSpec:
    service: str
    kind: str                          # cpu | memory | disk_io | network
    intensity: float                   # fraction of capacity consumed, [0, 1]
    start_window: int
    end_window: int                    # inclusive

    def validate(self) -> None:
        if self.kind not in INJECTION_KINDS:
            raise InvalidConfigError(f"unknown injection kind {self.kind!r}")
        if not (0.0 <= self.intensity <= 1.0):
            raise InvalidConfigError("injection intensity outside [0, 1]")
        if self.start_window > self.end_window:
            raise InvalidConfigError("injection start after end")


@dataclass
class Schedule:
    loads: float | list[float] = 100.0
    injections: list[InjectionSpec] = field(default_factory=list)

    def load_at(self, window: int) -> float:
        if isinstance(self.loads, (int, float)):
            return float(self.loads)
        return float(self.loads[min(window, len(self.loads) - 1)])

    def active(self, window: int) -> list[InjectionSpec]:
        return [i for i in self.injections if i.start_window <= window <= i.end_window]

    def labels(self, n_windows: int) -> list[list[tuple[str, str]]]:
        """Ground-truth (service, kind) pairs per window; evaluator-only."""
        return [sorted({(i.service, i.kind) for i in self.active(w)}) for w in range(n_windows)]


# ---------------------------------------------------------------------------
# topology generators

def chain(n: int, service_overrides: dict[str, dict] | None = None) -> TopologyConfig:
    """A chain of ``n`` serving services s0 -> s1 -> ... behind the entry caller."""
    if n < 2:
        raise InvalidConfigError("chain needs n >= 2")
    names = [f"s{i}" for i in range(n)]
    edges = [("client", names[0])] + [(names[i], names[i + 1]) for i in range(n - 1)]
    services = {name: ServiceConfig() for name in names}
    _apply_overrides(services, service_overrides)
    return TopologyConfig(name=f"chain{n}", services=services, edges=edges)


def fanout(n: int, service_overrides: dict[str, dict] | None = None) -> TopologyConfig:
    """One root that broadcasts to ``n - 1`` leaves and waits for all of them."""
    if n < 2:
        raise InvalidConfigError("fanout needs n >= 2")
    leaves = [f"l{i}" for i in range(1, n)]
    edges = [("client", "root")] + [("root", leaf) for leaf in leaves]
    services = {"root": ServiceConfig()}
    services.update({leaf: ServiceConfig() for leaf in leaves})
    _apply_overrides(services, service_overrides)
    return TopologyConfig(
        name=f"fanout{n}", services=services, edges=edges, combine={"root": PARALLEL}
    )


def composed(segments: list[tuple[str, int]],
             service_overrides: dict[str, dict] | None = None) -> TopologyConfig:
    """Chain the given segments top-down; each segment hangs off the previous tail.

    ``composed([("chain", 2), ("fanout", 3)])`` is client -> s0 -> s1 -> f0
    with f0 broadcasting to f1, f2: five serving services.
    """
    if not segments:
        raise InvalidConfigError("composed topology needs at least one segment")
    services: dict[str, ServiceConfig] = {}
    edges: list[tuple[str, str]] = []
    combine: dict[str, str] = {}
    attach = "client"
    prefixes = "sfgh"
    for j, (kind, n) in enumerate(segments):
        prefix = prefixes[j] if j < len(prefixes) else f"seg{j}_"
        if kind == "chain":
            if n < 1:
                raise InvalidConfigError("chain segment needs n >= 1")
            for i in range(n):
                name = f"{prefix}{i}"
                services[name] = ServiceConfig()
                edges.append((attach, name))
                attach = name
        elif kind == "fanout":
            if n < 2:
                raise InvalidConfigError("fanout segment needs n >= 2")
            root = f"{prefix}0"
            services[root] = ServiceConfig()
            edges.append((attach, root))
            combine[root] = PARALLEL
            for i in range(1, n):
                name = f"{prefix}{i}"
                services[name] = ServiceConfig()
                edges.append((root, name))
            attach = root
        else:
            raise InvalidConfigError(f"unknown segment kind {kind!r}")
    _apply_overrides(services, service_overrides)
    label = "+".join(f"{k}{n}" for k, n in segments)
    return TopologyConfig(name=f"composed({label})", services=services,
                          edges=edges, combine=combine)


def _apply_overrides(services: dict[str, ServiceConfig],
                     overrides: dict[str, dict] | None) -> None:
    for name, fields in (overrides or {}).items():
        if name not in services:
            raise InvalidConfigError(f"override for unknown service {name!r}")
        for key, value in fields.items():
            if not hasattr(services[name], key):
                raise InvalidConfigError(f"unknown service field {key!r}")
            setattr(services[name], key, value)


# ---------------------------------------------------------------------------
# (de)serialization

def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["topology"]["edges"] = [list(e) for e in cfg.topology.edges]
    return d


def experiment_from_dict(d: dict) -> ExperimentConfig:
    topo = d["topology"]
    topology = TopologyConfig(
        name=topo["name"],
        services={k: ServiceConfig(**v) for k, v in topo["services"].items()},
        edges=[tuple(e) for e in topo["edges"]],
        combine=dict(topo.get("combine", {})),
        channels={k: ChannelConfig(**v) for k, v in topo.get("channels", {}).items()},
        entry_caller=topo.get("entry_caller", "client"),
    )
    metrics = d.get("metrics", {})
    return ExperimentConfig(
        topology=topology,
        workload=WorkloadConfig(**d.get("workload", {})),
        qos=_qos_from_dict(d.get("qos", {})),
        sim=SimTuning(**d.get("sim", {})),
        model=_model_from_dict(d.get("model", {})),
        metrics=MetricsConfig(
            service=tuple(metrics.get("service", DEFAULT_SERVICE_METRICS)),
            channel=tuple(metrics.get("channel", DEFAULT_CHANNEL_METRICS)),
        ),
        seed=int(d.get("seed", 0)),
    )


def _qos_from_dict(d: dict) -> QosConfig:
    return QosConfig(
        target_p99_us=float(d.get("target_p99_us", 0.0)),
        percentiles=tuple(d.get("percentiles", (50, 95))),
    )


def _model_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    return ModelConfig(**d)


def load_experiment(path: str | Path) -> ExperimentConfig:
    with open(path) as fh:
        return experiment_from_dict(yaml.safe_load(fh))


def save_experiment(cfg: ExperimentConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(experiment_to_dict(cfg), fh, sort_keys=False)


def schedule_to_dict(s: Schedule) -> dict:
    return {
        "loads": s.loads if isinstance(s.loads, (int, float)) else list(s.loads),
        "injections": [dataclasses.asdict(i) for i in s.injections],
    }


def schedule_from_dict(d: dict) -> Schedule:
    sched = Schedule(
        loads=d.get("loads", 100.0),
        injections=[InjectionSpec(**i) for i in d.get("injections", [])],
    )
    for inj in sched.injections:
        inj.validate()
    return sched


def load_schedule(path: str | Path) -> Schedule:
    with open(path) as fh:
        return schedule_from_dict(yaml.safe_load(fh))


def save_schedule(s: Schedule, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(schedule_to_dict(s), fh, sort_keys=False)
