"""Map diagnosed root causes to corrective actions and close the loop.

Every metric class has a local-first escalation ladder; the ladder index
for a given (service, metric class) never decreases within a violation
episode.  Rate limiting of collocated interference is prepended when the
diagnosed metric is far above its normal value while the offered load is
flat -- the signature of an external interferer rather than organic load.
One action per window, with a one-window cooldown so effects register
before the next decision.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .config import Schedule
from .dataset import NormalValues, WindowSample, aggregate_from_truth
from .gvae import GvaeModel
from .rca import RcaConfig, RootCauseReport, diagnose
from .simulator import Action, CapExceededError, ClusterState, apply_action, step_window


class NoActionError(ValueError):
    """The report names no culprit to act on."""


METRIC_CLASS = {
    "cpu_util": "cpu",
    "mem_util": "memory",
    "disk_util": "disk_io",
    "net_util": "network",
    "rtt_us": "network",
    "cache_pressure": "cache",
}

LADDERS = {
    "cpu": ("cpu_freq_boost", "scale_up_cpu", "scale_out", "migrate"),
    "memory": ("scale_up_mem", "scale_out", "migrate"),
    "disk_io": ("scale_up_disk", "scale_out", "migrate"),
    "network": ("net_partition", "scale_out", "migrate"),
    "cache": ("cache_partition", "scale_out", "migrate"),
}

INTERFERENCE_EXCESS = 0.15      # metric must exceed normal by this much
FLAT_LOAD_TOLERANCE = 0.15      # relative deviation from the normal load


def metric_class(feature_name: str) -> str:
    metric = feature_name.rsplit(":", 1)[-1]
    try:
        return METRIC_CLASS[metric]
    except KeyError as exc:
        raise NoActionError(f"no action mapping for metric {metric!r}") from exc


@dataclass
class ActuationContext:
    """Observables the selector may consult beyond the report itself."""

    normals: NormalValues | None = None
    offered_load_rps: float = 0.0
    observed_metric_value: float | None = None


def _interference_signature(report_metric: str, ctx: ActuationContext | None) -> bool:
    if ctx is None or ctx.normals is None or ctx.normals.normal_load_rps <= 0:
        return False
    load_flat = (abs(ctx.offered_load_rps - ctx.normals.normal_load_rps)
                 <= FLAT_LOAD_TOLERANCE * ctx.normals.normal_load_rps)
    if not load_flat or ctx.observed_metric_value is None:
        return False
    _, owner_kind, owner, metric = report_metric.split(":")
    try:
        normal = ctx.normals.get(owner_kind, owner, metric)
    except Exception:
        return False
    return ctx.observed_metric_value >= normal + INTERFERENCE_EXCESS


def ladder_for(report_metric: str, ctx: ActuationContext | None = None) -> tuple[str, ...]:
    cls = metric_class(report_metric)
    ladder = LADDERS[cls]
    if _interference_signature(report_metric, ctx):
        ladder = ("rate_limit_interference",) + ladder
    return ladder


DEFAULT_MAGNITUDE = {
    "cpu_freq_boost": 0.1, "scale_up_cpu": 0.5, "scale_up_mem": 0.5,
    "scale_up_disk": 0.5, "scale_out": 1.0, "rate_limit_interference": 0.5,
    "cache_partition": 1.0, "net_partition": 0.5, "migrate": 1.0,
}


def select_action(report: RootCauseReport, cluster: ClusterState,
                  ctx: ActuationContext | None = None, rung: int = 0) -> Action:
    """Deterministic culprit-metric -> action mapping at the given ladder rung."""
    if not report.culprits:
        raise NoActionError("report names no culprit")
    culprit = report.culprits[0]
    finding = culprit.metrics[0]
    ladder = ladder_for(finding.metric, ctx)
    rung = min(rung, len(ladder) - 1)
    kind = ladder[rung]
    resource = metric_class(finding.metric) if kind == "rate_limit_interference" else None
    return Action(service=culprit.service, kind=kind,
                  magnitude=DEFAULT_MAGNITUDE[kind], resource=resource)


@dataclass
class LoopRecord:
    window_index: int
    e2e_p99_us: float
    qos_met: bool
    diagnosis: RootCauseReport | None = None
    action: Action | None = None
    cap_signals: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "window_index": self.window_index,
            "e2e_p99_us": self.e2e_p99_us,
            "qos_met": self.qos_met,
            "diagnosis": self.diagnosis.to_dict() if self.diagnosis else None,
            "action": (
                {"service": self.action.service, "kind": self.action.kind,
                 "magnitude": self.action.magnitude, "resource": self.action.resource}
                if self.action else None
            ),
            "cap_signals": self.cap_signals,
        }


@dataclass
class EpisodeLog:
    records: list[LoopRecord] = field(default_factory=list)
    qos_target_us: float = 0.0

    @property
    def actions(self) -> list[Action]:
        return [r.action for r in self.records if r.action is not None]

    def first_diagnosis_window(self) -> int | None:
        for r in self.records:
            if r.diagnosis is not None:
                return r.window_index
        return None

    def recovered_within(self, budget: int) -> bool:
        """QoS restored within ``budget`` windows after the first diagnosis."""
        start = self.first_diagnosis_window()
        if start is None:
            return False
        for r in self.records:
            if start < r.window_index <= start + budget and r.qos_met:
                return True
        return False

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def control_loop(model: GvaeModel, cluster: ClusterState, schedule: Schedule,
                 normals: NormalValues, qos_target_us: float, cfg: RcaConfig,
                 rng: np.random.Generator, max_windows: int,
                 n_requests: int | None = None, cooldown_windows: int = 1,
                 force_culprit: tuple[str, str] | None = None,
                 act_baseline_ceiling: float = 0.35) -> EpisodeLog:
    """Observe, diagnose, actuate, repeat for ``max_windows`` windows.

    ``force_culprit`` = (service, metric feature name) bypasses diagnosis
    with a fixed verdict -- the misdiagnosis negative control.  The ladder
    rung for a (service, metric class) advances by one for every
    unrecovered window diagnosed with the same culprit, and resets once
    QoS is met again.

    A violating window is actuated only when its no-intervention baseline
    probability sits below ``act_baseline_ceiling``: a high baseline means
    the model considers the violation a transient of the healthy regime,
    and acting on it would chase noise.
    """
    from .simulator import install_schedule

    install_schedule(cluster, schedule)
    log = EpisodeLog(qos_target_us=qos_target_us)
    rungs: dict[tuple[str, str], int] = {}
    cooldown = 0
    for _ in range(max_windows):
        w = cluster.window_index
        trace = step_window(cluster, schedule.load_at(w), rng, n_requests=n_requests)
        sample = aggregate_from_truth(trace, cluster.graph.root_rpc, qos_target_us,
                                      model.schema.percentiles)
        record = LoopRecord(window_index=w, e2e_p99_us=sample.e2e_p99_us,
                            qos_met=sample.qos_met)
        if sample.qos_met:
            rungs.clear()
            cooldown = max(0, cooldown - 1)
            log.records.append(record)
            continue
        if cooldown > 0:
            cooldown -= 1
            log.records.append(record)
            continue

        if force_culprit is not None:
            from .rca import Culprit, MetricFinding
            service, metric = force_culprit
            report = RootCauseReport(
                window_index=w, baseline_probability=0.0,
                culprits=[Culprit(service=service, probability=1.0,
                                  metrics=[MetricFinding(metric=metric, probability=1.0)])],
                no_single_culprit=False, qos_target_us=qos_target_us, tau=cfg.tau)
        else:
            report = diagnose(model, sample, normals, qos_target_us, cfg, rng)
        record.diagnosis = report

        if report.baseline_probability > act_baseline_ceiling and force_culprit is None:
            log.records.append(record)   # transient: the healthy regime explains it
            continue
        if report.culprits:
            culprit = report.culprits[0]
            finding = culprit.metrics[0]
            _, owner_kind, owner, metric = finding.metric.split(":")
            observed = (sample.x["services" if owner_kind == "svc" else "channels"]
                        [owner][metric])
            ctx = ActuationContext(normals=normals,
                                   offered_load_rps=sample.offered_load_rps,
                                   observed_metric_value=float(observed))
            key = (culprit.service, metric_class(finding.metric))
            rung = rungs.get(key, 0)
            ladder = ladder_for(finding.metric, ctx)
            action = None
            while rung < len(ladder):
                candidate = select_action(report, cluster, ctx, rung)
                try:
                    apply_action(cluster, candidate)
                    action = candidate
                    break
                except CapExceededError as cap:
                    record.cap_signals.append(str(cap))
                    rung += 1
            rungs[key] = min(rung + 1, len(ladder) - 1)
            if action is not None:
                record.action = action
                cooldown = cooldown_windows
        log.records.append(record)
    return log
