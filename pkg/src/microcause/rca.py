"""Two-level counterfactual root cause analysis.

Level one replaces all of a service's metrics (including its inbound
channel metrics) with their normal values and asks how likely the frontend
tail would have met its target under that intervention; services clearing
the probability threshold are culprits, ranked by probability.  Level two
repeats the query one metric at a time inside each culprit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataset import NormalValues, WindowSample
from .gvae import GvaeModel, counterfactual_probability


class QosMetError(ValueError):
    """Diagnosis was asked for a window that meets its target."""


@dataclass
class RcaConfig:
    tau: float = 0.9                    # probability threshold for naming a culprit
    n_counterfactual_samples: int = 100
    max_culprits: int = 3

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must be in (0, 1)")


@dataclass
class MetricFinding:
    metric: str
    probability: float
    low_confidence: bool = False


@dataclass
class Culprit:
    service: str
    probability: float
    metrics: list[MetricFinding] = field(default_factory=list)


@dataclass
class RootCauseReport:
    window_index: int
    baseline_probability: float
    culprits: list[Culprit]
    no_single_culprit: bool
    qos_target_us: float
    tau: float

    def to_dict(self) -> dict:
        return {
            "window_index": self.window_index,
            "baseline_probability": self.baseline_probability,
            "qos_target_us": self.qos_target_us,
            "tau": self.tau,
            "no_single_culprit": self.no_single_culprit,
            "culprits": [
                {
                    "service": c.service,
                    "probability": c.probability,
                    "metrics": [
                        {"metric": m.metric, "probability": m.probability,
                         "low_confidence": m.low_confidence}
                        for m in c.metrics
                    ],
                }
                for c in self.culprits
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def render_text(self) -> str:
        lines = [
            f"window {self.window_index}: "
            f"P(meet {self.qos_target_us:.0f}us | no intervention) = "
            f"{self.baseline_probability:.2f}"
        ]
        if not self.culprits:
            lines.append("  no single-service culprit cleared the threshold"
                         if self.no_single_culprit else "  no culprits")
        for rank, c in enumerate(self.culprits, 1):
            lines.append(f"  #{rank} {c.service}  P={c.probability:.2f}")
            for m in c.metrics:
                note = "  (low confidence)" if m.low_confidence else ""
                lines.append(f"       {m.metric}  P={m.probability:.2f}{note}")
        return "\n".join(lines)


def service_override_names(model: GvaeModel, service: str) -> tuple[str, ...]:
    """All X features the service-level intervention replaces."""
    return model.schema.service_x_names(model.cbn, service)


def _override_value(normals: NormalValues, name: str) -> float:
    _, owner_kind, owner, metric = name.split(":")
    return normals.get(owner_kind, owner, metric)


def _probe_seeds(rng: np.random.Generator, n: int) -> list[int]:
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=n)]


def diagnose_services(model: GvaeModel, sample: WindowSample, normals: NormalValues,
                      qos_target_us: float, cfg: RcaConfig,
                      rng: np.random.Generator) -> list[tuple[str, float]]:
    """Rank services by the counterfactual probability of their normal-value fix."""
    if sample.qos_met:
        raise QosMetError(f"window {sample.window_index} meets its target")
    services = list(model.decode_order())
    seeds = _probe_seeds(rng, len(services))
    scored = []
    for service, seed in zip(services, seeds):
        overrides = {
            name: _override_value(normals, name)
            for name in service_override_names(model, service)
        }
        p = counterfactual_probability(model, sample, overrides, qos_target_us,
                                       cfg.n_counterfactual_samples,
                                       np.random.default_rng(seed))
        scored.append((service, p))
    hits = [(s, p) for s, p in scored if p > cfg.tau]
    hits.sort(key=lambda it: (-it[1], it[0]))
    return hits


def diagnose_metrics(model: GvaeModel, sample: WindowSample, culprit_service: str,
                     normals: NormalValues, qos_target_us: float, cfg: RcaConfig,
                     rng: np.random.Generator) -> list[MetricFinding]:
    """Rank the culprit's metrics by single-metric counterfactuals.

    If nothing clears the threshold the best metric is returned alone,
    flagged low-confidence.
    """
    names = service_override_names(model, culprit_service)
    seeds = _probe_seeds(rng, len(names))
    scored = []
    for name, seed in zip(names, seeds):
        p = counterfactual_probability(model, sample,
                                       {name: _override_value(normals, name)},
                                       qos_target_us, cfg.n_counterfactual_samples,
                                       np.random.default_rng(seed))
        scored.append((name, p))
    scored.sort(key=lambda it: (-it[1], it[0]))
    hits = [MetricFinding(metric=n, probability=p) for n, p in scored if p > cfg.tau]
    if hits:
        return hits
    best = scored[0]
    return [MetricFinding(metric=best[0], probability=best[1], low_confidence=True)]


def diagnose(model: GvaeModel, sample: WindowSample, normals: NormalValues,
             qos_target_us: float, cfg: RcaConfig, rng: np.random.Generator,
             force: bool = False) -> RootCauseReport:
    """Full two-level report for one violating window.

    ``force`` permits diagnosing a window that meets its target, e.g. for
    sanity checks; such reports typically carry a baseline near 1 and no
    culprits.
    """
    if sample.qos_met and not force:
        raise QosMetError(f"window {sample.window_index} meets its target")
    baseline_seed = int(rng.integers(0, 2**63 - 1))
    baseline = counterfactual_probability(model, sample, {}, qos_target_us,
                                          cfg.n_counterfactual_samples,
                                          np.random.default_rng(baseline_seed))
    if sample.qos_met:
        ranked: list[tuple[str, float]] = []
    else:
        ranked = diagnose_services(model, sample, normals, qos_target_us, cfg, rng)
    culprits = []
    for service, p in ranked[:cfg.max_culprits]:
        metrics = diagnose_metrics(model, sample, service, normals, qos_target_us,
                                   cfg, rng)
        culprits.append(Culprit(service=service, probability=p, metrics=metrics))
    return RootCauseReport(
        window_index=sample.window_index,
        baseline_probability=baseline,
        culprits=culprits,
        no_single_culprit=not culprits and not sample.qos_met,
        qos_target_us=qos_target_us,
        tau=cfg.tau,
    )


def majority_culprit(reports: list[RootCauseReport]) -> str | None:
    """Per-window majority vote over an episode's top culprits."""
    votes: dict[str, int] = {}
    for r in reports:
        if r.culprits:
            top = r.culprits[0].service
            votes[top] = votes.get(top, 0) + 1
    if not votes:
        return None
    return max(sorted(votes), key=lambda s: votes[s])
