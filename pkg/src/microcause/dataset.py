"""Turn raw spans and metrics into aligned per-window training samples.

A window sample holds, per RPC, the (y_c, y_s, y_req, y_resp) tuple at each
configured percentile, plus the metric vector of every service and channel,
the frontend p99, and the QoS verdict.  Feature ordering is part of the
on-disk contract: the schema file written next to a dataset or checkpoint
is authoritative.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .simulator import WindowTrace
from .topology import Cbn, MetricSchema, RpcGraph, Span, Y_VARS, build_cbn, resolve_traces


class EmptyWindowError(ValueError):
    pass


class InsufficientBaselineError(ValueError):
    pass


class UnknownFeatureError(KeyError):
    pass


def nearest_rank(values, pct: float) -> float:
    """Smallest element with more than pct percent of the sample at or below it.

    This is the exclusive nearest-rank: rank = floor(pct/100 * n) + 1,
    clamped to n.  For 100 values 1..100, p99 is 100.
    """
    v = np.sort(np.asarray(values))
    n = v.size
    if n == 0:
        raise EmptyWindowError("percentile of an empty sample")
    rank = min(n, math.floor(pct / 100.0 * n) + 1)
    return float(v[rank - 1])


@dataclass
class WindowSample:
    window_index: int
    y: dict                     # rpc -> var -> {pct: value_us}
    x: dict                     # {"services": {...}, "channels": {...}}
    e2e_p99_us: float
    qos_met: bool
    offered_load_rps: float = 0.0

    def to_dict(self) -> dict:
        return {
            "window_index": self.window_index,
            "y": self.y,
            "x": self.x,
            "e2e_p99_us": self.e2e_p99_us,
            "qos_met": self.qos_met,
            "offered_load_rps": self.offered_load_rps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WindowSample":
        y = {r: {v: {int(p): val for p, val in pcts.items()} for v, pcts in vars_.items()}
             for r, vars_ in d["y"].items()}
        return cls(window_index=int(d["window_index"]), y=y, x=d["x"],
                   e2e_p99_us=float(d["e2e_p99_us"]), qos_met=bool(d["qos_met"]),
                   offered_load_rps=float(d.get("offered_load_rps", 0.0)))


def aggregate(trace: WindowTrace, root_rpc: str, qos_target_us: float,
              percentiles: tuple[int, ...] = (50, 95),
              net_delay_mode: str = "timestamps") -> WindowSample:
    """Collapse one window of spans and metrics into an aligned sample.

    ``net_delay_mode`` picks how per-direction network delays are read:
    "timestamps" recovers them from the client/server span offsets,
    "split_residual" assigns (y_c - y_s) / 2 to each direction.
    """
    if not trace.spans:
        raise EmptyWindowError(f"window {trace.window_index} has no spans")
    views = resolve_traces(trace.spans)
    per_rpc: dict[str, dict[str, list[float]]] = {}
    e2e: list[float] = []
    for view in views:
        for template, (c, s) in view.pairs.items():
            y_c = float(c.duration_us)
            y_s = float(s.duration_us)
            if net_delay_mode == "timestamps":
                y_req = float(s.start_us - c.start_us)
                y_resp = float((c.start_us + c.duration_us) - (s.start_us + s.duration_us))
            else:
                y_req = y_resp = (y_c - y_s) / 2.0
            bucket = per_rpc.setdefault(template, {v: [] for v in Y_VARS})
            bucket["y_c"].append(y_c)
            bucket["y_s"].append(y_s)
            bucket["y_req"].append(y_req)
            bucket["y_resp"].append(y_resp)
            if template == root_rpc:
                e2e.append(y_c)
    if not e2e:
        raise EmptyWindowError(f"window {trace.window_index} has no frontend requests")
    y = {
        rpc: {var: {p: nearest_rank(vals[var], p) for p in percentiles} for var in Y_VARS}
        for rpc, vals in per_rpc.items()
    }
    p99 = nearest_rank(e2e, 99)
    return WindowSample(window_index=trace.window_index, y=y, x=trace.metrics,
                        e2e_p99_us=p99, qos_met=p99 <= qos_target_us,
                        offered_load_rps=trace.offered_load_rps)


def aggregate_from_truth(trace: WindowTrace, root_rpc: str, qos_target_us: float,
                         percentiles: tuple[int, ...] = (50, 95)) -> WindowSample:
    """Fast path over the simulator's per-request arrays, skipping span objects."""
    if not trace.truth:
        raise EmptyWindowError(f"window {trace.window_index} carries no request arrays")
    y = {
        rpc: {var: {p: nearest_rank(arrays[var], p) for p in percentiles} for var in Y_VARS}
        for rpc, arrays in trace.truth.items()
    }
    p99 = nearest_rank(trace.truth[root_rpc]["y_c"], 99)
    return WindowSample(window_index=trace.window_index, y=y, x=trace.metrics,
                        e2e_p99_us=p99, qos_met=p99 <= qos_target_us,
                        offered_load_rps=trace.offered_load_rps)


# ---------------------------------------------------------------------------
# normal values

@dataclass
class NormalValues:
    """Per-metric medians over QoS-met windows; the intervention targets."""

    services: dict              # service -> metric -> median
    channels: dict              # channel -> metric -> median
    normal_load_rps: float = 0.0

    def get(self, owner_kind: str, owner: str, metric: str) -> float:
        table = self.services if owner_kind == "svc" else self.channels
        try:
            return table[owner][metric]
        except KeyError as exc:
            raise InsufficientBaselineError(
                f"no normal value for {owner_kind}:{owner}:{metric}") from exc

    def to_dict(self) -> dict:
        return {"services": self.services, "channels": self.channels,
                "normal_load_rps": self.normal_load_rps}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalValues":
        return cls(services=d["services"], channels=d["channels"],
                   normal_load_rps=float(d.get("normal_load_rps", 0.0)))


def compute_normal_values(samples: list[WindowSample]) -> NormalValues:
    met = [s for s in samples if s.qos_met]
    if not met:
        raise InsufficientBaselineError("no QoS-met windows to take medians over")
    services: dict[str, dict[str, float]] = {}
    channels: dict[str, dict[str, float]] = {}
    for owner_key, table in (("services", services), ("channels", channels)):
        owners = met[0].x[owner_key].keys()
        for owner in owners:
            table[owner] = {
                metric: float(np.median([s.x[owner_key][owner][metric] for s in met]))
                for metric in met[0].x[owner_key][owner]
            }
    return NormalValues(services=services, channels=channels,
                        normal_load_rps=float(np.median([s.offered_load_rps for s in met])))


# ---------------------------------------------------------------------------
# class balance and replay

def balance(samples: list[WindowSample], rng: np.random.Generator,
            floor: float = 0.5) -> tuple[list[WindowSample], bool]:
    """Oversample the minority QoS class until minority >= floor * majority.

    All original samples are retained.  Single-class input is returned
    unchanged with the warning flag set.
    """
    met = [s for s in samples if s.qos_met]
    violated = [s for s in samples if not s.qos_met]
    if not met or not violated:
        return list(samples), True
    minority, majority = (met, violated) if len(met) < len(violated) else (violated, met)
    need = math.ceil(floor * len(majority)) - len(minority)
    out = list(samples)
    if need > 0:
        picks = rng.integers(0, len(minority), size=need)
        out.extend(minority[i] for i in picks)
    return out, False


def interleave_replay(current: list, previous: list, replay_fraction: float,
                      batch_size: int, rng: np.random.Generator):
    """Yield batches mixing fresh data with uniform draws from previous data.

    Every batch carries ceil(replay_fraction * batch_size) replay samples
    when previous data exists; order is deterministic for a given rng.
    """
    if not 0.0 <= replay_fraction < 1.0:
        raise ValueError("replay_fraction must be in [0, 1)")
    n_replay = math.ceil(replay_fraction * batch_size) if previous else 0
    n_current = max(1, batch_size - n_replay)
    order = rng.permutation(len(current))
    for lo in range(0, len(current), n_current):
        batch = [current[i] for i in order[lo:lo + n_current]]
        if n_replay:
            picks = rng.integers(0, len(previous), size=n_replay)
            batch.extend(previous[i] for i in picks)
        yield batch


# ---------------------------------------------------------------------------
# feature schema and standardization

@dataclass(frozen=True)
class FeatureSchema:
    """Canonical feature ordering derived from the causal graph.

    Y features: "y:<rpc>:<var>:p<pct>" ordered by rpc id, variable, then
    percentile.  X features: "x:svc:<service>:<metric>" then
    "x:ch:<channel>:<metric>", owners sorted.
    """

    y_names: tuple[str, ...]
    x_names: tuple[str, ...]
    percentiles: tuple[int, ...]

    @classmethod
    def from_cbn(cls, cbn: Cbn, percentiles: tuple[int, ...]) -> "FeatureSchema":
        y_names = [
            f"y:{r.rpc_id}:{var}:p{p}"
            for r in sorted(cbn.graph.rpcs, key=lambda r: r.rpc_id)
            for var in Y_VARS
            for p in percentiles
        ]
        x_names = [
            f"x:svc:{s}:{m}"
            for s in sorted(cbn.schema.service_metrics)
            for m in cbn.schema.service_metrics[s]
        ]
        x_names += [
            f"x:ch:{cid}:{m}"
            for cid in cbn.graph.channel_ids()
            for m in cbn.schema.channel_metrics
        ]
        return cls(y_names=tuple(y_names), x_names=tuple(x_names),
                   percentiles=tuple(percentiles))

    def __post_init__(self) -> None:
        object.__setattr__(self, "_y_pos", {n: i for i, n in enumerate(self.y_names)})
        object.__setattr__(self, "_x_pos", {n: i for i, n in enumerate(self.x_names)})

    def y_index(self, rpc: str, var: str, pct: int) -> int:
        return self._y_pos[f"y:{rpc}:{var}:p{pct}"]

    def x_index(self, name: str) -> int:
        try:
            return self._x_pos[name]
        except KeyError as exc:
            raise UnknownFeatureError(name) from exc

    def y_vector(self, sample: WindowSample) -> np.ndarray:
        out = np.empty(len(self.y_names))
        for i, name in enumerate(self.y_names):
            _, rpc, var, p = name.split(":")
            out[i] = sample.y[rpc][var][int(p[1:])]
        return out

    def x_vector(self, sample: WindowSample) -> np.ndarray:
        out = np.empty(len(self.x_names))
        for i, name in enumerate(self.x_names):
            _, owner_kind, owner, metric = name.split(":")
            table = sample.x["services"] if owner_kind == "svc" else sample.x["channels"]
            out[i] = table[owner][metric]
        return out

    def matrices(self, samples: list[WindowSample]) -> tuple[np.ndarray, np.ndarray]:
        Y = np.stack([self.y_vector(s) for s in samples])
        X = np.stack([self.x_vector(s) for s in samples])
        return Y, X

    def service_x_names(self, cbn: Cbn, service: str) -> tuple[str, ...]:
        names = [f"x:svc:{service}:{m}" for m in cbn.service_metric_names(service)]
        names += [f"x:ch:{cid}:{m}" for cid in cbn.channels_into(service)
                  for m in cbn.schema.channel_metrics]
        return tuple(names)

    def unit_y_names(self, cbn: Cbn, service: str) -> tuple[str, ...]:
        return tuple(
            f"y:{rid}:{var}:p{p}"
            for rid in cbn.inbound_rpcs(service)
            for var in Y_VARS
            for p in self.percentiles
        )

    def child_y_names(self, cbn: Cbn, service: str) -> tuple[str, ...]:
        return tuple(
            f"y:{rid}:{var}:p{p}"
            for rid in cbn.child_rpcs(service)
            for var in Y_VARS
            for p in self.percentiles
        )

    def to_dict(self) -> dict:
        return {"y_names": list(self.y_names), "x_names": list(self.x_names),
                "percentiles": list(self.percentiles)}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        return cls(y_names=tuple(d["y_names"]), x_names=tuple(d["x_names"]),
                   percentiles=tuple(d["percentiles"]))


@dataclass
class Normalizer:
    """Per-feature standardization fitted on the training split.

    Zero-variance features are carried through untransformed and flagged.
    """

    names: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    passthrough: np.ndarray     # bool per feature

    @classmethod
    def fit(cls, matrix: np.ndarray, names: tuple[str, ...]) -> "Normalizer":
        mean = matrix.mean(axis=0)
        std = matrix.std(axis=0)
        passthrough = std <= 1e-12
        mean = np.where(passthrough, 0.0, mean)
        std = np.where(passthrough, 1.0, std)
        return cls(names=tuple(names), mean=mean, std=std, passthrough=passthrough)

    def apply(self, matrix: np.ndarray) -> np.ndarray:
        return (matrix - self.mean) / self.std

    def invert(self, matrix: np.ndarray) -> np.ndarray:
        return matrix * self.std + self.mean

    def slice(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.mean[indices], self.std[indices]

    def extend(self, new_names: tuple[str, ...]) -> "Normalizer":
        """Reindex to a new feature list; unseen features pass through flagged."""
        pos = {n: i for i, n in enumerate(self.names)}
        mean = np.zeros(len(new_names))
        std = np.ones(len(new_names))
        passthrough = np.ones(len(new_names), dtype=bool)
        for i, n in enumerate(new_names):
            if n in pos:
                j = pos[n]
                mean[i], std[i] = self.mean[j], self.std[j]
                passthrough[i] = self.passthrough[j]
        return Normalizer(names=tuple(new_names), mean=mean, std=std,
                          passthrough=passthrough)

    def to_dict(self) -> dict:
        return {"names": list(self.names), "mean": self.mean.tolist(),
                "std": self.std.tolist(), "passthrough": self.passthrough.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Normalizer":
        return cls(names=tuple(d["names"]), mean=np.array(d["mean"]),
                   std=np.array(d["std"]),
                   passthrough=np.array(d["passthrough"], dtype=bool))


@dataclass
class PairedNormalizer:
    """Separate normalizers for the Y block and the X block of a sample."""

    y: Normalizer
    x: Normalizer

    @classmethod
    def fit(cls, schema: FeatureSchema, samples: list[WindowSample]) -> "PairedNormalizer":
        Y, X = schema.matrices(samples)
        return cls(y=Normalizer.fit(Y, schema.y_names), x=Normalizer.fit(X, schema.x_names))

    def to_dict(self) -> dict:
        return {"y": self.y.to_dict(), "x": self.x.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "PairedNormalizer":
        return cls(y=Normalizer.from_dict(d["y"]), x=Normalizer.from_dict(d["x"]))


# ---------------------------------------------------------------------------
# on-disk dataset

@dataclass
class DatasetDir:
    """A persisted dataset: samples, schema, normalizer, normals, graph, meta."""

    samples: list[WindowSample]
    schema: FeatureSchema
    normalizer: PairedNormalizer
    normals: NormalValues
    cbn: Cbn
    meta: dict
    labels: list | None = None


def save_dataset(path: str | Path, ds: DatasetDir) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    with open(path / "samples.jsonl", "w") as fh:
        for s in ds.samples:
            fh.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    _dump(path / "schema.json", ds.schema.to_dict())
    _dump(path / "normalizer.json", ds.normalizer.to_dict())
    _dump(path / "normal_values.json", ds.normals.to_dict())
    _dump(path / "cbn.json", {"graph": ds.cbn.graph.to_dict(),
                              "metric_schema": ds.cbn.schema.to_dict()})
    _dump(path / "meta.json", ds.meta)
    if ds.labels is not None:
        with open(path / "labels.jsonl", "w") as fh:
            for w, label in enumerate(ds.labels):
                fh.write(json.dumps({"window_index": w,
                                     "injections": [list(x) for x in label]}) + "\n")


def load_dataset(path: str | Path) -> DatasetDir:
    path = Path(path)
    samples = []
    with open(path / "samples.jsonl") as fh:
        for line in fh:
            samples.append(WindowSample.from_dict(json.loads(line)))
    cbn_d = _load(path / "cbn.json")
    cbn = build_cbn(RpcGraph.from_dict(cbn_d["graph"]),
                    MetricSchema.from_dict(cbn_d["metric_schema"]))
    labels = None
    if (path / "labels.jsonl").exists():
        labels = []
        with open(path / "labels.jsonl") as fh:
            for line in fh:
                rec = json.loads(line)
                labels.append([tuple(x) for x in rec["injections"]])
    return DatasetDir(
        samples=samples,
        schema=FeatureSchema.from_dict(_load(path / "schema.json")),
        normalizer=PairedNormalizer.from_dict(_load(path / "normalizer.json")),
        normals=NormalValues.from_dict(_load(path / "normal_values.json")),
        cbn=cbn,
        meta=_load(path / "meta.json"),
        labels=labels,
    )


def _dump(path: Path, obj: dict) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)


def _load(path: Path) -> dict:
    with open(path) as fh:
        return json.load(fh)
