"""Graph-structured conditional VAE over per-service latency variables.

One unit per serving service.  The encoder sees the service's observed
metrics, its own latency targets and its children's observed latencies and
produces a diagonal-Gaussian posterior over the latent; the prior network
conditions on the metrics alone; the decoder maps (metrics, latent,
decoded child latencies) to a Gaussian over the service's latency
features.  Decoders evaluate serially in decode order (leaves first) and
pass decoded means downstream; gradients stop at unit boundaries, so each
unit's loss updates only its own parameters.  That boundary is what makes
partial retraining exact: non-descendant units are provably untouched.

All features are standardized by the dataset normalizer; decode outputs
are mapped back to microseconds and floored at zero.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .dataset import (
    FeatureSchema,
    PairedNormalizer,
    UnknownFeatureError,
    WindowSample,
)
from .mlp import Adam, Mlp
from .topology import Cbn, GraphDelta, MetricSchema, RpcGraph, build_cbn, descendants

LOG_2PI = math.log(2.0 * math.pi)

Z_MODES = ("prior_sample", "posterior_mean", "posterior_sample")


class NumericFailureError(RuntimeError):
    def __init__(self, unit: str, detail: str = ""):
        super().__init__(f"non-finite values in unit {unit!r} {detail}".rstrip())
        self.unit = unit


class CheckpointError(RuntimeError):
    pass


class ReshapeConsistencyError(RuntimeError):
    pass


@dataclass
class CvaeUnit:
    """Encoder, prior network and decoder for one service."""

    service: str
    x_names: tuple[str, ...]
    y_names: tuple[str, ...]
    child_names: tuple[str, ...]
    latent_dim: int
    encoder: Mlp
    prior_net: Mlp
    decoder: Mlp
    logvar_clamp: float = 8.0
    # index arrays into the schema-wide X and Y feature spaces
    x_idx: np.ndarray | None = None
    y_idx: np.ndarray | None = None
    child_idx: np.ndarray | None = None

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.prior_net.params() + self.decoder.params()

    def param_count(self) -> int:
        return sum(p.size for p in self.params())

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for p in self.params():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
        return h.hexdigest()

    def _clamp(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        c = self.logvar_clamp
        return np.clip(raw, -c, c), (np.abs(raw) < c)


def _build_unit(service: str, x_names, y_names, child_names, hyper: ModelConfig,
                rng: np.random.Generator) -> CvaeUnit:
    dx, dy, dc, L = len(x_names), len(y_names), len(child_names), hyper.latent_dim
    hidden = list(hyper.hidden)
    enc = Mlp([dx + dy + dc, *hidden, 2 * L], hyper.activation, rng)
    prior = Mlp([dx, *hidden, 2 * L], hyper.activation, rng)
    dec = Mlp([dx + L + dc, *hidden, 2 * dy], hyper.activation, rng)
    return CvaeUnit(service=service, x_names=tuple(x_names), y_names=tuple(y_names),
                    child_names=tuple(child_names), latent_dim=L, encoder=enc,
                    prior_net=prior, decoder=dec, logvar_clamp=hyper.logvar_clamp)


@dataclass
class GvaeModel:
    cbn: Cbn
    schema: FeatureSchema
    normalizer: PairedNormalizer
    hyper: ModelConfig
    units: dict                 # service -> CvaeUnit, iterated in decode order
    version: int = 0

    @property
    def cbn_hash(self) -> str:
        return self.cbn.cbn_hash()

    def decode_order(self) -> tuple[str, ...]:
        return self.cbn.decode_order

    def param_count(self) -> int:
        return sum(u.param_count() for u in self.units.values())

    def param_hashes(self) -> dict:
        return {s: u.param_hash() for s, u in self.units.items()}


def _unit_indices(schema: FeatureSchema, cbn: Cbn, service: str):
    x_names = schema.service_x_names(cbn, service)
    y_names = schema.unit_y_names(cbn, service)
    child_names = schema.child_y_names(cbn, service)
    x_idx = np.array([schema.x_index(n) for n in x_names], dtype=int)
    y_pos = {n: i for i, n in enumerate(schema.y_names)}
    y_idx = np.array([y_pos[n] for n in y_names], dtype=int)
    child_idx = np.array([y_pos[n] for n in child_names], dtype=int)
    return x_names, y_names, child_names, x_idx, y_idx, child_idx


def init_gvae(cbn: Cbn, schema: FeatureSchema, normalizer: PairedNormalizer,
              hyper: ModelConfig, rng: np.random.Generator) -> GvaeModel:
    """One unit per serving service, deterministic for a given generator state."""
    units: dict[str, CvaeUnit] = {}
    for service in cbn.decode_order:
        x_names, y_names, child_names, x_idx, y_idx, child_idx = _unit_indices(
            schema, cbn, service)
        unit = _build_unit(service, x_names, y_names, child_names, hyper, rng)
        unit.x_idx, unit.y_idx, unit.child_idx = x_idx, y_idx, child_idx
        units[service] = unit
    return GvaeModel(cbn=cbn, schema=schema, normalizer=normalizer, hyper=hyper,
                     units=units)


# ---------------------------------------------------------------------------
# loss and gradients

def elbo_loss(unit: CvaeUnit, x: np.ndarray, y: np.ndarray, enc_child: np.ndarray,
              dec_child: np.ndarray, noise: np.ndarray, beta: float):
    """Negative ELBO for one unit plus gradients for its parameters only.

    Reconstruction is the Gaussian negative log-likelihood of the decoder;
    the KL term compares the encoder posterior against the conditional
    prior, both diagonal Gaussians.  Child inputs are treated as constants:
    no gradient crosses the unit boundary.

    Returns (loss, parts, grads, mu_y) where parts = (recon, kl) and grads
    maps network name to per-layer gradients.
    """
    B = x.shape[0]
    enc_in = np.concatenate([x, y, enc_child], axis=1)
    enc_out, enc_cache = unit.encoder.forward(enc_in)
    L = unit.latent_dim
    mu_q = enc_out[:, :L]
    lv_q, mask_q = unit._clamp(enc_out[:, L:])

    prior_out, prior_cache = unit.prior_net.forward(x)
    mu_p = prior_out[:, :L]
    lv_p, mask_p = unit._clamp(prior_out[:, L:])

    sigma_q = np.exp(0.5 * lv_q)
    z = mu_q + sigma_q * noise

    dec_in = np.concatenate([x, z, dec_child], axis=1)
    dec_out, dec_cache = unit.decoder.forward(dec_in)
    dy = len(unit.y_names)
    mu_y = dec_out[:, :dy]
    lv_y, mask_y = unit._clamp(dec_out[:, dy:])

    if not (np.isfinite(dec_out).all() and np.isfinite(enc_out).all()
            and np.isfinite(prior_out).all()):
        raise NumericFailureError(unit.service)

    inv_vy = np.exp(-lv_y)
    resid = y - mu_y
    recon = float(0.5 * np.mean(np.sum(LOG_2PI + lv_y + resid * resid * inv_vy, axis=1)))
    inv_vp = np.exp(-lv_p)
    dmu = mu_q - mu_p
    kl = float(0.5 * np.mean(np.sum(lv_p - lv_q + (np.exp(lv_q) + dmu * dmu) * inv_vp - 1.0,
                                    axis=1)))
    loss = recon + beta * kl

    # reconstruction backward
    dmu_y = -resid * inv_vy / B
    dlv_y = 0.5 * (1.0 - resid * resid * inv_vy) / B
    dec_grads, ddec_in = unit.decoder.backward(
        dec_cache, np.concatenate([dmu_y, dlv_y * mask_y], axis=1))
    dz = ddec_in[:, x.shape[1]:x.shape[1] + L]

    # reparameterization + KL backward
    dmu_q = dz + beta / B * dmu * inv_vp
    dlv_q = dz * noise * 0.5 * sigma_q + beta / B * 0.5 * (np.exp(lv_q) * inv_vp - 1.0)
    dmu_p = -beta / B * dmu * inv_vp
    dlv_p = beta / B * 0.5 * (1.0 - (np.exp(lv_q) + dmu * dmu) * inv_vp)

    enc_grads, _ = unit.encoder.backward(
        enc_cache, np.concatenate([dmu_q, dlv_q * mask_q], axis=1))
    prior_grads, _ = unit.prior_net.backward(
        prior_cache, np.concatenate([dmu_p, dlv_p * mask_p], axis=1))

    grads = {"encoder": enc_grads, "prior_net": prior_grads, "decoder": dec_grads}
    return loss, (recon, kl), grads, mu_y


# ---------------------------------------------------------------------------
# training

def _standardized_matrices(model: GvaeModel, samples: list[WindowSample]):
    Y, X = model.schema.matrices(samples)
    return model.normalizer.y.apply(Y), model.normalizer.x.apply(X)


def _cascade_decode_mean(model: GvaeModel, Y_std: np.ndarray, X_std: np.ndarray,
                         services) -> np.ndarray:
    """Posterior-mean decode of the given units over a whole matrix.

    Valid whenever ``services`` is closed under children (a unit's child
    units are all included or it has none).
    """
    decoded = np.zeros_like(Y_std)
    wanted = set(services)
    for service in model.decode_order():
        if service not in wanted:
            continue
        unit = model.units[service]
        x = X_std[:, unit.x_idx]
        enc_child = Y_std[:, unit.child_idx]
        enc_in = np.concatenate([x, Y_std[:, unit.y_idx], enc_child], axis=1)
        enc_out, _ = unit.encoder.forward(enc_in)
        mu_q = enc_out[:, :unit.latent_dim]
        dec_in = np.concatenate([x, mu_q, decoded[:, unit.child_idx]], axis=1)
        dec_out, _ = unit.decoder.forward(dec_in)
        decoded[:, unit.y_idx] = dec_out[:, :len(unit.y_names)]
    return decoded


def train(model: GvaeModel, samples: list[WindowSample], epochs: int,
          rng: np.random.Generator, update_services: set[str] | None = None,
          previous: list[WindowSample] | None = None,
          replay_fraction: float | None = None) -> list[dict]:
    """Mini-batch training; returns the per-epoch loss log.

    When ``update_services`` is given, only those units' parameters move;
    the rest are bit-identical afterwards.  Because the update set is
    always closed toward the frontend, frozen units' decoded means are
    constants and are precomputed once.
    """
    hyper = model.hyper
    order_all = model.decode_order()
    update = set(order_all) if update_services is None else set(update_services)
    unknown = update - set(order_all)
    if unknown:
        raise KeyError(f"unknown services {sorted(unknown)}")
    updated_order = [s for s in order_all if s in update]
    frozen = [s for s in order_all if s not in update]

    Y_std, X_std = _standardized_matrices(model, samples)
    n = len(samples)
    replay = hyper.replay_fraction if replay_fraction is None else replay_fraction
    prev_mats = None
    if previous:
        prev_mats = _standardized_matrices(model, previous)

    frozen_decoded = None
    if frozen:
        frozen_decoded = _cascade_decode_mean(model, Y_std, X_std, frozen)

    opts = {
        s: Adam(model.units[s].params(), lr=hyper.learning_rate,
                beta1=hyper.adam_beta1, beta2=hyper.adam_beta2, eps=hyper.adam_eps)
        for s in updated_order
    }

    log: list[dict] = []
    batch_size = hyper.batch_size
    for epoch in range(epochs):
        perm = rng.permutation(n)
        totals = {"loss": 0.0, "recon": 0.0, "kl": 0.0}
        per_unit = {s: 0.0 for s in updated_order}
        n_batches = 0
        for lo in range(0, n, batch_size):
            idx = perm[lo:lo + batch_size]
            Yb, Xb = Y_std[idx], X_std[idx]
            if prev_mats is not None and replay > 0.0:
                k = math.ceil(replay * len(idx))
                pick = rng.integers(0, prev_mats[0].shape[0], size=k)
                Yb = np.concatenate([Yb, prev_mats[0][pick]], axis=0)
                Xb = np.concatenate([Xb, prev_mats[1][pick]], axis=0)
            B = Yb.shape[0]
            decoded = (frozen_decoded[idx].copy() if frozen_decoded is not None
                       else np.zeros_like(Yb))
            if prev_mats is not None and replay > 0.0 and frozen_decoded is not None:
                raise NotImplementedError("replay with frozen units is not supported")
            for service in updated_order:
                unit = model.units[service]
                noise = rng.standard_normal((B, unit.latent_dim))
                try:
                    loss, (recon, kl), grads, mu_y = elbo_loss(
                        unit, Xb[:, unit.x_idx], Yb[:, unit.y_idx],
                        Yb[:, unit.child_idx], decoded[:, unit.child_idx],
                        noise, hyper.beta)
                except NumericFailureError as err:
                    raise NumericFailureError(
                        unit.service, f"(epoch {epoch}, batch {lo // batch_size})"
                    ) from err
                decoded[:, unit.y_idx] = mu_y
                flat = (unit.encoder.grads_flat(grads["encoder"])
                        + unit.prior_net.grads_flat(grads["prior_net"])
                        + unit.decoder.grads_flat(grads["decoder"]))
                opts[service].step(unit.params(), flat)
                totals["loss"] += loss
                totals["recon"] += recon
                totals["kl"] += kl
                per_unit[service] += loss
            n_batches += 1
        if n_batches:
            log.append({
                "epoch": epoch,
                "loss": totals["loss"] / n_batches,
                "recon": totals["recon"] / n_batches,
                "kl": totals["kl"] / n_batches,
                "per_unit": {s: v / n_batches for s, v in per_unit.items()},
            })
    return log


def partial_retrain(model: GvaeModel, changed_services: set[str],
                    samples: list[WindowSample], epochs: int,
                    rng: np.random.Generator) -> tuple[GvaeModel, list[dict]]:
    """Retrain only the changed services and everything downstream of them."""
    if not changed_services:
        raise KeyError("changed_services must be nonempty")
    affected = descendants(model.cbn, set(changed_services))
    update = affected & set(model.units)
    log = train(model, samples, epochs, rng, update_services=update)
    model.version += 1
    return model, log


# ---------------------------------------------------------------------------
# decoding and counterfactuals

@dataclass
class DecodeResult:
    y_us: np.ndarray            # (n_samples, n_y_features), de-standardized
    schema: FeatureSchema
    root_rpc: str

    def feature(self, rpc: str, var: str, pct: int) -> np.ndarray:
        return self.y_us[:, self.schema.y_index(rpc, var, pct)]

    def frontend_tail(self) -> np.ndarray:
        top = max(self.schema.percentiles)
        return self.feature(self.root_rpc, "y_c", top)


def forward_decode(model: GvaeModel, sample: WindowSample, z_mode: str = "posterior_mean",
                   overrides: dict | None = None, rng: np.random.Generator | None = None,
                   n_samples: int = 1) -> DecodeResult:
    """Decode every RPC's latency features for one window.

    ``overrides`` maps X feature names ("x:svc:s2:cpu_util", "x:ch:...")
    to raw metric values; they replace the observed values before the
    affected unit encodes and decodes.  Latents follow ``z_mode``; the
    posterior modes use the observed sample's latency targets.
    """
    if z_mode not in Z_MODES:
        raise ValueError(f"unknown z_mode {z_mode!r}")
    if z_mode != "posterior_mean" and rng is None:
        raise ValueError("sampling modes need a generator")

    x_raw = model.schema.x_vector(sample)
    for name, value in (overrides or {}).items():
        x_raw[model.schema.x_index(name)] = value
    x_std = model.normalizer.x.apply(x_raw[None, :])
    y_std = model.normalizer.y.apply(model.schema.y_vector(sample)[None, :])

    n = n_samples
    X = np.repeat(x_std, n, axis=0)
    Yobs = np.repeat(y_std, n, axis=0)
    decoded = np.zeros((n, len(model.schema.y_names)))

    for service in model.decode_order():
        unit = model.units[service]
        x = X[:, unit.x_idx]
        if z_mode == "prior_sample":
            prior_out, _ = unit.prior_net.forward(x)
            mu_p = prior_out[:, :unit.latent_dim]
            lv_p, _ = unit._clamp(prior_out[:, unit.latent_dim:])
            z = mu_p + np.exp(0.5 * lv_p) * rng.standard_normal(mu_p.shape)
        else:
            enc_in = np.concatenate([x, Yobs[:, unit.y_idx], Yobs[:, unit.child_idx]],
                                    axis=1)
            enc_out, _ = unit.encoder.forward(enc_in)
            mu_q = enc_out[:, :unit.latent_dim]
            if z_mode == "posterior_mean":
                z = mu_q
            else:
                lv_q, _ = unit._clamp(enc_out[:, unit.latent_dim:])
                z = mu_q + np.exp(0.5 * lv_q) * rng.standard_normal(mu_q.shape)
        dec_in = np.concatenate([x, z, decoded[:, unit.child_idx]], axis=1)
        dec_out, _ = unit.decoder.forward(dec_in)
        decoded[:, unit.y_idx] = dec_out[:, :len(unit.y_names)]

    y_us = np.maximum(0.0, model.normalizer.y.invert(decoded))
    return DecodeResult(y_us=y_us, schema=model.schema, root_rpc=model.cbn.graph.root_rpc)


def counterfactual_probability(model: GvaeModel, sample: WindowSample, overrides: dict,
                               qos_target_us: float, n_samples: int,
                               rng: np.random.Generator) -> float:
    """Fraction of posterior-sample decodes whose frontend tail meets the target."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    result = forward_decode(model, sample, z_mode="posterior_sample",
                            overrides=overrides, rng=rng, n_samples=n_samples)
    return float(np.mean(result.frontend_tail() <= qos_target_us))


# ---------------------------------------------------------------------------
# incremental reshape

def _remap_mlp(old: Mlp, old_in: tuple[str, ...], new_in: tuple[str, ...],
               old_out: tuple[str, ...], new_out: tuple[str, ...],
               activation: str, hidden: list[int],
               rng: np.random.Generator) -> Mlp:
    """Copy surviving weights by feature name; initialize new rows/columns."""
    widths = [len(new_in), *hidden, len(new_out)]
    fresh = Mlp(widths, activation, rng)
    # hidden blocks keep their exact old values
    for layer in range(1, old.n_layers - 1):
        fresh.weights[layer] = old.weights[layer].copy()
        fresh.biases[layer] = old.biases[layer].copy()
    in_pos = {n: i for i, n in enumerate(old_in)}
    for i, name in enumerate(new_in):
        if name in in_pos:
            fresh.weights[0][i, :] = old.weights[0][in_pos[name], :]
    fresh.biases[0] = old.biases[0].copy()
    out_pos = {n: i for i, n in enumerate(old_out)}
    last = fresh.n_layers - 1
    for j, name in enumerate(new_out):
        if name in out_pos:
            fresh.weights[last][:, j] = old.weights[old.n_layers - 1][:, out_pos[name]]
            fresh.biases[last][j] = old.biases[old.n_layers - 1][out_pos[name]]
    return fresh


def _enc_in_names(unit_x, unit_y, unit_child) -> tuple[str, ...]:
    return tuple(unit_x) + tuple(unit_y) + tuple(unit_child)


def incremental_reshape(model: GvaeModel, delta: GraphDelta,
                        rng: np.random.Generator) -> GvaeModel:
    """Carry a trained model over to a changed topology.

    Surviving parameters are copied exactly; inputs and outputs that are
    new under the successor graph get fan-in-scaled fresh rows/columns;
    removed services' units are dropped.
    """
    if delta.old_hash != model.cbn_hash:
        raise ReshapeConsistencyError("delta was computed against a different model graph")
    if delta.is_empty and delta.new_hash == model.cbn_hash:
        return model

    new_cbn = delta.new_cbn
    hyper = model.hyper
    new_schema = FeatureSchema.from_cbn(new_cbn, model.schema.percentiles)
    new_norm = PairedNormalizer(y=model.normalizer.y.extend(new_schema.y_names),
                                x=model.normalizer.x.extend(new_schema.x_names))
    hidden = list(hyper.hidden)
    latent_names = tuple(f"z{i}" for i in range(hyper.latent_dim))
    enc_out_names = tuple(f"q{i}" for i in range(2 * hyper.latent_dim))

    units: dict[str, CvaeUnit] = {}
    for service in new_cbn.decode_order:
        x_names, y_names, child_names, x_idx, y_idx, child_idx = _unit_indices(
            new_schema, new_cbn, service)
        old_unit = model.units.get(service)
        if old_unit is None or service in delta.added:
            unit = _build_unit(service, x_names, y_names, child_names, hyper, rng)
        else:
            dec_out_names = tuple(f"mu:{n}" for n in y_names) + tuple(
                f"lv:{n}" for n in y_names)
            old_dec_out = tuple(f"mu:{n}" for n in old_unit.y_names) + tuple(
                f"lv:{n}" for n in old_unit.y_names)
            unit = CvaeUnit(
                service=service, x_names=x_names, y_names=y_names,
                child_names=child_names, latent_dim=hyper.latent_dim,
                encoder=_remap_mlp(
                    old_unit.encoder,
                    _enc_in_names(old_unit.x_names, old_unit.y_names, old_unit.child_names),
                    _enc_in_names(x_names, y_names, child_names),
                    enc_out_names, enc_out_names, hyper.activation, hidden, rng),
                prior_net=_remap_mlp(
                    old_unit.prior_net, old_unit.x_names, x_names,
                    enc_out_names, enc_out_names, hyper.activation, hidden, rng),
                decoder=_remap_mlp(
                    old_unit.decoder,
                    tuple(old_unit.x_names) + latent_names + tuple(old_unit.child_names),
                    tuple(x_names) + latent_names + tuple(child_names),
                    old_dec_out, dec_out_names, hyper.activation, hidden, rng),
                logvar_clamp=hyper.logvar_clamp)
        unit.x_idx, unit.y_idx, unit.child_idx = x_idx, y_idx, child_idx
        _validate_unit(unit, new_schema, new_cbn)
        units[service] = unit

    return GvaeModel(cbn=new_cbn, schema=new_schema, normalizer=new_norm, hyper=hyper,
                     units=units, version=model.version + 1)


def _validate_unit(unit: CvaeUnit, schema: FeatureSchema, cbn: Cbn) -> None:
    want_x = schema.service_x_names(cbn, unit.service)
    want_y = schema.unit_y_names(cbn, unit.service)
    want_c = schema.child_y_names(cbn, unit.service)
    if (unit.x_names, unit.y_names, unit.child_names) != (want_x, want_y, want_c):
        raise ReshapeConsistencyError(f"unit {unit.service} disagrees with the graph")
    dx, dy, dc = len(want_x), len(want_y), len(want_c)
    if unit.encoder.widths[0] != dx + dy + dc or unit.decoder.widths[-1] != 2 * dy:
        raise ReshapeConsistencyError(f"unit {unit.service} has inconsistent shapes")


# ---------------------------------------------------------------------------
# persistence

def save_checkpoint(model: GvaeModel, path: str | Path,
                    extra_meta: dict | None = None) -> None:
    """Versioned checkpoint directory; arrays stored little-endian float64."""
    path = Path(path)
    (path / "units").mkdir(parents=True, exist_ok=True)
    meta = {
        "version": model.version,
        "cbn_hash": model.cbn_hash,
        "hyper": dataclasses.asdict(model.hyper),
        "decode_order": list(model.decode_order()),
        "format": {"dtype": "<f8", "order": "C"},
    }
    if extra_meta:
        meta["extra"] = extra_meta
    _write_json(path / "meta.json", meta)
    _write_json(path / "cbn.json", {"graph": model.cbn.graph.to_dict(),
                                    "metric_schema": model.cbn.schema.to_dict()})
    _write_json(path / "schema.json", model.schema.to_dict())
    _write_json(path / "normalizer.json", model.normalizer.to_dict())
    for service, unit in model.units.items():
        arrays = {}
        for net_name in ("encoder", "prior_net", "decoder"):
            net: Mlp = getattr(unit, net_name)
            for i, (W, b) in enumerate(zip(net.weights, net.biases)):
                arrays[f"{net_name}_W{i}"] = np.ascontiguousarray(W, dtype="<f8")
                arrays[f"{net_name}_b{i}"] = np.ascontiguousarray(b, dtype="<f8")
        np.savez(path / "units" / f"{service}.npz", **arrays)


def load_checkpoint(path: str | Path) -> GvaeModel:
    path = Path(path)
    meta = _read_json(path / "meta.json")
    cbn_d = _read_json(path / "cbn.json")
    cbn = build_cbn(RpcGraph.from_dict(cbn_d["graph"]),
                    MetricSchema.from_dict(cbn_d["metric_schema"]))
    if cbn.cbn_hash() != meta["cbn_hash"]:
        raise CheckpointError("checkpoint graph hash mismatch")
    hyper_d = dict(meta["hyper"])
    hyper_d["hidden"] = tuple(hyper_d["hidden"])
    hyper = ModelConfig(**hyper_d)
    schema = FeatureSchema.from_dict(_read_json(path / "schema.json"))
    normalizer = PairedNormalizer.from_dict(_read_json(path / "normalizer.json"))
    model = init_gvae(cbn, schema, normalizer, hyper, np.random.default_rng(0))
    for service, unit in model.units.items():
        blob = np.load(path / "units" / f"{service}.npz")
        for net_name in ("encoder", "prior_net", "decoder"):
            net: Mlp = getattr(unit, net_name)
            for i in range(net.n_layers):
                W = blob[f"{net_name}_W{i}"].astype(np.float64)
                b = blob[f"{net_name}_b{i}"].astype(np.float64)
                if W.shape != net.weights[i].shape:
                    raise CheckpointError(f"shape mismatch in {service}/{net_name}")
                net.weights[i] = W
                net.biases[i] = b
    model.version = int(meta["version"])
    return model


def checkpoint_meta(path: str | Path) -> dict:
    return _read_json(Path(path) / "meta.json")


def _write_json(path: Path, obj: dict) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=1)


def _read_json(path: Path) -> dict:
    with open(path) as fh:
        return json.load(fh)
