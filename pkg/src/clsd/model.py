"""CTR backbones (lr, fm, deepfm), the group gate, and exact gradients.

All parameters live in one flat float64 vector; named sections are numpy
views into it.  That makes every parameter addressable by a single flat
index, which the finite-difference checks and the optimizer rely on.
Forward passes record a trace with enough activations to run an exact
analytic backward for any subset of {backbone, gate, dwell head}.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.special import expit

from .corpus import Batch, FieldSchema
from .errors import ConfigError, ContractViolation, SchemaError

BACKBONES = ("lr", "fm", "deepfm")

EMBED_DIM = 8
MLP_HIDDEN = (32, 16)
ADGATE_HIDDEN = 8
INIT_SCALE = 0.01
GATE_OUT_BIAS_INIT = -3.0   # additive probability starts near zero
EPS = 1e-7

_GATE_STREAM = 101
_MTL_STREAM = 102


@dataclass(frozen=True)
class ModelMeta:
    """Everything needed to rebuild the parameter layout."""

    backbone: str
    cardinalities: tuple[int, ...]
    embed_dim: int = EMBED_DIM
    mlp_hidden: tuple[int, ...] = MLP_HIDDEN
    n_groups: int = 0
    adgate_hidden: int = ADGATE_HIDDEN
    has_gate: bool = False
    has_mtl: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.has_gate and self.n_groups < 1:
            raise ConfigError("gate requires a positive group cardinality")

    @property
    def field_count(self) -> int:
        return len(self.cardinalities)

    @property
    def total_features(self) -> int:
        return int(sum(self.cardinalities))

    @property
    def mtl_in_dim(self) -> int:
        # deepfm taps the last shared hidden layer; lr/fm expose only the
        # scalar logit, so the dwell head reads that.
        return self.mlp_hidden[-1] if self.backbone == "deepfm" else 1

    @classmethod
    def for_schema(
        cls,
        backbone: str,
        schema: FieldSchema,
        embed_dim: int = EMBED_DIM,
        mlp_hidden: tuple[int, ...] = MLP_HIDDEN,
        adgate_hidden: int = ADGATE_HIDDEN,
        has_gate: bool = False,
        has_mtl: bool = False,
    ) -> "ModelMeta":
        return cls(
            backbone=backbone,
            cardinalities=tuple(schema.cardinalities),
            embed_dim=embed_dim,
            mlp_hidden=tuple(mlp_hidden),
            n_groups=schema.group_cardinality,
            adgate_hidden=adgate_hidden,
            has_gate=has_gate,
            has_mtl=has_mtl,
        )


def _layout(meta: ModelMeta) -> list[tuple[str, tuple[int, ...]]]:
    F, k, d = meta.total_features, meta.field_count, meta.embed_dim
    sections: list[tuple[str, tuple[int, ...]]] = [("bias", ()), ("first_order", (F,))]
    if meta.backbone in ("fm", "deepfm"):
        sections.append(("embeddings", (F, d)))
    if meta.backbone == "deepfm":
        dims = (k * d, *meta.mlp_hidden, 1)
        for li in range(len(dims) - 1):
            sections.append((f"mlp.{li}.w", (dims[li], dims[li + 1])))
            sections.append((f"mlp.{li}.b", (dims[li + 1],)))
    if meta.has_gate:
        h = meta.adgate_hidden
        sections.append(("adgate.0.w", (meta.n_groups, h)))
        sections.append(("adgate.0.b", (h,)))
        sections.append(("adgate.1.w", (h, 1)))
        sections.append(("adgate.1.b", (1,)))
    if meta.has_mtl:
        sections.append(("mtl.w", (meta.mtl_in_dim, 1)))
        sections.append(("mtl.b", (1,)))
    return sections


class ModelParams:
    """Flat parameter vector with named section views."""

    def __init__(self, meta: ModelMeta, data: np.ndarray):
        self.meta = meta
        self.sections: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in _layout(meta):
            size = int(np.prod(shape)) if shape else 1
            self.sections[name] = (offset, shape)
            offset += size
        if data.shape != (offset,):
            raise SchemaError(f"expected flat size {offset}, got {data.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float64)

    @property
    def flat_size(self) -> int:
        return self.data.size

    def view(self, name: str) -> np.ndarray:
        offset, shape = self.sections[name]
        size = int(np.prod(shape)) if shape else 1
        v = self.data[offset : offset + size]
        return v.reshape(shape) if shape else v.reshape(())

    def copy(self) -> "ModelParams":
        return ModelParams(self.meta, self.data.copy())

    def zeros_like_grad(self) -> np.ndarray:
        return np.zeros_like(self.data)

    def section_names(self) -> list[str]:
        return list(self.sections)


def flat_section_sizes(meta: ModelMeta) -> int:
    return sum(int(np.prod(s)) if s else 1 for _, s in _layout(meta))


def init_params(meta: ModelMeta, seed: int) -> ModelParams:
    """Uniform [-INIT_SCALE, INIT_SCALE] init; gate and dwell-head sections
    come from seed-derived side streams so adding them later, mid-run, yields
    the exact same backbone values as initializing with them up front."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF]))
    base_meta = replace(meta, has_gate=False, has_mtl=False)
    n_base = flat_section_sizes(base_meta)
    chunks = [rng.uniform(-INIT_SCALE, INIT_SCALE, size=n_base)]
    if meta.has_gate:
        chunks.append(_gate_init(meta, seed))
    if meta.has_mtl:
        chunks.append(_mtl_init(meta, seed))
    return ModelParams(meta, np.concatenate(chunks))


def _gate_init(meta: ModelMeta, seed: int) -> np.ndarray:
    h = meta.adgate_hidden
    n = meta.n_groups * h + h + h + 1
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, _GATE_STREAM]))
    vals = rng.uniform(-INIT_SCALE, INIT_SCALE, size=n)
    vals[-1] = GATE_OUT_BIAS_INIT
    return vals


def _mtl_init(meta: ModelMeta, seed: int) -> np.ndarray:
    n = meta.mtl_in_dim + 1
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, _MTL_STREAM]))
    return rng.uniform(-INIT_SCALE, INIT_SCALE, size=n)


def grow_gate(params: ModelParams, seed: int) -> ModelParams:
    if params.meta.has_gate:
        return params
    if params.meta.has_mtl:
        raise ContractViolation("gate must be added before the dwell head")
    meta = replace(params.meta, has_gate=True)
    return ModelParams(meta, np.concatenate([params.data, _gate_init(meta, seed)]))


def grow_mtl(params: ModelParams, seed: int) -> ModelParams:
    if params.meta.has_mtl:
        return params
    meta = replace(params.meta, has_mtl=True)
    return ModelParams(meta, np.concatenate([params.data, _mtl_init(meta, seed)]))


def field_offsets(meta: ModelMeta) -> np.ndarray:
    return np.concatenate([[0], np.cumsum(meta.cardinalities)[:-1]]).astype(np.int64)


@dataclass
class ForwardTrace:
    """Activations captured during forward, consumed by backward."""

    batch: Batch
    gid: np.ndarray                      # (B, k) global feature indices
    logits: np.ndarray                   # (B,) backbone logits
    emb: Optional[np.ndarray] = None     # (B, k, d)
    emb_sum: Optional[np.ndarray] = None  # (B, d)
    x0: Optional[np.ndarray] = None      # (B, k*d) MLP input
    zs: list[np.ndarray] = field(default_factory=list)   # pre-activations
    hs: list[np.ndarray] = field(default_factory=list)   # post-activations
    gate_z1: Optional[np.ndarray] = None
    gate_h1: Optional[np.ndarray] = None
    gate_logits: Optional[np.ndarray] = None
    dwell_pred: Optional[np.ndarray] = None


def predict(logit, eps: float = EPS) -> np.ndarray:
    """Sigmoid clamped into [eps, 1 - eps]; log terms stay finite."""
    return np.clip(expit(np.asarray(logit, dtype=np.float64)), eps, 1.0 - eps)


def forward(params: ModelParams, batch: Batch) -> tuple[np.ndarray, ForwardTrace]:
    """Backbone logits for a batch plus the trace needed for backward."""
    meta = params.meta
    offsets = field_offsets(meta)
    gid = batch.feature_ids + offsets[None, :]
    if (batch.feature_ids < 0).any() or (
        batch.feature_ids >= np.asarray(meta.cardinalities)[None, :]
    ).any():
        raise SchemaError("feature id out of range for model schema")

    w = params.view("first_order")
    logits = w[gid].sum(axis=1) + params.view("bias")

    trace = ForwardTrace(batch=batch, gid=gid, logits=logits)

    if meta.backbone in ("fm", "deepfm"):
        emb = params.view("embeddings")[gid]          # (B, k, d)
        s = emb.sum(axis=1)                           # (B, d)
        pair = 0.5 * ((s * s).sum(axis=1) - (emb * emb).sum(axis=(1, 2)))
        logits = logits + pair
        trace.emb, trace.emb_sum = emb, s

    if meta.backbone == "deepfm":
        b, k, d = trace.emb.shape
        x0 = trace.emb.reshape(b, k * d)
        h = x0
        n_layers = len(meta.mlp_hidden) + 1
        for li in range(n_layers):
            z = h @ params.view(f"mlp.{li}.w") + params.view(f"mlp.{li}.b")
            if li < n_layers - 1:
                h = np.maximum(z, 0.0)
            else:
                h = z
            trace.zs.append(z)
            trace.hs.append(h)
        logits = logits + trace.hs[-1][:, 0]
        trace.x0 = x0

    trace.logits = logits
    return logits, trace


def adgate_forward(
    params: ModelParams, batch: Batch, trace: Optional[ForwardTrace] = None
) -> tuple[np.ndarray, ForwardTrace]:
    """p_local per sample; depends only on the group id."""
    meta = params.meta
    if not meta.has_gate:
        raise ConfigError("model has no gate parameters")
    g = batch.group_ids
    if (g < 0).any() or (g >= meta.n_groups).any():
        raise SchemaError("group id out of range for gate")
    z1 = params.view("adgate.0.w")[g] + params.view("adgate.0.b")
    h1 = np.maximum(z1, 0.0)
    gate_logits = h1 @ params.view("adgate.1.w")[:, 0] + params.view("adgate.1.b")[0]
    if trace is None:
        trace = ForwardTrace(batch=batch, gid=np.empty((len(batch), 0), dtype=np.int64),
                             logits=np.zeros(len(batch)))
    trace.gate_z1, trace.gate_h1, trace.gate_logits = z1, h1, gate_logits
    return predict(gate_logits), trace


def dwell_forward(params: ModelParams, trace: ForwardTrace) -> np.ndarray:
    """Auxiliary dwell prediction off the shared representation."""
    meta = params.meta
    if not meta.has_mtl:
        raise ConfigError("model has no dwell-head parameters")
    wm = params.view("mtl.w")
    bm = params.view("mtl.b")
    if meta.backbone == "deepfm":
        rep = trace.hs[-2]          # last hidden activation before the output layer
        pred = rep @ wm[:, 0] + bm[0]
    else:
        pred = trace.logits * wm[0, 0] + bm[0]
    trace.dwell_pred = pred
    return pred


def backward(
    params: ModelParams,
    trace: ForwardTrace,
    d_logit: Optional[np.ndarray] = None,
    d_gate_logit: Optional[np.ndarray] = None,
    d_dwell: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Exact gradients of sum(upstream * output) for each requested stream.

    Streams left as None contribute zero gradient.  Must be called before
    params are updated (the trace aliases forward-time activations).
    """
    meta = params.meta
    grads = params.zeros_like_grad()
    gp = ModelParams(meta, grads)  # view helper over the flat grad vector

    b = len(trace.batch)
    u = np.zeros(b) if d_logit is None else np.asarray(d_logit, dtype=np.float64)
    if u.shape != (b,):
        raise ContractViolation("d_logit shape mismatch")

    # Dwell head first: for lr/fm it feeds back into the backbone logit.
    if d_dwell is not None:
        if not meta.has_mtl or trace.dwell_pred is None:
            raise ContractViolation("dwell upstream given but no dwell forward ran")
        dd = np.asarray(d_dwell, dtype=np.float64)
        wm = params.view("mtl.w")
        if meta.backbone == "deepfm":
            rep = trace.hs[-2]
            gp.view("mtl.w")[:, 0] += rep.T @ dd
            gp.view("mtl.b")[0] += dd.sum()
        else:
            gp.view("mtl.w")[0, 0] += float(dd @ trace.logits)
            gp.view("mtl.b")[0] += dd.sum()
            u = u + dd * wm[0, 0]

    if d_logit is not None or d_dwell is not None:
        gp.view("bias")[...] += u.sum()
        np.add.at(
            gp.view("first_order"), trace.gid, np.broadcast_to(u[:, None], trace.gid.shape)
        )
        if meta.backbone in ("fm", "deepfm"):
            d_emb = u[:, None, None] * (trace.emb_sum[:, None, :] - trace.emb)
        if meta.backbone == "deepfm":
            n_layers = len(meta.mlp_hidden) + 1
            dh = u[:, None].copy()  # gradient at the final linear output
            for li in range(n_layers - 1, -1, -1):
                dz = dh if li == n_layers - 1 else dh * (trace.zs[li] > 0)
                h_in = trace.x0 if li == 0 else trace.hs[li - 1]
                gp.view(f"mlp.{li}.w")[...] += h_in.T @ dz
                gp.view(f"mlp.{li}.b")[...] += dz.sum(axis=0)
                dh = dz @ params.view(f"mlp.{li}.w").T
                if d_dwell is not None and li == n_layers - 1:
                    dh = dh + np.asarray(d_dwell)[:, None] * params.view("mtl.w")[:, 0][None, :]
            d_emb = d_emb + dh.reshape(trace.emb.shape)
        if meta.backbone in ("fm", "deepfm"):
            d = meta.embed_dim
            np.add.at(gp.view("embeddings"), trace.gid.reshape(-1), d_emb.reshape(-1, d))

    if d_gate_logit is not None:
        if not meta.has_gate or trace.gate_logits is None:
            raise ContractViolation("gate upstream given but no gate forward ran")
        ug = np.asarray(d_gate_logit, dtype=np.float64)
        if ug.shape != (b,):
            raise ContractViolation("d_gate_logit shape mismatch")
        w1 = params.view("adgate.1.w")[:, 0]
        gp.view("adgate.1.w")[:, 0] += trace.gate_h1.T @ ug
        gp.view("adgate.1.b")[0] += ug.sum()
        dz1 = (ug[:, None] * w1[None, :]) * (trace.gate_z1 > 0)
        np.add.at(gp.view("adgate.0.w"), trace.batch.group_ids, dz1)
        gp.view("adgate.0.b")[...] += dz1.sum(axis=0)

    return grads


def full_prediction(params: ModelParams, batch: Batch, eps: float = EPS):
    """Click-probability estimate: p for plain models, clamp(p + p_local)
    when the gate is part of the trained model.  Returns (score, p, p_local)."""
    logits, trace = forward(params, batch)
    p = predict(logits, eps)
    if params.meta.has_gate:
        p_local, _ = adgate_forward(params, batch, trace)
        score = np.clip(p + p_local, eps, 1.0 - eps)
        return score, p, p_local
    return p, p, None
