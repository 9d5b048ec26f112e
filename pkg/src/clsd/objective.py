"""Loss family: plain log loss, confidence-weighted variants, and baselines.

Every loss returns the scalar (a sum over the batch, not a mean) together
with per-sample d(loss)/d(logit) terms, so the model's backward pass can be
checked against finite differences of the scalar.  Teacher scores are always
detached: they enter as plain numbers and no gradient flows through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from .corpus import Batch
from .errors import ConfigError, ContractViolation

VARIANTS = ("ori", "global", "clsd", "focal", "dt_reweight", "mtl")

DWELL_SCALE_SECONDS = 30.0  # feed-reading granularity for the dwell reweight


@dataclass(frozen=True)
class LossConfig:
    """Objective selection plus its hyper-parameters."""

    variant: str = "ori"
    alpha: float = 1.0
    warmup_fraction: float = 1.0 / 3.0
    epsilon: float = 1e-7
    focal_gamma: float = 2.0
    dt_weight_cap: float = 3.0
    mtl_weight: float = 0.3

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown loss variant {self.variant!r}")
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise ConfigError("alpha must be finite and >= 0")
        if not 0.0 <= self.warmup_fraction <= 1.0:
            raise ConfigError("warmup_fraction must lie in [0, 1]")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")
        if self.dt_weight_cap <= 0:
            raise ConfigError("dt_weight_cap must be positive")
        if self.mtl_weight < 0:
            raise ConfigError("mtl_weight must be >= 0")

    @property
    def uses_gate(self) -> bool:
        return self.variant == "clsd"

    @property
    def uses_teacher(self) -> bool:
        return self.variant in ("global", "clsd")

    @property
    def uses_dwell_head(self) -> bool:
        return self.variant == "mtl"


def loss_ori(p: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    value = -np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(value), p - y


def loss_global(p: np.ndarray, y: np.ndarray, teacher: np.ndarray) -> tuple[float, np.ndarray]:
    """Positive terms scaled by (1 + teacher score); negatives untouched."""
    teacher = np.asarray(teacher, dtype=np.float64)
    if teacher.shape != p.shape:
        raise ContractViolation("teacher scores must align with the batch")
    if ((teacher < 0.0) | (teacher > 1.0)).any():
        raise ContractViolation("teacher scores must lie in [0, 1]")
    w = 1.0 + teacher
    value = -np.sum(w * y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    d_logit = y * w * (p - 1.0) + (1.0 - y) * p
    return float(value), d_logit


def loss_clsd(
    p: np.ndarray,
    p_local: np.ndarray,
    y: np.ndarray,
    teacher: np.ndarray,
    alpha: float,
    eps: float = 1e-7,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Confidence-weighted log loss over the gated sum q = p + p_local.

    Both gradient streams flow through q; the clamp on q passes zero
    gradient when saturated.  The weight uses the detached teacher score of
    the backbone only.
    """
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    teacher = np.asarray(teacher, dtype=np.float64)
    if ((teacher < 0.0) | (teacher > 1.0)).any():
        raise ContractViolation("teacher scores must lie in [0, 1]")
    q_raw = p + p_local
    q = np.clip(q_raw, eps, 1.0 - eps)
    open_clamp = (q_raw >= eps) & (q_raw <= 1.0 - eps)
    w = 1.0 + alpha * teacher
    value = -np.sum(w * y * np.log(q) + (1.0 - y) * np.log(1.0 - q))
    d_q = (-w * y / q + (1.0 - y) / (1.0 - q)) * open_clamp
    d_logit = d_q * p * (1.0 - p)
    d_gate_logit = d_q * p_local * (1.0 - p_local)
    return float(value), d_logit, d_gate_logit


def loss_focal(p: np.ndarray, y: np.ndarray, gamma: float = 2.0) -> tuple[float, np.ndarray]:
    if gamma < 0:
        raise ConfigError("gamma must be >= 0")
    log_p = np.log(p)
    log_1p = np.log(1.0 - p)
    value = -np.sum(y * (1.0 - p) ** gamma * log_p + (1.0 - y) * p ** gamma * log_1p)
    d_pos = gamma * (1.0 - p) ** gamma * p * log_p - (1.0 - p) ** (gamma + 1.0)
    d_neg = -gamma * p ** gamma * (1.0 - p) * log_1p + p ** (gamma + 1.0)
    return float(value), y * d_pos + (1.0 - y) * d_neg


def dt_weight(dwell_time: np.ndarray, cap: float) -> np.ndarray:
    return np.minimum(1.0 + np.log1p(np.asarray(dwell_time, dtype=np.float64) / DWELL_SCALE_SECONDS), cap)


def loss_dt_reweight(
    p: np.ndarray, y: np.ndarray, dwell_time: np.ndarray, cap: float = 3.0
) -> tuple[float, np.ndarray]:
    """Positive terms reweighted by a capped log transform of dwell time."""
    if cap <= 0:
        raise ConfigError("cap must be positive")
    if (np.asarray(dwell_time) < 0).any():
        raise ContractViolation("dwell_time must be non-negative")
    w = dt_weight(dwell_time, cap)
    value = -np.sum(w * y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    d_logit = y * w * (p - 1.0) + (1.0 - y) * p
    return float(value), d_logit


def loss_mtl(
    p: np.ndarray,
    y: np.ndarray,
    dwell_time: np.ndarray,
    dwell_pred: np.ndarray,
    mtl_weight: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Log loss plus a dwell regression head on positives (MSE on log dwell)."""
    if mtl_weight < 0:
        raise ConfigError("mtl_weight must be >= 0")
    base, d_logit = loss_ori(p, y)
    pos = y == 1.0
    n_pos = int(pos.sum())
    d_dwell = np.zeros_like(p)
    if n_pos > 0:
        target = np.log1p(np.asarray(dwell_time, dtype=np.float64))
        resid = np.where(pos, dwell_pred - target, 0.0)
        aux = float((resid[pos] ** 2).mean())
        d_dwell = mtl_weight * 2.0 * resid / n_pos
    else:
        aux = 0.0
    return base + mtl_weight * aux, d_logit, d_dwell


class TeacherOracle:
    """Detached confidence scores from the current (pre-update) backbone.

    The oracle refuses to run during warm-up and counts its forward passes,
    so training-loop invariants (no teacher before warm-up ends, one teacher
    pass per post-warm-up batch) can be asserted from outside.
    """

    def __init__(self):
        self.in_warmup = True
        self.forward_count = 0

    def scores(self, params: "model_mod.ModelParams", batch: Batch) -> np.ndarray:
        if self.in_warmup:
            raise ContractViolation("teacher queried during warm-up")
        self.forward_count += 1
        logits, _ = model_mod.forward(params, batch)
        return model_mod.predict(logits).copy()


def teacher_scores(params: "model_mod.ModelParams", batch: Batch) -> np.ndarray:
    """One-off detached teacher scores (backbone only, gate excluded)."""
    logits, _ = model_mod.forward(params, batch)
    return model_mod.predict(logits).copy()
