"""Ranking and calibration metrics plus per-group diagnostics."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import stats

from . import corpus as corpus_mod
from . import model as model_mod
from .corpus import Corpus
from .errors import ContractViolation, InsufficientDataError, UndefinedMetricError
from .model import ModelParams


def auc(scores, labels) -> float:
    """Mann-Whitney rank AUC; tied scores receive their average rank."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if scores.shape != labels.shape:
        raise ContractViolation("scores and labels must align")
    pos = labels == 1.0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; ties share the mean rank of their block."""
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    n = x.size
    boundaries = np.flatnonzero(sx[1:] != sx[:-1]) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [n]])
    block_rank = (starts + ends + 1) / 2.0  # mean of 1-based positions
    ranks_sorted = np.repeat(block_rank, ends - starts)
    ranks = np.empty(n)
    ranks[order] = ranks_sorted
    return ranks


def logloss(scores, labels, eps: float = 1e-7) -> float:
    """Mean negative log-likelihood of the click labels."""
    p = np.clip(np.asarray(scores, dtype=np.float64), eps, 1.0 - eps)
    y = np.asarray(labels, dtype=np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


@dataclass
class GroupRow:
    group_id: int
    count: int
    ctr: Optional[float]
    ctr_normalized: Optional[float]
    mean_teacher_score: Optional[float]
    mean_p_local: Optional[float]


@dataclass
class GroupStats:
    rows: list[GroupRow]

    def to_csv(self, path: str | Path) -> None:
        lines = ["group_id,count,ctr,ctr_normalized,mean_teacher_score,mean_p_local"]
        for r in self.rows:
            lines.append(
                f"{r.group_id},{r.count},{_opt(r.ctr)},{_opt(r.ctr_normalized)},"
                f"{_opt(r.mean_teacher_score)},{_opt(r.mean_p_local)}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _opt(v: Optional[float]) -> str:
    return "-" if v is None else f"{v:.6f}"


def group_stats(corpus: Corpus, params: ModelParams, batch_size: int = 4096) -> GroupStats:
    """Per-group sample count, empirical CTR (plus CTR normalized by the max
    group CTR), mean backbone prediction, and mean gate output when present."""
    n_groups = params.meta.n_groups
    counts = np.zeros(n_groups, dtype=np.int64)
    clicks = np.zeros(n_groups)
    p_sum = np.zeros(n_groups)
    local_sum = np.zeros(n_groups)
    has_gate = params.meta.has_gate

    for batch in corpus_mod.batches(corpus, batch_size, shuffle_seed=None):
        logits, trace = model_mod.forward(params, batch)
        p = model_mod.predict(logits)
        g = batch.group_ids
        np.add.at(counts, g, 1)
        np.add.at(clicks, g, batch.labels)
        np.add.at(p_sum, g, p)
        if has_gate:
            p_local, _ = model_mod.adgate_forward(params, batch, trace)
            np.add.at(local_sum, g, p_local)

    ctr = np.divide(clicks, counts, out=np.zeros(n_groups), where=counts > 0)
    max_ctr = ctr[counts > 0].max() if (counts > 0).any() else 0.0
    rows = []
    for gid in range(n_groups):
        if counts[gid] == 0:
            rows.append(GroupRow(gid, 0, None, None, None, None))
            continue
        rows.append(
            GroupRow(
                group_id=gid,
                count=int(counts[gid]),
                ctr=float(ctr[gid]),
                ctr_normalized=float(ctr[gid] / max_ctr) if max_ctr > 0 else None,
                mean_teacher_score=float(p_sum[gid] / counts[gid]),
                mean_p_local=float(local_sum[gid] / counts[gid]) if has_gate else None,
            )
        )
    return GroupStats(rows)


def confidence_recovery(corpus: Corpus, scores_of_positives) -> float:
    """Spearman rank correlation between model confidence scores and the
    generator's latent confidence, over clicked records (corpus order)."""
    pos = corpus.labels == 1.0
    latents = corpus.confidences[pos]
    if np.isnan(latents).any():
        raise ContractViolation("corpus lacks latent confidence on positives")
    scores = np.asarray(scores_of_positives, dtype=np.float64)
    if scores.shape != latents.shape:
        raise ContractViolation(
            f"expected {latents.size} positive scores, got {scores.size}"
        )
    if latents.size < 10:
        raise InsufficientDataError("need at least 10 positives")
    rho = stats.spearmanr(scores, latents).statistic
    return float(rho)


def paired_ttest(a, b) -> float:
    """Two-sided paired t-test p-value for matched samples a vs b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ContractViolation("paired t-test needs two aligned samples of size >= 2")
    return float(stats.ttest_rel(a, b).pvalue)
