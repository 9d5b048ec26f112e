"""Training loop: Adam, warm-up scheduling, per-batch teacher snapshots.

The teacher for a batch is the parameter state left by the previous batch's
update (equivalently: the current pre-update state), read through a detached
forward pass.  Gate and dwell-head parameters are materialized lazily at the
warm-up boundary from seed-derived streams, so a run whose warm-up spans all
epochs is bit-identical to a plain log-loss run.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import corpus as corpus_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import objective as objective_mod
from .corpus import Batch, Corpus
from .errors import CheckpointError, ConfigError, NonFiniteError
from .model import ModelParams
from .objective import LossConfig, TeacherOracle

CKPT_MAGIC = "CLSDCKPT v1"
_VALUES_PER_LINE = 16


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    learning_rate: float = 0.003
    batch_size: int = 256
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @property
    def warmup_epochs(self) -> int:
        # tiny slack keeps exact products like (1/3) * 9 from rounding up
        return math.ceil(self.loss.warmup_fraction * self.epochs - 1e-12)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def fresh(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0)

    def grow(self, n: int) -> None:
        extra = n - self.m.size
        if extra < 0:
            raise ConfigError("optimizer state cannot shrink")
        if extra:
            self.m = np.concatenate([self.m, np.zeros(extra)])
            self.v = np.concatenate([self.v, np.zeros(extra)])


def adam_step(
    params: ModelParams,
    grads: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard Adam with bias correction, in place."""
    if grads.shape != params.data.shape:
        raise ConfigError("gradient/parameter shape mismatch")
    if not np.isfinite(grads).all():
        bad = [
            name
            for name in params.section_names()
            if not np.isfinite(_section_of(params, grads, name)).all()
        ]
        raise NonFiniteError(
            "non-finite gradient", diagnostics={"sections": bad, "step": state.step}
        )
    state.step += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grads
    state.v = beta2 * state.v + (1.0 - beta2) * grads * grads
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    params.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _section_of(params: ModelParams, flat: np.ndarray, name: str) -> np.ndarray:
    offset, shape = params.sections[name]
    size = int(np.prod(shape)) if shape else 1
    return flat[offset : offset + size]


@dataclass
class EpochRow:
    epoch: int
    phase: str
    train_logloss: float
    test_auc: float
    test_logloss: float


@dataclass
class RunReport:
    rows: list[EpochRow] = field(default_factory=list)
    warmup_epochs: int = 0
    teacher_forwards: int = 0

    @property
    def final_test_auc(self) -> float:
        return self.rows[-1].test_auc if self.rows else float("nan")

    @property
    def final_test_logloss(self) -> float:
        return self.rows[-1].test_logloss if self.rows else float("nan")

    def to_csv(self, path: str | Path) -> None:
        lines = ["epoch,phase,train_logloss,test_auc,test_logloss"]
        for r in self.rows:
            lines.append(
                f"{r.epoch},{r.phase},{_fmt(r.train_logloss)},"
                f"{_fmt(r.test_auc)},{_fmt(r.test_logloss)}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v: float) -> str:
    return "-" if not np.isfinite(v) else f"{v:.6f}"


class TrainProbe:
    """Optional instrumentation: hashes of parameter state around updates."""

    def __init__(self):
        self.teacher_hashes: list[tuple[int, int, str]] = []
        self.update_hashes: list[tuple[int, int, str]] = []

    @staticmethod
    def digest(params: ModelParams) -> str:
        return hashlib.sha256(params.data.tobytes()).hexdigest()

    def on_teacher(self, epoch: int, batch_idx: int, params: ModelParams) -> None:
        self.teacher_hashes.append((epoch, batch_idx, self.digest(params)))

    def on_update(self, epoch: int, batch_idx: int, params: ModelParams) -> None:
        self.update_hashes.append((epoch, batch_idx, self.digest(params)))


def train(
    train_corpus: Corpus,
    params: ModelParams,
    config: TrainConfig,
    test_corpus: Optional[Corpus] = None,
    probe: Optional[TrainProbe] = None,
    opt_state: Optional[AdamState] = None,
    start_epoch: int = 0,
    stop_epoch: Optional[int] = None,
) -> tuple[ModelParams, RunReport]:
    """Run (a slice of) the training schedule; fully deterministic per seed.

    start/stop_epoch select a window of the schedule defined by config.epochs,
    so an interrupted-then-resumed run retraces the uninterrupted one.
    """
    if len(train_corpus) == 0:
        raise ConfigError("training corpus is empty")
    cfg = config.loss
    warm_epochs = config.warmup_epochs
    stop_epoch = config.epochs if stop_epoch is None else stop_epoch
    if not 0 <= start_epoch <= stop_epoch <= config.epochs:
        raise ConfigError("invalid epoch window")

    oracle = TeacherOracle()
    state = opt_state if opt_state is not None else AdamState.fresh(params.flat_size)
    report = RunReport(warmup_epochs=warm_epochs)

    for epoch in range(start_epoch, stop_epoch):
        warm = epoch < warm_epochs
        if not warm:
            oracle.in_warmup = False
            if cfg.uses_gate and not params.meta.has_gate:
                params = model_mod.grow_gate(params, config.seed)
                state.grow(params.flat_size)
            if cfg.uses_dwell_head and not params.meta.has_mtl:
                params = model_mod.grow_mtl(params, config.seed)
                state.grow(params.flat_size)

        nll_sum = 0.0
        n_seen = 0
        for batch_idx, batch in enumerate(
            corpus_mod.batches(train_corpus, config.batch_size, config.seed, epoch)
        ):
            value, d_logit, d_gate, d_dwell, score, trace = _batch_objective(
                params, batch, cfg, warm, oracle, probe, epoch, batch_idx
            )
            if not np.isfinite(value):
                raise NonFiniteError(
                    "non-finite loss",
                    diagnostics={
                        "epoch": epoch,
                        "batch": batch_idx,
                        "labels": batch.labels[:8].tolist(),
                        "feature_ids": batch.feature_ids[:4].tolist(),
                    },
                )
            grads = model_mod.backward(
                params, trace, d_logit=d_logit, d_gate_logit=d_gate, d_dwell=d_dwell
            )
            adam_step(
                params, grads, state, config.learning_rate,
                config.beta1, config.beta2, config.adam_eps,
            )
            if probe is not None:
                probe.on_update(epoch, batch_idx, params)
            y = batch.labels
            nll_sum += -float(
                np.sum(y * np.log(score) + (1.0 - y) * np.log(1.0 - score))
            )
            n_seen += len(batch)

        test_auc, test_ll = _evaluate(params, test_corpus, config.batch_size)
        report.rows.append(
            EpochRow(
                epoch=epoch,
                phase="warmup" if warm else "clsd",
                train_logloss=nll_sum / n_seen,
                test_auc=test_auc,
                test_logloss=test_ll,
            )
        )

    report.teacher_forwards = oracle.forward_count
    return params, report


def _batch_objective(params, batch, cfg, warm, oracle, probe, epoch, batch_idx):
    """Forward + configured loss for one batch.

    Returns (value, d_logit, d_gate, d_dwell, click_score, trace); the click
    score (p, or clamp(p + p_local) once the gate is live) feeds the running
    train logloss.
    """
    logits, trace = model_mod.forward(params, batch)
    p = model_mod.predict(logits, cfg.epsilon)
    y = batch.labels
    d_gate = None
    d_dwell = None
    score = p

    if warm or cfg.variant == "ori":
        value, d_logit = objective_mod.loss_ori(p, y)
    elif cfg.variant == "global":
        if probe is not None:
            probe.on_teacher(epoch, batch_idx, params)
        t = oracle.scores(params, batch)
        value, d_logit = objective_mod.loss_global(p, y, t)
    elif cfg.variant == "clsd":
        if probe is not None:
            probe.on_teacher(epoch, batch_idx, params)
        t = oracle.scores(params, batch)
        p_local, _ = model_mod.adgate_forward(params, batch, trace)
        value, d_logit, d_gate = objective_mod.loss_clsd(
            p, p_local, y, t, cfg.alpha, cfg.epsilon
        )
        score = np.clip(p + p_local, cfg.epsilon, 1.0 - cfg.epsilon)
    elif cfg.variant == "focal":
        value, d_logit = objective_mod.loss_focal(p, y, cfg.focal_gamma)
    elif cfg.variant == "dt_reweight":
        value, d_logit = objective_mod.loss_dt_reweight(
            p, y, batch.dwell_times, cfg.dt_weight_cap
        )
    elif cfg.variant == "mtl":
        dwell_pred = model_mod.dwell_forward(params, trace)
        value, d_logit, d_dwell = objective_mod.loss_mtl(
            p, y, batch.dwell_times, dwell_pred, cfg.mtl_weight
        )
    else:  # pragma: no cover - LossConfig validates the variant
        raise ConfigError(f"unknown variant {cfg.variant!r}")
    return value, d_logit, d_gate, d_dwell, score, trace


def _evaluate(params, test_corpus, batch_size):
    if test_corpus is None or len(test_corpus) == 0:
        return float("nan"), float("nan")
    scores = predict_corpus(params, test_corpus, batch_size)
    return (
        metrics_mod.auc(scores, test_corpus.labels),
        metrics_mod.logloss(scores, test_corpus.labels),
    )


def predict_corpus(params: ModelParams, corpus: Corpus, batch_size: int = 4096) -> np.ndarray:
    """Click scores for every record, in corpus order."""
    out = np.empty(len(corpus))
    pos = 0
    for batch in corpus_mod.batches(corpus, batch_size, shuffle_seed=None):
        score, _, _ = model_mod.full_prediction(params, batch)
        out[pos : pos + len(batch)] = score
        pos += len(batch)
    return out


# ---------------------------------------------------------------------------
# Checkpoint IO (text, round-trip exact)
# ---------------------------------------------------------------------------


def save_checkpoint(
    params: ModelParams,
    opt_state: AdamState,
    path: str | Path,
    epochs_done: int = 0,
) -> None:
    meta = params.meta
    lines = [CKPT_MAGIC, _meta_line(meta)]
    for name in params.section_names():
        lines.append(f"section {name}")
        lines.extend(_format_values(params.view(name).reshape(-1)))
    lines.append("section adam.step")
    lines.append(str(opt_state.step))
    lines.append("section adam.m")
    lines.extend(_format_values(opt_state.m))
    lines.append("section adam.v")
    lines.extend(_format_values(opt_state.v))
    lines.append("section epochs_done")
    lines.append(str(epochs_done))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, AdamState, int]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0] != CKPT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic, expected {CKPT_MAGIC!r}")
    if len(lines) < 2:
        raise CheckpointError("checkpoint truncated: missing meta line")
    meta = _parse_meta_line(lines[1])

    sections: dict[str, list[str]] = {}
    current: Optional[str] = None
    for line in lines[2:]:
        if line.startswith("section "):
            current = line[len("section "):].strip()
            if current in sections:
                raise CheckpointError(f"duplicate section {current!r}")
            sections[current] = []
        elif current is None:
            raise CheckpointError("values before any section header")
        else:
            sections[current].extend(line.split())

    probe = ModelParams(meta, np.zeros(flat_size_for(meta)))
    data = np.empty(probe.flat_size)
    for name in probe.section_names():
        offset, shape = probe.sections[name]
        size = int(np.prod(shape)) if shape else 1
        vals = _take_floats(sections, name, size)
        data[offset : offset + size] = vals
    params = ModelParams(meta, data)

    step_tok = _take_raw(sections, "adam.step", 1)[0]
    m = _take_floats(sections, "adam.m", params.flat_size)
    v = _take_floats(sections, "adam.v", params.flat_size)
    epochs_done = int(_take_raw(sections, "epochs_done", 1)[0])
    expected = set(probe.section_names()) | {"adam.step", "adam.m", "adam.v", "epochs_done"}
    unknown = set(sections) - expected
    if unknown:
        raise CheckpointError(f"unexpected sections: {sorted(unknown)}")
    state = AdamState(m=m, v=v, step=int(step_tok))
    return params, state, epochs_done


def flat_size_for(meta) -> int:
    return model_mod.flat_section_sizes(meta)


def _meta_line(meta) -> str:
    cards = ",".join(str(c) for c in meta.cardinalities)
    mlp = ",".join(str(h) for h in meta.mlp_hidden)
    return (
        f"backbone={meta.backbone} cards={cards} embed_dim={meta.embed_dim} "
        f"mlp={mlp} groups={meta.n_groups} adgate_hidden={meta.adgate_hidden} "
        f"gate={int(meta.has_gate)} mtl={int(meta.has_mtl)}"
    )


def _parse_meta_line(line: str):
    try:
        kv = dict(tok.split("=", 1) for tok in line.split())
        return model_mod.ModelMeta(
            backbone=kv["backbone"],
            cardinalities=tuple(int(c) for c in kv["cards"].split(",") if c),
            embed_dim=int(kv["embed_dim"]),
            mlp_hidden=tuple(int(h) for h in kv["mlp"].split(",") if h),
            n_groups=int(kv["groups"]),
            adgate_hidden=int(kv["adgate_hidden"]),
            has_gate=bool(int(kv["gate"])),
            has_mtl=bool(int(kv["mtl"])),
        )
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"bad checkpoint meta line: {e}") from None


def _format_values(flat: np.ndarray) -> list[str]:
    toks = [f"{v:.17g}" for v in flat]
    return [
        " ".join(toks[i : i + _VALUES_PER_LINE])
        for i in range(0, len(toks), _VALUES_PER_LINE)
    ] or [""]


def _take_floats(sections, name, size) -> np.ndarray:
    toks = _take_raw(sections, name, size)
    try:
        return np.array([float(t) for t in toks], dtype=np.float64)
    except ValueError as e:
        raise CheckpointError(f"section {name!r}: {e}") from None


def _take_raw(sections, name, size) -> list[str]:
    if name not in sections:
        raise CheckpointError(f"checkpoint truncated: missing section {name!r}")
    toks = [t for t in sections[name] if t]
    if len(toks) != size:
        raise CheckpointError(
            f"section {name!r}: expected {size} values, found {len(toks)}"
        )
    return toks
