"""Synthetic multi-field click corpora with ground-truth click confidence.

A corpus is a time-ordered list of (user, item) impressions.  Each record
carries sparse categorical features, a click label, a dwell time, the user's
group id, and the latent confidence that generated it.  Clicks are drawn from
a latent user-item affinity plus a group-dependent additive bias; a fraction
of items is "clickbait": inflated click probability, capped confidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, CorpusFormatError, SchemaError

FILE_MAGIC = "CLSDCORPUS v1"

ROLES = ("user_id", "item_id", "user_group", "item_attr", "context")

# Generator texture constants (tuned once on pilot runs, then frozen).
LATENT_DIM = 8
FACTOR_SCALE = 0.60          # N(0, s^2) factors -> affinity logit sd ~ 1.0
BASE_CLICK_RATE = 0.06       # casual-click floor, label noise by construction
CTR_GAIN = 0.50              # scales affinity into click probability
BAIT_BOOST = 0.32            # added click probability on clickbait items
BAIT_CONFIDENCE_CAP = 0.2
CLICK_FLOOR, CLICK_CEIL = 0.005, 0.985
ITEM_ATTR_CARD = 12
CONTEXT_CARD = 4
CONTENT_LEN_LOC, CONTENT_LEN_SCALE = math.log(35.0), 0.55
DWELL_NOISE_SCALE = 0.35


@dataclass(frozen=True)
class FieldSchema:
    """Shape of the sparse feature vector: one cardinality and role per field."""

    cardinalities: tuple[int, ...]
    roles: tuple[str, ...]

    def __post_init__(self):
        if len(self.cardinalities) != len(self.roles):
            raise SchemaError("cardinalities and roles must have equal length")
        if any(c <= 0 for c in self.cardinalities):
            raise SchemaError("every field cardinality must be positive")
        for r in self.roles:
            if r not in ROLES:
                raise SchemaError(f"unknown field role {r!r}")
        if self.roles.count("user_id") != 1:
            raise SchemaError("schema needs exactly one user_id field")
        if self.roles.count("item_id") != 1:
            raise SchemaError("schema needs exactly one item_id field")
        if self.roles.count("user_group") < 1:
            raise SchemaError("schema needs at least one user_group field")

    @property
    def field_count(self) -> int:
        return len(self.cardinalities)

    @property
    def total_features(self) -> int:
        return int(sum(self.cardinalities))

    @property
    def group_cardinality(self) -> int:
        return self.cardinalities[self.roles.index("user_group")]


@dataclass(frozen=True)
class SampleRecord:
    """One impression: features, click label, dwell, group, latent confidence."""

    feature_ids: tuple[int, ...]
    label: int
    dwell_time: float
    group_id: int
    latent_confidence: float | None = None


class Corpus:
    """Immutable, array-backed record store conforming to one FieldSchema."""

    def __init__(
        self,
        schema: FieldSchema,
        feature_ids: np.ndarray,
        labels: np.ndarray,
        dwell_times: np.ndarray,
        group_ids: np.ndarray,
        confidences: np.ndarray,
        split_tag: str = "train",
    ):
        n = len(labels)
        self.schema = schema
        self.feature_ids = np.ascontiguousarray(feature_ids, dtype=np.int64)
        self.labels = np.ascontiguousarray(labels, dtype=np.float64)
        self.dwell_times = np.ascontiguousarray(dwell_times, dtype=np.float64)
        self.group_ids = np.ascontiguousarray(group_ids, dtype=np.int64)
        # NaN encodes "latent confidence absent" for that record.
        self.confidences = np.ascontiguousarray(confidences, dtype=np.float64)
        self.split_tag = split_tag
        if self.feature_ids.shape != (n, schema.field_count):
            raise SchemaError("feature id array does not match schema field count")
        for arr in (self.dwell_times, self.group_ids, self.confidences):
            if len(arr) != n:
                raise SchemaError("column lengths disagree")
        self._validate()

    def _validate(self):
        cards = np.asarray(self.schema.cardinalities, dtype=np.int64)
        if self.feature_ids.size and (
            (self.feature_ids < 0).any() or (self.feature_ids >= cards[None, :]).any()
        ):
            raise SchemaError("feature id out of field cardinality")
        bad_label = ~np.isin(self.labels, (0.0, 1.0))
        if bad_label.any():
            raise SchemaError("labels must be 0 or 1")
        if (self.dwell_times < 0).any():
            raise SchemaError("dwell times must be non-negative")
        if ((self.labels == 0) & (self.dwell_times != 0)).any():
            raise SchemaError("unclicked records must have zero dwell time")
        known = self.confidences[~np.isnan(self.confidences)]
        if known.size and ((known < 0) | (known > 1)).any():
            raise SchemaError("latent confidence must lie in [0, 1]")

    @classmethod
    def from_records(
        cls, schema: FieldSchema, records: list[SampleRecord], split_tag: str = "train"
    ) -> "Corpus":
        n, k = len(records), schema.field_count
        fids = np.zeros((n, k), dtype=np.int64)
        labels = np.zeros(n)
        dwell = np.zeros(n)
        groups = np.zeros(n, dtype=np.int64)
        conf = np.full(n, np.nan)
        for i, r in enumerate(records):
            fids[i] = r.feature_ids
            labels[i] = r.label
            dwell[i] = r.dwell_time
            groups[i] = r.group_id
            if r.latent_confidence is not None:
                conf[i] = r.latent_confidence
        return cls(schema, fids, labels, dwell, groups, conf, split_tag)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> SampleRecord:
        c = self.confidences[i]
        return SampleRecord(
            feature_ids=tuple(int(v) for v in self.feature_ids[i]),
            label=int(self.labels[i]),
            dwell_time=float(self.dwell_times[i]),
            group_id=int(self.group_ids[i]),
            latent_confidence=None if np.isnan(c) else float(c),
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Corpus):
            return NotImplemented
        conf_equal = np.array_equal(self.confidences, other.confidences, equal_nan=True)
        return (
            self.schema == other.schema
            and np.array_equal(self.feature_ids, other.feature_ids)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.dwell_times, other.dwell_times)
            and np.array_equal(self.group_ids, other.group_ids)
            and conf_equal
        )

    @property
    def ctr(self) -> float:
        return float(self.labels.mean()) if len(self) else 0.0


@dataclass(frozen=True)
class Batch:
    """Read-only view over a subset of corpus rows."""

    feature_ids: np.ndarray   # (B, k) int64
    labels: np.ndarray        # (B,) float64 in {0, 1}
    dwell_times: np.ndarray   # (B,) float64
    group_ids: np.ndarray     # (B,) int64
    confidences: np.ndarray   # (B,) float64, NaN where absent

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class GenConfig:
    """Knobs for the synthetic corpus generator."""

    users: int = 2000
    items: int = 1000
    groups: int = 8
    records: int = 120_000
    clickbait_rate: float = 0.2
    group_ctr_slope: float = 0.3
    seed: int = 0
    test_fraction: float = 1.0 / 6.0

    def __post_init__(self):
        for name in ("users", "items", "groups", "records"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.clickbait_rate <= 1.0:
            raise ConfigError("clickbait_rate must lie in [0, 1]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in [0, 1)")
        if self.records < self.users:
            raise ConfigError("records < users: insufficient coverage per user")


def default_schema(config: GenConfig) -> FieldSchema:
    return FieldSchema(
        cardinalities=(config.users, config.items, config.groups, ITEM_ATTR_CARD, CONTEXT_CARD),
        roles=("user_id", "item_id", "user_group", "item_attr", "context"),
    )


def generate(config: GenConfig) -> tuple[Corpus, Corpus]:
    """Generate (train, test) corpora; test records come strictly after train.

    Deterministic byte-for-byte for a fixed config.  Independent RNG streams
    per ingredient keep e.g. a clickbait_rate change from perturbing the
    latent factors or the interaction stream.
    """
    schema = default_schema(config)
    streams = np.random.SeedSequence(config.seed).spawn(6)
    rng_factors = np.random.default_rng(streams[0])
    rng_groups = np.random.default_rng(streams[1])
    rng_items = np.random.default_rng(streams[2])
    rng_inter = np.random.default_rng(streams[3])
    rng_click = np.random.default_rng(streams[4])
    rng_dwell = np.random.default_rng(streams[5])

    user_factors = rng_factors.normal(0.0, FACTOR_SCALE, size=(config.users, LATENT_DIM))
    item_factors = rng_factors.normal(0.0, FACTOR_SCALE, size=(config.items, LATENT_DIM))
    user_group = rng_groups.integers(0, config.groups, size=config.users)

    bait_mask = rng_items.random(config.items) < config.clickbait_rate
    item_attr = rng_items.integers(0, ITEM_ATTR_CARD, size=config.items)
    content_len = np.exp(rng_items.normal(CONTENT_LEN_LOC, CONTENT_LEN_SCALE, size=config.items))

    n = config.records
    u = rng_inter.integers(0, config.users, size=n)
    i = rng_inter.integers(0, config.items, size=n)
    ctx = rng_inter.integers(0, CONTEXT_CARD, size=n)

    affinity = _sigmoid(np.einsum("nd,nd->n", user_factors[u], item_factors[i]))
    g = user_group[u]
    if config.groups > 1:
        group_bias = config.group_ctr_slope * (g / (config.groups - 1) - 0.5)
    else:
        group_bias = np.zeros(n)
    bait = bait_mask[i]

    click_prob = np.clip(
        BASE_CLICK_RATE + CTR_GAIN * affinity + group_bias + BAIT_BOOST * bait,
        CLICK_FLOOR,
        CLICK_CEIL,
    )
    labels = (rng_click.random(n) < click_prob).astype(np.float64)

    confidence = np.where(bait, np.minimum(affinity, BAIT_CONFIDENCE_CAP), affinity)
    confidence = np.round(confidence, 6)

    dwell_noise = np.exp(rng_dwell.normal(0.0, DWELL_NOISE_SCALE, size=n))
    dwell = np.where(labels == 1.0, np.round(content_len[i] * confidence * dwell_noise, 3), 0.0)

    fids = np.stack([u, i, g, item_attr[i], ctx], axis=1)

    n_test = int(round(n * config.test_fraction))
    n_train = n - n_test
    train = Corpus(
        schema, fids[:n_train], labels[:n_train], dwell[:n_train],
        g[:n_train], confidence[:n_train], split_tag="train",
    )
    test = Corpus(
        schema, fids[n_train:], labels[n_train:], dwell[n_train:],
        g[n_train:], confidence[n_train:], split_tag="test",
    )
    return train, test


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def write(corpus: Corpus, path: str | Path) -> None:
    """Serialize to the line-oriented text format (fixed float precision)."""
    path = Path(path)
    lines = [
        FILE_MAGIC,
        f"fields {corpus.schema.field_count}",
        " ".join(str(c) for c in corpus.schema.cardinalities),
        " ".join(corpus.schema.roles),
    ]
    conf = corpus.confidences
    for idx in range(len(corpus)):
        c = conf[idx]
        conf_tok = "-" if np.isnan(c) else f"{c:.6f}"
        feats = " ".join(str(v) for v in corpus.feature_ids[idx])
        lines.append(
            f"{int(corpus.labels[idx])} {corpus.dwell_times[idx]:.3f} "
            f"{int(corpus.group_ids[idx])} {conf_tok} {feats}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read(path: str | Path, split_tag: str = "train") -> Corpus:
    """Parse a corpus file; raises CorpusFormatError with the offending line."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    lines = text.splitlines()
    if len(lines) < 4:
        raise CorpusFormatError("file too short for header", line=max(1, len(lines)))
    if lines[0] != FILE_MAGIC:
        raise CorpusFormatError(f"bad magic {lines[0]!r}, expected {FILE_MAGIC!r}", line=1)
    head = lines[1].split()
    if len(head) != 2 or head[0] != "fields" or not head[1].isdigit():
        raise CorpusFormatError("expected 'fields <k>'", line=2)
    k = int(head[1])
    try:
        cards = tuple(int(t) for t in lines[2].split())
    except ValueError:
        raise CorpusFormatError("cardinalities must be integers", line=3) from None
    roles = tuple(lines[3].split())
    if len(cards) != k:
        raise CorpusFormatError(f"expected {k} cardinalities, got {len(cards)}", line=3)
    if len(roles) != k:
        raise CorpusFormatError(f"expected {k} roles, got {len(roles)}", line=4)
    try:
        schema = FieldSchema(cards, roles)
    except SchemaError as e:
        raise CorpusFormatError(str(e), line=3) from None

    body = lines[4:]
    n = len(body)
    fids = np.zeros((n, k), dtype=np.int64)
    labels = np.zeros(n)
    dwell = np.zeros(n)
    groups = np.zeros(n, dtype=np.int64)
    conf = np.full(n, np.nan)
    for row, line in enumerate(body):
        lineno = row + 5
        toks = line.split()
        if len(toks) != 4 + k:
            raise CorpusFormatError(
                f"expected {4 + k} tokens, got {len(toks)}", line=lineno
            )
        try:
            labels[row] = int(toks[0])
            dwell[row] = float(toks[1])
            groups[row] = int(toks[2])
            if toks[3] != "-":
                conf[row] = float(toks[3])
            fids[row] = [int(t) for t in toks[4:]]
        except ValueError as e:
            raise CorpusFormatError(f"unparseable field: {e}", line=lineno) from None
    corpus = Corpus(schema, fids, labels, dwell, groups, conf, split_tag=split_tag)
    return corpus


def batches(
    corpus: Corpus,
    batch_size: int = 256,
    shuffle_seed: int | None = None,
    epoch: int = 0,
) -> Iterator[Batch]:
    """Yield every record exactly once; order is a pure function of
    (shuffle_seed, epoch), or sequential when shuffle_seed is None."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = len(corpus)
    if shuffle_seed is None:
        order = np.arange(n)
    else:
        rng = np.random.default_rng(np.random.SeedSequence([shuffle_seed & 0xFFFFFFFFFFFFFFFF, epoch]))
        order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(
            feature_ids=corpus.feature_ids[idx],
            labels=corpus.labels[idx],
            dwell_times=corpus.dwell_times[idx],
            group_ids=corpus.group_ids[idx],
            confidences=corpus.confidences[idx],
        )


def whole_batch(corpus: Corpus) -> Batch:
    return Batch(
        feature_ids=corpus.feature_ids,
        labels=corpus.labels,
        dwell_times=corpus.dwell_times,
        group_ids=corpus.group_ids,
        confidences=corpus.confidences,
    )
