"""Experiment orchestration: single runs, ablation grids, alpha sweeps.

Grid cells are independent training runs over a shared corpus; they may run
in parallel processes (capped by CLSD_THREADS) and results are always
assembled in deterministic grid order.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Optional

import numpy as np

from . import corpus as corpus_mod
from . import metrics as metrics_mod
from . import model as model_mod
from . import trainer as trainer_mod
from .errors import ClsdError, ConfigError
from .objective import LossConfig
from .trainer import TrainConfig

GRID_VARIANTS = ("ori", "global", "clsd", "focal", "dt_reweight", "mtl",
                 "global_only", "local_only")
DEFAULT_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0, 1.25)
DEFAULT_SEEDS = (1, 2, 3, 4, 5)


@dataclass(frozen=True)
class ExperimentGrid:
    backbones: tuple[str, ...] = ("deepfm",)
    variants: tuple[str, ...] = ("ori", "clsd")
    alphas: tuple[float, ...] = (1.0,)
    seeds: tuple[int, ...] = DEFAULT_SEEDS

    def __post_init__(self):
        if not (self.backbones and self.variants and self.alphas and self.seeds):
            raise ConfigError("grid axes must be nonempty")
        for b in self.backbones:
            if b not in model_mod.BACKBONES:
                raise ConfigError(f"unknown backbone {b!r}")
        for v in self.variants:
            if v not in GRID_VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be distinct")

    def cells(self) -> list[tuple[str, str, float, int]]:
        return list(product(self.backbones, self.variants, self.alphas, self.seeds))


def variant_loss_config(variant: str, alpha: float, base: LossConfig) -> LossConfig:
    """Map a grid variant name onto a concrete loss configuration."""
    if variant == "ori":
        return replace(base, variant="ori")
    if variant in ("global", "global_only"):
        return replace(base, variant="global")
    if variant == "local_only":
        return replace(base, variant="clsd", alpha=0.0)
    if variant == "clsd":
        return replace(base, variant="clsd", alpha=alpha)
    if variant in ("focal", "dt_reweight", "mtl"):
        return replace(base, variant=variant)
    raise ConfigError(f"unknown variant {variant!r}")


@dataclass(frozen=True)
class RunSettings:
    """Shared per-run knobs for grid cells and single runs."""

    epochs: int = 6
    learning_rate: float = 0.003
    batch_size: int = 256
    warmup_fraction: float = 1.0 / 3.0
    focal_gamma: float = 2.0
    dt_weight_cap: float = 3.0
    mtl_weight: float = 0.3
    embed_dim: int = model_mod.EMBED_DIM
    mlp_hidden: tuple[int, ...] = model_mod.MLP_HIDDEN
    adgate_hidden: int = model_mod.ADGATE_HIDDEN

    def base_loss(self) -> LossConfig:
        return LossConfig(
            warmup_fraction=self.warmup_fraction,
            focal_gamma=self.focal_gamma,
            dt_weight_cap=self.dt_weight_cap,
            mtl_weight=self.mtl_weight,
        )

    def train_config(self, loss: LossConfig, seed: int) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            seed=seed,
            loss=loss,
        )


def train_once(
    train_corpus,
    test_corpus,
    backbone: str,
    loss: LossConfig,
    settings: RunSettings,
    seed: int,
):
    """Init + train one model; returns (params, report)."""
    meta = model_mod.ModelMeta.for_schema(
        backbone,
        train_corpus.schema,
        embed_dim=settings.embed_dim,
        mlp_hidden=settings.mlp_hidden,
        adgate_hidden=settings.adgate_hidden,
    )
    params = model_mod.init_params(meta, seed)
    config = settings.train_config(loss, seed)
    return trainer_mod.train(train_corpus, params, config, test_corpus=test_corpus)


def run_single(
    train_path: str | Path,
    test_path: Optional[str | Path],
    backbone: str,
    loss: LossConfig,
    settings: RunSettings,
    seed: int,
    out_dir: str | Path,
) -> dict:
    """One full run: train, write report.csv + checkpoint.txt, return summary."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_corpus = corpus_mod.read(train_path, split_tag="train")
    test_corpus = corpus_mod.read(test_path, split_tag="test") if test_path else None

    meta = model_mod.ModelMeta.for_schema(
        backbone,
        train_corpus.schema,
        embed_dim=settings.embed_dim,
        mlp_hidden=settings.mlp_hidden,
        adgate_hidden=settings.adgate_hidden,
    )
    params = model_mod.init_params(meta, seed)
    config = settings.train_config(loss, seed)
    state = trainer_mod.AdamState.fresh(params.flat_size)
    params, report = trainer_mod.train(
        train_corpus, params, config, test_corpus=test_corpus, opt_state=state
    )
    report.to_csv(out_dir / "report.csv")
    trainer_mod.save_checkpoint(params, state, out_dir / "checkpoint.txt", config.epochs)
    return {
        "backbone": backbone,
        "variant": loss.variant,
        "alpha": loss.alpha,
        "seed": seed,
        "test_auc": report.final_test_auc,
        "test_logloss": report.final_test_logloss,
        "checkpoint": str(out_dir / "checkpoint.txt"),
        "report": str(out_dir / "report.csv"),
    }


# Per-process corpus cache so pool workers parse each file once.
_CORPUS_CACHE: dict[tuple[str, str], object] = {}


def _load_cached(path: str, split: str):
    key = (path, split)
    if key not in _CORPUS_CACHE:
        _CORPUS_CACHE[key] = corpus_mod.read(path, split_tag=split)
    return _CORPUS_CACHE[key]


def _run_cell(spec: dict) -> dict:
    backbone, variant, alpha, seed = spec["cell"]
    row = {
        "backbone": backbone,
        "variant": variant,
        "alpha": alpha,
        "seed": seed,
        "status": "ok",
        "test_auc": float("nan"),
        "test_logloss": float("nan"),
    }
    try:
        settings: RunSettings = spec["settings"]
        loss = variant_loss_config(variant, alpha, settings.base_loss())
        train_corpus = _load_cached(spec["train_path"], "train")
        test_corpus = _load_cached(spec["test_path"], "test")
        _, report = train_once(train_corpus, test_corpus, backbone, loss, settings, seed)
        row["test_auc"] = report.final_test_auc
        row["test_logloss"] = report.final_test_logloss
    except ClsdError as e:
        row["status"] = f"error: {e}"
    return row


def max_workers() -> int:
    env = os.environ.get("CLSD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError("CLSD_THREADS must be an integer") from None
    return max(1, os.cpu_count() or 1)


def run_grid(
    grid: ExperimentGrid,
    train_path: str | Path,
    test_path: str | Path,
    settings: RunSettings,
    out_dir: str | Path,
) -> tuple[list[dict], list[dict]]:
    """Run every cell; write results.csv (one row per cell, grid order) and
    summary.csv (per-cell-group mean/std plus paired t-test vs ori)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells = grid.cells()
    specs = [
        {
            "cell": cell,
            "train_path": str(train_path),
            "test_path": str(test_path),
            "settings": settings,
        }
        for cell in cells
    ]
    workers = min(max_workers(), len(specs))
    if workers <= 1:
        rows = [_run_cell(s) for s in specs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_cell, specs))

    summary = summarize(grid, rows)
    _write_results_csv(rows, out_dir / "results.csv")
    _write_summary_csv(summary, out_dir / "summary.csv")
    return rows, summary


def summarize(grid: ExperimentGrid, rows: list[dict]) -> list[dict]:
    by_cell = {}
    for r in rows:
        by_cell.setdefault((r["backbone"], r["variant"], r["alpha"]), []).append(r)

    def seed_aucs(group_rows):
        return {r["seed"]: r["test_auc"] for r in group_rows if r["status"] == "ok"}

    summary = []
    for backbone, variant, alpha in sorted(
        by_cell, key=lambda k: (k[0], grid.variants.index(k[1]), k[2])
    ):
        group_rows = by_cell[(backbone, variant, alpha)]
        aucs = seed_aucs(group_rows)
        vals = np.array(sorted_values(aucs))
        entry = {
            "backbone": backbone,
            "variant": variant,
            "alpha": alpha,
            "n_seeds": len(vals),
            "auc_mean": float(vals.mean()) if len(vals) else float("nan"),
            "auc_std": float(vals.std(ddof=1)) if len(vals) > 1 else float("nan"),
            "p_vs_ori": float("nan"),
        }
        baseline = _baseline_rows(by_cell, backbone, alpha)
        if variant != "ori" and baseline is not None:
            base_aucs = seed_aucs(baseline)
            shared = sorted(set(aucs) & set(base_aucs))
            if len(shared) >= 2:
                entry["p_vs_ori"] = metrics_mod.paired_ttest(
                    [aucs[s] for s in shared], [base_aucs[s] for s in shared]
                )
        summary.append(entry)
    return summary


def sorted_values(d: dict) -> list:
    return [d[k] for k in sorted(d)]


def _baseline_rows(by_cell, backbone, alpha):
    if (backbone, "ori", alpha) in by_cell:
        return by_cell[(backbone, "ori", alpha)]
    candidates = sorted(a for (b, v, a) in by_cell if b == backbone and v == "ori")
    if candidates:
        return by_cell[(backbone, "ori", candidates[0])]
    return None


def _write_results_csv(rows: list[dict], path: Path) -> None:
    lines = ["backbone,variant,alpha,seed,status,test_auc,test_logloss"]
    for r in rows:
        lines.append(
            f"{r['backbone']},{r['variant']},{_fmt_alpha(r['alpha'])},{r['seed']},"
            f"{_csv_escape(r['status'])},{_fmt(r['test_auc'])},{_fmt(r['test_logloss'])}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_summary_csv(summary: list[dict], path: Path) -> None:
    lines = ["backbone,variant,alpha,n_seeds,auc_mean,auc_std,p_vs_ori"]
    for s in summary:
        lines.append(
            f"{s['backbone']},{s['variant']},{_fmt_alpha(s['alpha'])},{s['n_seeds']},"
            f"{_fmt(s['auc_mean'])},{_fmt(s['auc_std'])},{_fmt_p(s['p_vs_ori'])}"
        )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(v: float) -> str:
    return "-" if not np.isfinite(v) else f"{v:.6f}"


def _fmt_p(v: float) -> str:
    return "-" if not np.isfinite(v) else f"{v:.4e}"


def _fmt_alpha(v: float) -> str:
    return f"{v:g}"


def _csv_escape(s: str) -> str:
    return s.replace(",", ";").replace("\n", " ")


def parse_grid_file(path: str | Path) -> dict:
    """Flat key=value config; '#' starts a comment."""
    known = {
        "corpus", "train", "test", "backbones", "variants", "alphas", "seeds",
        "epochs", "lr", "batch", "warmup_frac", "out_dir",
        "focal_gamma", "dt_weight_cap", "mtl_weight",
    }
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"grid file line {lineno}: expected key=value")
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"grid file line {lineno}: unknown key {key!r}")
        out[key] = val
    return out


def resolve_corpus_paths(
    corpus: Optional[str], train: Optional[str], test: Optional[str]
) -> tuple[str, Optional[str]]:
    """Accept either a directory holding train.txt/test.txt or explicit files."""
    if corpus:
        p = Path(corpus)
        if p.is_dir():
            train_p, test_p = p / "train.txt", p / "test.txt"
            return str(train_p), str(test_p) if test_p.exists() else None
        return str(p), test
    if not train:
        raise ConfigError("no corpus given")
    return train, test
