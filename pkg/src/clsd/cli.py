"""Command-line entry points (clsd gen-data / train / eval / ablate /
sweep-alpha / analyze-groups)."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import metrics as metrics_mod
from . import runner as runner_mod
from . import trainer as trainer_mod
from .corpus import GenConfig
from .errors import ClsdError
from .runner import ExperimentGrid, RunSettings

LOSS_CHOICES = ("ori", "global", "clsd", "focal", "dt-reweight", "mtl")


def _loss_name(cli_name: str) -> str:
    return cli_name.replace("-", "_")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clsd",
        description="Desk-scale CTR training lab with confidence-weighted losses.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic click corpus")
    g.add_argument("--users", type=int, default=2000)
    g.add_argument("--items", type=int, default=1000)
    g.add_argument("--groups", type=int, default=8)
    g.add_argument("--records", type=int, default=120_000)
    g.add_argument("--clickbait-rate", type=float, default=0.2)
    g.add_argument("--group-ctr-slope", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-frac", type=float, default=1.0 / 6.0)
    g.add_argument("--out", required=True, help="output directory (train.txt, test.txt)")

    t = sub.add_parser("train", help="train one model")
    _add_corpus_args(t)
    t.add_argument("--backbone", choices=("lr", "fm", "deepfm"), default="deepfm")
    t.add_argument("--loss", choices=LOSS_CHOICES, default="ori")
    t.add_argument("--alpha", type=float, default=1.0)
    t.add_argument("--warmup-frac", type=float, default=1.0 / 3.0)
    t.add_argument("--epochs", type=int, default=6)
    t.add_argument("--lr", type=float, default=0.003)
    t.add_argument("--batch", type=int, default=256)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--focal-gamma", type=float, default=2.0)
    t.add_argument("--dt-cap", type=float, default=3.0)
    t.add_argument("--mtl-weight", type=float, default=0.3)
    t.add_argument("--out-dir", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    e.add_argument("--corpus", required=True)
    e.add_argument("--checkpoint", required=True)

    a = sub.add_parser("ablate", help="run an experiment grid from a config file")
    a.add_argument("--grid-file", required=True)

    s = sub.add_parser("sweep-alpha", help="sweep the global-weight alpha for clsd")
    _add_corpus_args(s)
    s.add_argument("--backbone", choices=("lr", "fm", "deepfm"), default="deepfm")
    s.add_argument("--alphas", default="0,0.25,0.5,0.75,1.0,1.25")
    s.add_argument("--seeds", default="1,2,3,4,5")
    s.add_argument("--warmup-frac", type=float, default=1.0 / 3.0)
    s.add_argument("--epochs", type=int, default=6)
    s.add_argument("--lr", type=float, default=0.003)
    s.add_argument("--batch", type=int, default=256)
    s.add_argument("--out-dir", required=True)

    ag = sub.add_parser("analyze-groups", help="per-group CTR and score stats")
    ag.add_argument("--corpus", required=True)
    ag.add_argument("--checkpoint", required=True)
    ag.add_argument("--out", required=True)

    return parser


def _add_corpus_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--corpus", required=True,
                   help="corpus directory (train.txt/test.txt) or a train file")
    p.add_argument("--test-corpus", default=None, help="explicit test corpus file")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ClsdError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def _dispatch(args) -> int:
    if args.command == "gen-data":
        return _cmd_gen_data(args)
    if args.command == "train":
        return _cmd_train(args)
    if args.command == "eval":
        return _cmd_eval(args)
    if args.command == "ablate":
        return _cmd_ablate(args)
    if args.command == "sweep-alpha":
        return _cmd_sweep_alpha(args)
    if args.command == "analyze-groups":
        return _cmd_analyze_groups(args)
    raise AssertionError(f"unhandled command {args.command}")


def _cmd_gen_data(args) -> int:
    config = GenConfig(
        users=args.users,
        items=args.items,
        groups=args.groups,
        records=args.records,
        clickbait_rate=args.clickbait_rate,
        group_ctr_slope=args.group_ctr_slope,
        seed=args.seed,
        test_fraction=args.test_frac,
    )
    train_c, test_c = corpus_mod.generate(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus_mod.write(train_c, out / "train.txt")
    corpus_mod.write(test_c, out / "test.txt")
    print(f"wrote {out / 'train.txt'} ({len(train_c)} records, ctr={train_c.ctr:.4f})")
    print(f"wrote {out / 'test.txt'} ({len(test_c)} records, ctr={test_c.ctr:.4f})")
    return 0


def _settings_from(args) -> RunSettings:
    return RunSettings(
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch,
        warmup_fraction=args.warmup_frac,
        focal_gamma=getattr(args, "focal_gamma", 2.0),
        dt_weight_cap=getattr(args, "dt_cap", 3.0),
        mtl_weight=getattr(args, "mtl_weight", 0.3),
    )


def _cmd_train(args) -> int:
    train_path, test_path = runner_mod.resolve_corpus_paths(
        args.corpus, None, args.test_corpus
    )
    settings = _settings_from(args)
    loss = runner_mod.variant_loss_config(
        _loss_name(args.loss), args.alpha, settings.base_loss()
    )
    summary = runner_mod.run_single(
        train_path, test_path, args.backbone, loss, settings, args.seed, args.out_dir
    )
    auc = summary["test_auc"]
    auc_txt = f"{auc:.6f}" if auc == auc else "-"
    print(
        f"trained backbone={summary['backbone']} loss={summary['variant']} "
        f"alpha={summary['alpha']:g} seed={summary['seed']} test_auc={auc_txt}"
    )
    print(f"checkpoint: {summary['checkpoint']}")
    print(f"report: {summary['report']}")
    return 0


def _cmd_eval(args) -> int:
    corpus = corpus_mod.read(args.corpus, split_tag="test")
    params, _, _ = trainer_mod.load_checkpoint(args.checkpoint)
    scores = trainer_mod.predict_corpus(params, corpus)
    auc = metrics_mod.auc(scores, corpus.labels)
    ll = metrics_mod.logloss(scores, corpus.labels)
    print(f"n={len(corpus)} auc={auc:.6f} logloss={ll:.6f}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = runner_mod.parse_grid_file(args.grid_file)
    train_path, test_path = runner_mod.resolve_corpus_paths(
        cfg.get("corpus"), cfg.get("train"), cfg.get("test")
    )
    if test_path is None:
        raise ClsdError("grid needs a test corpus (corpus dir or test= key)")
    grid = ExperimentGrid(
        backbones=_split_str(cfg.get("backbones", "deepfm")),
        variants=_split_str(cfg.get("variants", "ori,clsd")),
        alphas=_split_floats(cfg.get("alphas", "1.0")),
        seeds=_split_ints(cfg.get("seeds", "1,2,3,4,5")),
    )
    settings = RunSettings(
        epochs=int(cfg.get("epochs", 6)),
        learning_rate=float(cfg.get("lr", 0.003)),
        batch_size=int(cfg.get("batch", 256)),
        warmup_fraction=float(cfg.get("warmup_frac", 1.0 / 3.0)),
        focal_gamma=float(cfg.get("focal_gamma", 2.0)),
        dt_weight_cap=float(cfg.get("dt_weight_cap", 3.0)),
        mtl_weight=float(cfg.get("mtl_weight", 0.3)),
    )
    out_dir = Path(cfg.get("out_dir", "grid_out"))
    rows, summary = runner_mod.run_grid(grid, train_path, test_path, settings, out_dir)
    _print_grid_outcome(rows, summary, out_dir)
    return 0


def _cmd_sweep_alpha(args) -> int:
    train_path, test_path = runner_mod.resolve_corpus_paths(
        args.corpus, None, args.test_corpus
    )
    if test_path is None:
        raise ClsdError("sweep needs a test corpus")
    grid = ExperimentGrid(
        backbones=(args.backbone,),
        variants=("clsd",),
        alphas=_split_floats(args.alphas),
        seeds=_split_ints(args.seeds),
    )
    settings = _settings_from(args)
    rows, summary = runner_mod.run_grid(grid, train_path, test_path, settings, args.out_dir)
    _print_grid_outcome(rows, summary, Path(args.out_dir))
    return 0


def _cmd_analyze_groups(args) -> int:
    corpus = corpus_mod.read(args.corpus)
    params, _, _ = trainer_mod.load_checkpoint(args.checkpoint)
    stats = metrics_mod.group_stats(corpus, params)
    stats.to_csv(args.out)
    print(f"wrote {args.out} ({len(stats.rows)} groups)")
    return 0


def _print_grid_outcome(rows, summary, out_dir: Path) -> None:
    ok = sum(1 for r in rows if r["status"] == "ok")
    print(f"grid done: {ok}/{len(rows)} cells ok")
    for s in summary:
        mean = s["auc_mean"]
        mean_txt = f"{mean:.6f}" if mean == mean else "-"
        print(
            f"  {s['backbone']} {s['variant']} alpha={s['alpha']:g}: "
            f"auc_mean={mean_txt} (n={s['n_seeds']})"
        )
    print(f"results: {out_dir / 'results.csv'}")
    print(f"summary: {out_dir / 'summary.csv'}")


def _split_str(s: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in s.split(",") if t.strip())


def _split_floats(s) -> tuple[float, ...]:
    if isinstance(s, (tuple, list)):
        return tuple(float(v) for v in s)
    return tuple(float(t) for t in s.split(",") if t.strip())


def _split_ints(s) -> tuple[int, ...]:
    if isinstance(s, (tuple, list)):
        return tuple(int(v) for v in s)
    return tuple(int(t) for t in s.split(",") if t.strip())


if __name__ == "__main__":
    sys.exit(main())
