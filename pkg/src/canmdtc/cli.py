"""Command line: ``python -m canmdtc <subcommand> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .config import KEYS, SYNTHETIC, ConfigError, RunConfig, dump_config, load_config, parse_value
from .data import (
    DataFormatError, DomainDataset, build_vocab, load_bow_tsv, load_embeddings, load_text_dir, read_text_dir,
    save_bow_tsv, synth_domains,
)
from .networks import ContractError, load_checkpoint, save_checkpoint
from .theory import oracle_report
from .trainer import (
    MetricsWriter, TrainingError, cross_validate, evaluate, holdout, lambda_sweep, multi_source_adapt,
    pooled_baseline, run_mdtc,
)
from .verify import run_gradcheck_suite

RUN_COMMANDS = ("train", "eval", "cv", "mda", "sweep-lambda", "synth")


# ----------------------------------------------------------------------------
# data loading
# ----------------------------------------------------------------------------


class Corpus:
    """Loaded domains plus what the model needs to know about their encoding."""

    def __init__(self, datasets: list[DomainDataset], input_dim: int | None, vocab_size: int = 0,
                 embeddings=None, presplit: bool = False):
        self.datasets = datasets
        self.input_dim = input_dim
        self.vocab_size = vocab_size
        self.embeddings = embeddings
        self.presplit = presplit

    def splits(self, fold_seed: int) -> list[DomainDataset]:
        return list(self.datasets) if self.presplit else holdout(self.datasets, fold_seed)

    def pooled(self) -> list[DomainDataset]:
        """Every labeled instance in one pool, for cross-validation."""
        return [DomainDataset(ds.name, ds.domain, ds.labeled + ds.dev + ds.test, ds.unlabeled)
                for ds in self.datasets]


def load_corpus(cfg: RunConfig) -> Corpus:
    if cfg.data == SYNTHETIC:
        ds = synth_domains(cfg.n_domains, cfg.n_labeled, cfg.n_unlabeled, cfg.dim, cfg.separation,
                           cfg.domain_shift, cfg.data_seed)
        return Corpus(ds, cfg.dim)
    root = Path(cfg.data)
    files = sorted(root.glob("*.tsv"))
    if files:
        ds = [load_bow_tsv(f, d) for d, f in enumerate(files)]
        width = max((int(i.payload.indices[-1]) + 1 for d in ds for i in d.labeled + d.unlabeled
                     if i.payload.indices.size), default=1)
        return Corpus(ds, max(width, cfg.dim))
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise DataFormatError(f"{root}: no *.tsv files or domain directories")
    cnn = cfg.backend == "cnn"
    table = None
    if cfg.embeddings:
        vocab, table = load_embeddings(cfg.embeddings)
    else:
        texts = [t for d in dirs for role, rows in read_text_dir(d).items() if role in ("train", "unlabeled")
                 for _, t in rows]
        vocab = build_vocab(texts, cfg.max_features, max_n=1 if cnn else 2)
    ds = [load_text_dir(d, vocab, i, as_ids=cnn) for i, d in enumerate(dirs)]
    return Corpus(ds, None if cnn else len(vocab), len(vocab), table, presplit=True)


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _template(cfg: RunConfig, corpus: Corpus, n_domains: int):
    return replace(cfg.model_template(corpus.input_dim, corpus.vocab_size), n_domains=n_domains)


def cmd_train(cfg: RunConfig, out: Path) -> dict:
    corpus = load_corpus(cfg)
    splits = corpus.splits(cfg.fold_seed)
    with MetricsWriter(out / "metrics.jsonl") as mw:
        model, _, report = run_mdtc(splits, _template(cfg, corpus, len(splits)), cfg.training(), mw)
    save_checkpoint(model, out / "model.npz")
    return report.to_dict()


def cmd_eval(cfg: RunConfig, out: Path) -> dict:
    if not cfg.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    model = load_checkpoint(cfg.checkpoint)
    splits = load_corpus(cfg).splits(cfg.fold_seed)
    if len(splits) != model.n_domains:
        raise ContractError(f"checkpoint has {model.n_domains} domains, data has {len(splits)}")
    return evaluate(model, splits, "test").to_dict()


def cmd_cv(cfg: RunConfig, out: Path) -> dict:
    corpus = load_corpus(cfg)
    data = corpus.pooled()
    report = cross_validate(data, _template(cfg, corpus, len(data)), cfg.training(), cfg.folds, cfg.fold_seed,
                            metrics_dir=out)
    return report.to_dict()


def cmd_mda(cfg: RunConfig, out: Path) -> dict:
    corpus = load_corpus(cfg)
    splits = corpus.splits(cfg.fold_seed)
    names = [ds.name for ds in splits]
    target_name = cfg.target or names[-1]
    if target_name not in names:
        raise ConfigError(f"target {target_name!r} is not one of {names}")
    tg = splits[names.index(target_name)]
    sources = [ds for ds in splits if ds.name != target_name]
    # the target's labeled training pool is used with labels removed
    pool = tg.unlabeled or [replace(i, label=None) for i in tg.labeled]
    target = DomainDataset(tg.name, tg.domain, [], pool, [], tg.test)
    template = _template(cfg, corpus, len(sources) + 1)
    with MetricsWriter(out / "metrics.jsonl") as mw:
        _, can = multi_source_adapt(sources, target, template, cfg.training(), mw)
    _, base = pooled_baseline(sources, target, template, cfg.training())
    return {"target": target_name, "can": can.to_dict(), "pooled_baseline": base.to_dict()}


def cmd_sweep(cfg: RunConfig, out: Path) -> dict:
    corpus = load_corpus(cfg)
    splits = corpus.splits(cfg.fold_seed)
    rows = lambda_sweep(splits, _template(cfg, corpus, len(splits)), cfg.training(), cfg.lambda_grid)
    return {"rows": rows}


def cmd_synth(cfg: RunConfig, out: Path) -> dict:
    ds = synth_domains(cfg.n_domains, cfg.n_labeled, cfg.n_unlabeled, cfg.dim, cfg.separation,
                       cfg.domain_shift, cfg.data_seed)
    for d in ds:
        save_bow_tsv(d, out / f"{d.name}.tsv")
    return {"files": [f"{d.name}.tsv" for d in ds], "counts": {d.name: d.counts() for d in ds}}


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "cv": cmd_cv, "mda": cmd_mda, "sweep-lambda": cmd_sweep,
            "synth": cmd_synth}
REPORT_NAMES = {"train": "report.json", "eval": "eval_report.json", "cv": "cv_report.json",
                "mda": "mda_report.json", "sweep-lambda": "lambda_sweep.json", "synth": "synth_manifest.json"}


# ----------------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canmdtc", description="Conditional adversarial multi-domain text classification")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in RUN_COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file; flags override its entries")
        for key in KEYS:
            p.add_argument("--" + key.replace("_", "-"), dest=key, metavar="VALUE")
    vt = sub.add_parser("verify-theory")
    vt.add_argument("--trials", type=int, default=200)
    vt.add_argument("--seed", type=int, default=7)
    vt.add_argument("--brute-force-trials", type=int, default=50)
    vt.add_argument("--output-dir", default="runs")
    gc = sub.add_parser("gradcheck")
    gc.add_argument("--points", type=int, default=100)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--output-dir", default="runs")
    return parser


def _run(args: argparse.Namespace) -> int:
    if args.command == "verify-theory":
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        report = oracle_report(args.trials, args.seed, args.brute_force_trials)
        _write_json(out / "theory_report.json", report)
        for c in report["checks"]:
            print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['value']:.3e} (tol {c['tolerance']:g})")
        return 0 if report["passed"] else 1
    if args.command == "gradcheck":
        out = Path(args.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        results = run_gradcheck_suite(args.points, args.seed)
        _write_json(out / "gradcheck.json", [r.to_dict() for r in results])
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.max_rel_error:.3e}")
        return 0 if all(r.passed for r in results) else 1

    overrides = {k: parse_value(k, v) for k, v in vars(args).items() if k in KEYS and v is not None}
    cfg = load_config(args.config, overrides)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
    report = HANDLERS[args.command](cfg, out)
    _write_json(out / REPORT_NAMES[args.command], report)
    print(json.dumps(report, sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ConfigError, ContractError, DataFormatError, TrainingError, OSError) as exc:
        print(f"canmdtc {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
