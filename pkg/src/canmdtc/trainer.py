"""Two-flow adversarial training, evaluation, cross-validation and experiment drivers.

Each iteration runs two updates on the same sampled minibatches:

1. the main optimizer (shared extractor, private extractors, classifier)
   descends ``J_C + lam * J_D^E`` where the adversarial term reaches the
   shared extractor through a gradient-reversal node, so the shared
   extractor moves to *increase* the discriminator's NLL;
2. the discriminator optimizer descends ``J_D^E`` with the features held
   fixed, i.e. the discriminator *minimizes* its NLL.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DomainDataset, Instance, fold_split, holdout_split, label_indices, split_folds, to_inputs
from .networks import CanModel, ContractError, ModelSpec
from .objectives import Batch, combined_objective, j_c, j_d_entropy
from .optim import Adam

MODES = ("mdtc", "multi_source_da")
ABLATIONS = {
    "full": (True, True),
    "no_C": (False, True),
    "no_E": (True, False),
    "no_CE": (False, False),
}
# The discriminator minimizes J_D^E; the shared extractor sees it with this sign.
ADVERSARIAL_SIGN = -1.0
EVAL_CHUNK = 512


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


@dataclass
class TrainingConfig:
    lam: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_iterations: int = 2000
    seed: int = 0
    mode: str = "mdtc"
    ablation: str = "full"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_every: int = 50
    detach_predictions: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lam}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.max_iterations < 0 or self.eval_every < 1:
            raise ValueError("max_iterations must be >= 0 and eval_every >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"ablation must be one of {sorted(ABLATIONS)}, got {self.ablation!r}")


@dataclass
class EvalReport:
    accuracies: dict[str, float]
    average: float
    iteration: int = 0
    mode: str = "mdtc"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CvReport:
    folds: list[EvalReport]
    mean_accuracies: dict[str, float]
    mean_average: float

    def to_dict(self) -> dict:
        return {
            "folds": [f.to_dict() for f in self.folds],
            "mean_accuracies": self.mean_accuracies,
            "mean_average": self.mean_average,
        }


class MetricsWriter:
    """Newline-delimited JSON records with sorted keys (byte-stable for equal runs)."""

    def __init__(self, path: str | Path):
        self.fh = open(path, "w", encoding="utf-8", newline="\n")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self) -> None:
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    seqs = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.Philox(s)) for s in seqs]


def make_model(template: ModelSpec, config: TrainingConfig, n_domains: int, **overrides) -> CanModel:
    """Instantiate a fresh model whose flags follow ``config.ablation``."""
    cond, ent = ABLATIONS[config.ablation]
    spec = replace(
        template,
        n_domains=n_domains,
        condition_on_predictions=cond,
        entropy_weighting=ent,
        detach_predictions=config.detach_predictions,
        n_private=overrides.pop("n_private", n_domains),
        **overrides,
    )
    return CanModel(spec, seed=config.seed)


# ----------------------------------------------------------------------------
# sampling
# ----------------------------------------------------------------------------


class PoolSampler:
    """Cycles through a pool without replacement, reshuffling at every wrap."""

    def __init__(self, pool: Sequence[Instance], rng: np.random.Generator):
        if not pool:
            raise ContractError("cannot sample from an empty pool")
        self.pool = list(pool)
        self.rng = rng
        self.order = rng.permutation(len(self.pool))
        self.cursor = 0
        self.epoch = 0

    def draw(self, n: int) -> list[Instance]:
        out = []
        while len(out) < n:
            if self.cursor == len(self.order):
                self.order = self.rng.permutation(len(self.pool))
                self.cursor = 0
                self.epoch += 1
            take = min(n - len(out), len(self.order) - self.cursor)
            out += [self.pool[j] for j in self.order[self.cursor : self.cursor + take]]
            self.cursor += take
        return out


def _strip_labels(pool: Sequence[Instance]) -> list[Instance]:
    return [Instance(i.payload, None, i.domain) for i in pool]


class BatchSampler:
    """One labeled and one unlabeled minibatch per domain per iteration.

    In multi-source mode ``datasets`` are the sources followed by the target;
    the target contributes an unlabeled batch only, and a source without an
    unlabeled pool supplies its labeled inputs with labels dropped.
    """

    def __init__(self, datasets: Sequence[DomainDataset], batch_size: int, rng: np.random.Generator,
                 input_dim: int | None, mode: str = "mdtc"):
        self.batch_size = batch_size
        self.input_dim = input_dim
        self.labeled: list[tuple[int, PoolSampler]] = []
        self.unlabeled: list[tuple[int, PoolSampler]] = []
        sources = datasets[:-1] if mode == "multi_source_da" else datasets
        for ds in sources:
            self.labeled.append((ds.domain, PoolSampler(ds.labeled, rng)))
        for ds in datasets:
            pool = ds.unlabeled
            if not pool and mode == "multi_source_da" and ds is not datasets[-1]:
                pool = _strip_labels(ds.labeled)
            if pool:
                self.unlabeled.append((ds.domain, PoolSampler(pool, rng)))
        if mode == "multi_source_da" and not datasets[-1].unlabeled:
            raise ContractError("multi-source adaptation needs unlabeled target data")

    def _batch(self, domain: int, instances: list[Instance], labeled: bool) -> Batch:
        y = label_indices(instances) if labeled else None
        return Batch(to_inputs(instances, self.input_dim), domain, y)

    def sample(self) -> tuple[list[Batch], list[Batch]]:
        lab = [self._batch(d, s.draw(self.batch_size), True) for d, s in self.labeled]
        unl = [self._batch(d, s.draw(self.batch_size), False) for d, s in self.unlabeled]
        return lab, unl


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


def _check_finite(terms: dict[str, float]) -> None:
    for name, value in terms.items():
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss term {name} = {value}")


def adversarial_batches(labeled: list[Batch], unlabeled: list[Batch], mode: str) -> list[Batch]:
    # in multi-source adaptation the discriminator only sees unlabeled data
    return list(unlabeled) if mode == "multi_source_da" else list(labeled) + list(unlabeled)


def make_optimizers(model: CanModel, config: TrainingConfig) -> tuple[Adam, Adam]:
    kw = dict(lr=config.learning_rate, betas=(config.beta1, config.beta2), eps=config.adam_eps)
    return Adam(model.main_parameters(), **kw), Adam(model.discriminator_parameters(), **kw)


def train_step(model: CanModel, opt_main: Adam, opt_disc: Adam, labeled: list[Batch], unlabeled: list[Batch],
               config: TrainingConfig) -> dict[str, float]:
    adv = adversarial_batches(labeled, unlabeled, config.mode)

    # flow 1: F_s, {F_d^i}, C
    model.zero_grad()
    jc = j_c(model, labeled)
    terms = {"j_c": jc.item()}
    loss = jc.value
    if config.lam > 0:
        jde = j_d_entropy(model, adv, reverse_coeff=-ADVERSARIAL_SIGN)
        terms["j_de"] = jde.item()
        loss = combined_objective(jc, jde, config.lam)
    terms["loss"] = loss.item()
    _check_finite(terms)
    loss.backward()
    opt_main.step()

    # flow 2: D
    model.zero_grad()
    ld = j_d_entropy(model, adv, detach_features=True)
    terms["l_d"] = ld.item()
    _check_finite({"l_d": terms["l_d"]})
    ld.value.backward()
    opt_disc.step()
    model.zero_grad()
    return terms


def predict(model: CanModel, instances: Sequence[Instance], domain: int | None) -> np.ndarray:
    """Label probabilities in eval mode; ``domain=None`` zeroes the private feature."""
    model.eval()
    out = []
    for start in range(0, len(instances), EVAL_CHUNK):
        x = to_inputs(instances[start : start + EVAL_CHUNK], model.input_dim)
        out.append(model.predict_proba(x, domain).data)
    return np.vstack(out) if out else np.zeros((0, model.spec.n_classes))


def accuracy(model: CanModel, instances: Sequence[Instance], domain: int | None) -> float:
    if not instances:
        raise ContractError("cannot evaluate on an empty test set")
    probs = predict(model, instances, domain)
    return float(np.mean(probs.argmax(axis=1) == label_indices(instances)))


def evaluate(model: CanModel, datasets: Sequence[DomainDataset], split: str = "test", mode: str = "mdtc",
             unseen: Sequence[int] = (), iteration: int = 0) -> EvalReport:
    """Per-domain argmax accuracy; domains in ``unseen`` use the zero private feature."""
    accs = {}
    for ds in datasets:
        pool = getattr(ds, split)
        domain = None if ds.domain in unseen or ds.domain >= len(model.private) else ds.domain
        accs[ds.name] = accuracy(model, pool, domain)
    return EvalReport(accs, float(np.mean(list(accs.values()))), iteration, mode)


def train_loop(model: CanModel, datasets: Sequence[DomainDataset], config: TrainingConfig,
               metrics: MetricsWriter | None = None) -> tuple[CanModel, list[EvalReport]]:
    """Run ``config.max_iterations`` steps; restore the best validation checkpoint.

    In multi-source mode the last dataset is the unlabeled target and model
    selection uses the sources' validation sets only.
    """
    selection = list(datasets[:-1]) if config.mode == "multi_source_da" else list(datasets)
    if config.max_iterations > 0:
        for ds in selection:
            if not ds.dev:
                raise ContractError(f"dataset {ds.name!r} has no validation split")
    sample_rng, dropout_rng = spawn_rngs(config.seed, 2)
    sampler = BatchSampler(datasets, config.batch_size, sample_rng, model.input_dim, config.mode)
    opt_main, opt_disc = make_optimizers(model, config)
    history: list[EvalReport] = []
    best: tuple[float, dict] | None = None
    for it in range(1, config.max_iterations + 1):
        model.train(dropout_rng)
        labeled, unlabeled = sampler.sample()
        terms = train_step(model, opt_main, opt_disc, labeled, unlabeled, config)
        if metrics is not None:
            metrics.write({"kind": "step", "iteration": it, **terms})
        if it % config.eval_every == 0 or it == config.max_iterations:
            report = evaluate(model, selection, "dev", config.mode, iteration=it)
            history.append(report)
            if metrics is not None:
                metrics.write({"kind": "eval", **report.to_dict()})
            if best is None or report.average > best[0]:
                best = (report.average, model.state_dict())
    if best is not None:
        model.load_state_dict(best[1])
    model.eval()
    return model, history


# ----------------------------------------------------------------------------
# experiment drivers
# ----------------------------------------------------------------------------


def run_mdtc(splits: Sequence[DomainDataset], template: ModelSpec, config: TrainingConfig,
             metrics: MetricsWriter | None = None) -> tuple[CanModel, list[EvalReport], EvalReport]:
    """Train on pre-split domains; return (model, validation history, test report)."""
    model = make_model(template, config, len(splits))
    model, history = train_loop(model, splits, config, metrics)
    return model, history, evaluate(model, splits, "test", config.mode, iteration=config.max_iterations)


def cross_validate(datasets: Sequence[DomainDataset], template: ModelSpec, config: TrainingConfig,
                   k: int = 5, fold_seed: int = 0, metrics_dir: str | Path | None = None) -> CvReport:
    """k rotations: fold r tests, fold r+1 validates, the remaining folds train.

    Fold assignment depends only on ``fold_seed``, so runs that vary
    ``config.seed`` share the same folds.
    """
    for ds in datasets:
        if len(ds.labeled) < k:
            raise ContractError(f"dataset {ds.name!r} has {len(ds.labeled)} labeled instances, need >= {k}")
    folds = [fold_split(ds.labeled, k, fold_seed + ds.domain) for ds in datasets]
    reports = []
    for r in range(k):
        splits = [split_folds(ds, f, r, (r + 1) % k) for ds, f in zip(datasets, folds)]
        writer = MetricsWriter(Path(metrics_dir) / f"metrics_fold{r}.jsonl") if metrics_dir else None
        try:
            _, _, report = run_mdtc(splits, template, config, writer)
        finally:
            if writer:
                writer.close()
        reports.append(report)
    names = list(reports[0].accuracies)
    mean_acc = {n: float(np.mean([rep.accuracies[n] for rep in reports])) for n in names}
    return CvReport(reports, mean_acc, float(np.mean([rep.average for rep in reports])))


def _check_target(target: DomainDataset) -> None:
    if target.labeled or any(i.label is not None for i in target.unlabeled):
        raise ContractError(f"target {target.name!r} carries labels in a training pool")
    if not target.test:
        raise ContractError(f"target {target.name!r} has no held-out test set for scoring")


def multi_source_adapt(sources: Sequence[DomainDataset], target: DomainDataset, template: ModelSpec,
                       config: TrainingConfig, metrics: MetricsWriter | None = None) -> tuple[CanModel, EvalReport]:
    """Adapt from labeled sources to an unlabeled target; score on the target's held-out labels."""
    if len(sources) < 2:
        raise ContractError("multi-source adaptation needs at least two sources")
    _check_target(target)
    config = replace(config, mode="multi_source_da")
    sources = [ds.with_domain(i) for i, ds in enumerate(sources)]
    target = target.with_domain(len(sources))
    model = make_model(template, config, len(sources) + 1, n_private=len(sources))
    model, _ = train_loop(model, [*sources, target], config, metrics)
    return model, evaluate(model, [target], "test", config.mode, unseen=(target.domain,),
                           iteration=config.max_iterations)


def pooled_baseline(sources: Sequence[DomainDataset], target: DomainDataset, template: ModelSpec,
                    config: TrainingConfig) -> tuple[CanModel, EvalReport]:
    """Non-adversarial reference: sources merged into one domain, shared extractor + classifier only."""
    _check_target(target)
    pooled = DomainDataset(
        "pooled", 0,
        [replace(i, domain=0) for ds in sources for i in ds.labeled],
        [],
        [replace(i, domain=0) for ds in sources for i in ds.dev],
    )
    config = replace(config, mode="mdtc", lam=0.0, ablation="no_CE")
    model = make_model(template, config, 1, private_dim=0)
    model, _ = train_loop(model, [pooled], config)
    return model, evaluate(model, [target.with_domain(0)], "test", "multi_source_da", unseen=(0,),
                           iteration=config.max_iterations)


def lambda_sweep(datasets: Sequence[DomainDataset], template: ModelSpec, config: TrainingConfig,
                 grid: Sequence[float], cross_validated: bool = False) -> list[dict]:
    """One run per lambda; rows of ``{"lambda", "mean_accuracy"}``.

    Without cross-validation ``datasets`` must already carry dev/test splits.
    """
    if not grid:
        raise ContractError("lambda grid is empty")
    rows = []
    for lam in grid:
        cfg = replace(config, lam=float(lam))
        if cross_validated:
            acc = cross_validate(datasets, template, cfg).mean_average
        else:
            acc = run_mdtc(datasets, template, cfg)[2].average
        rows.append({"lambda": float(lam), "mean_accuracy": acc})
    return rows


def holdout(datasets: Sequence[DomainDataset], seed: int = 0) -> list[DomainDataset]:
    return [holdout_split(ds, seed + ds.domain) for ds in datasets]
