"""Datasets: bag-of-features and tokenized-text loaders, vocabularies, folds, synthetic domains."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .networks import ContractError
from .tensor import make_rng

LABELS = (1, 2)
UNLABELED_MARK = "?"
TEXT_ROLES = ("train", "dev", "test", "unlabeled")


class DataFormatError(ValueError):
    """A data file does not follow its documented line format."""


@dataclass(frozen=True)
class SparseVector:
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        val = np.asarray(self.values, dtype=np.float64)
        if idx.shape != val.shape or idx.ndim != 1:
            raise ContractError("sparse indices and values must be equal-length 1-D arrays")
        if idx.size and (idx[0] < 0 or np.any(np.diff(idx) <= 0)):
            raise ContractError("sparse indices must be nonnegative and strictly increasing")
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "values", val)

    def __eq__(self, other):
        return (
            isinstance(other, SparseVector)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.values, other.values)
        )

    def __hash__(self):
        return hash((self.indices.tobytes(), self.values.tobytes()))

    def to_dense(self, dim: int) -> np.ndarray:
        if self.indices.size and self.indices[-1] >= dim:
            raise ContractError(f"feature index {self.indices[-1]} outside input_dim {dim}")
        out = np.zeros(dim)
        out[self.indices] = self.values
        return out

    @classmethod
    def from_dense(cls, x) -> "SparseVector":
        x = np.asarray(x, dtype=np.float64)
        idx = np.flatnonzero(x)
        return cls(idx, x[idx])


@dataclass
class Instance:
    """``payload`` is a :class:`SparseVector` or an int array of token ids; ``label`` is 1, 2, or None."""

    payload: object
    label: int | None
    domain: int

    def __post_init__(self):
        if self.label is not None and self.label not in LABELS:
            raise ContractError(f"label must be 1 or 2, got {self.label!r}")

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        if isinstance(self.payload, np.ndarray) or isinstance(other.payload, np.ndarray):
            same = np.array_equal(self.payload, other.payload)
        else:
            same = self.payload == other.payload
        return same and self.label == other.label and self.domain == other.domain


@dataclass
class DomainDataset:
    """Per-domain pools. ``dev``/``test`` are only filled for pre-split corpora or after splitting."""

    name: str
    domain: int
    labeled: list[Instance] = field(default_factory=list)
    unlabeled: list[Instance] = field(default_factory=list)
    dev: list[Instance] = field(default_factory=list)
    test: list[Instance] = field(default_factory=list)

    def __post_init__(self):
        for pool in (self.labeled, self.unlabeled, self.dev, self.test):
            for inst in pool:
                if inst.domain != self.domain:
                    raise ContractError(f"instance domain {inst.domain} in dataset {self.name!r} (domain {self.domain})")
        for inst in self.unlabeled:
            if inst.label is not None:
                raise ContractError(f"unlabeled pool of {self.name!r} holds a labeled instance")
        if set(map(id, self.labeled)) & set(map(id, self.unlabeled)):
            raise ContractError(f"labeled and unlabeled pools of {self.name!r} overlap")

    def with_domain(self, domain: int) -> "DomainDataset":
        move = lambda pool: [replace(i, domain=domain) for i in pool]  # noqa: E731
        return DomainDataset(self.name, domain, move(self.labeled), move(self.unlabeled), move(self.dev), move(self.test))

    def counts(self) -> dict[str, int]:
        return {k: len(getattr(self, k)) for k in ("labeled", "unlabeled", "dev", "test")}


# ----------------------------------------------------------------------------
# text features
# ----------------------------------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub(" ", text.lower()).split()


def ngram_features(tokens: Sequence[str], max_n: int = 2) -> list[str]:
    feats = list(tokens)
    for n in range(2, max_n + 1):
        feats += [" ".join(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]
    return feats


class Vocabulary:
    """Ordered feature -> index map. ``max_n`` is the n-gram order used to build it."""

    def __init__(self, tokens: Iterable[str], max_n: int = 2):
        self.tokens = list(tokens)
        self.max_n = max_n
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ContractError("vocabulary entries must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __getitem__(self, token: str) -> int:
        return self.index[token]

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.tokens == other.tokens and self.max_n == other.max_n

    @property
    def oov_index(self) -> int:
        return len(self.tokens)

    def ids(self, tokens: Sequence[str]) -> np.ndarray:
        oov = self.oov_index
        return np.array([self.index.get(t, oov) for t in tokens], dtype=np.int64)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(f"#max_n={self.max_n}\n")
            for t in self.tokens:
                fh.write(t + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if not lines or not lines[0].startswith("#max_n="):
            raise DataFormatError(f"{path}: missing '#max_n=' header")
        return cls([t for t in lines[1:] if t], int(lines[0].split("=", 1)[1]))


def build_vocab(docs: Sequence[str], max_size: int | None = 5000, max_n: int = 2) -> Vocabulary:
    """Most frequent n-grams (n <= ``max_n``) over the given training documents.

    Ranking is by descending count, ties broken lexicographically.
    """
    if not docs:
        raise ContractError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for doc in docs:
        counts.update(ngram_features(tokenize(doc), max_n))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_size is not None:
        ranked = ranked[:max_size]
    return Vocabulary([t for t, _ in ranked], max_n)


def vectorize(doc: str, vocab: Vocabulary) -> SparseVector:
    """Term counts of the document's in-vocabulary n-grams."""
    counts = Counter(f for f in ngram_features(tokenize(doc), vocab.max_n) if f in vocab.index)
    idx = sorted(vocab.index[f] for f in counts)
    inv = {vocab.index[f]: c for f, c in counts.items()}
    return SparseVector(np.array(idx, dtype=np.int64), np.array([inv[i] for i in idx], dtype=np.float64))


def to_inputs(instances: Sequence[Instance], input_dim: int | None = None):
    """Model input for a list of instances: a dense matrix, or a list of token-id arrays."""
    if instances and isinstance(instances[0].payload, SparseVector):
        if input_dim is None:
            raise ContractError("input_dim is required to densify sparse features")
        out = np.zeros((len(instances), input_dim))
        for r, inst in enumerate(instances):
            p = inst.payload
            if p.indices.size and p.indices[-1] >= input_dim:
                raise ContractError(f"feature index {p.indices[-1]} outside input_dim {input_dim}")
            out[r, p.indices] = p.values
        return out
    return [np.asarray(i.payload, dtype=np.int64) for i in instances]


def label_indices(instances: Sequence[Instance]) -> np.ndarray:
    if any(i.label is None for i in instances):
        raise ContractError("labels requested for an unlabeled instance")
    return np.array([i.label - 1 for i in instances], dtype=np.int64)


# ----------------------------------------------------------------------------
# file formats
# ----------------------------------------------------------------------------


def _parse_label(token: str, where: str) -> int | None:
    if token == UNLABELED_MARK:
        return None
    if token not in ("1", "2"):
        raise DataFormatError(f"{where}: label must be 1, 2 or '?', got {token!r}")
    return int(token)


def load_bow_tsv(path: str | Path, domain: int = 0, name: str | None = None) -> DomainDataset:
    """Read ``label<TAB>idx:val idx:val ...`` lines; label ``?`` marks an unlabeled instance."""
    path = Path(path)
    labeled, unlabeled = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            head, sep, body = line.partition("\t")
            if not sep:
                raise DataFormatError(f"{where}: expected 'label<TAB>features'")
            label = _parse_label(head.strip(), where)
            idx, val = [], []
            for item in body.split():
                i, colon, v = item.partition(":")
                try:
                    if not colon:
                        raise ValueError
                    idx.append(int(i))
                    val.append(float(v))
                except ValueError:
                    raise DataFormatError(f"{where}: malformed feature {item!r}") from None
            try:
                vec = SparseVector(np.array(idx, dtype=np.int64), np.array(val))
            except ContractError as e:
                raise DataFormatError(f"{where}: {e}") from None
            (labeled if label is not None else unlabeled).append(Instance(vec, label, domain))
    return DomainDataset(name or path.stem, domain, labeled, unlabeled)


def save_bow_tsv(dataset: DomainDataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for inst in dataset.labeled + dataset.unlabeled:
            p = inst.payload
            feats = " ".join(f"{i}:{v!r}" for i, v in zip(p.indices.tolist(), p.values.tolist()))
            label = UNLABELED_MARK if inst.label is None else str(inst.label)
            fh.write(f"{label}\t{feats}\n")


def read_text_dir(path: str | Path) -> dict[str, list[tuple[int | None, str]]]:
    """Raw ``(label, text)`` rows per file role of one FDU-style domain directory."""
    path = Path(path)
    out: dict[str, list[tuple[int | None, str]]] = {}
    for role in TEXT_ROLES:
        fname = path / ("unlabeled.txt" if role == "unlabeled" else f"{role}.tsv")
        rows: list[tuple[int | None, str]] = []
        if fname.exists():
            with open(fname, encoding="utf-8") as fh:
                for lineno, raw in enumerate(fh, 1):
                    line = raw.rstrip("\n")
                    if not line.strip():
                        continue
                    if role == "unlabeled":
                        rows.append((None, line))
                        continue
                    head, sep, text = line.partition("\t")
                    if not sep:
                        raise DataFormatError(f"{fname}:{lineno}: expected 'label<TAB>text'")
                    label = _parse_label(head.strip(), f"{fname}:{lineno}")
                    if label is None:
                        raise DataFormatError(f"{fname}:{lineno}: '{UNLABELED_MARK}' label in a labeled split")
                    rows.append((label, text))
        elif role != "unlabeled":
            raise DataFormatError(f"{path}: missing {fname.name}")
        out[role] = rows
    return out


def load_text_dir(path: str | Path, vocab: Vocabulary, domain: int = 0, as_ids: bool = True) -> DomainDataset:
    """Load one domain directory; payloads are token ids (CNN) or bag-of-features vectors."""
    path = Path(path)
    rows = read_text_dir(path)

    def encode(text: str):
        return vocab.ids(tokenize(text)) if as_ids else vectorize(text, vocab)

    pools = {role: [Instance(encode(t), y, domain) for y, t in rows[role]] for role in TEXT_ROLES}
    return DomainDataset(path.name, domain, pools["train"], pools["unlabeled"], pools["dev"], pools["test"])


def load_embeddings(path: str | Path) -> tuple[Vocabulary, np.ndarray]:
    """Text embedding file (``vocab_size dim`` header) -> vocabulary and a table with a zero OOV row."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) != 2:
            raise DataFormatError(f"{path}:1: expected 'vocab_size dim'")
        n, dim = int(header[0]), int(header[1])
        tokens, rows = [], []
        for lineno, raw in enumerate(fh, 2):
            parts = raw.rstrip("\n").split(" ")
            if not raw.strip():
                continue
            if len(parts) != dim + 1:
                raise DataFormatError(f"{path}:{lineno}: expected token and {dim} values")
            tokens.append(parts[0])
            rows.append([float(v) for v in parts[1:]])
    if len(tokens) != n:
        raise DataFormatError(f"{path}: header announces {n} vectors, found {len(tokens)}")
    table = np.vstack([np.array(rows).reshape(n, dim), np.zeros((1, dim))])
    return Vocabulary(tokens, max_n=1), table


# ----------------------------------------------------------------------------
# folds and synthetic data
# ----------------------------------------------------------------------------


def fold_split(instances: Sequence[Instance], k: int = 5, seed: int = 0) -> list[list[Instance]]:
    """Label-stratified partition into ``k`` folds whose sizes differ by at most one."""
    if len(instances) < k:
        raise ContractError(f"need at least {k} instances for {k} folds, got {len(instances)}")
    rng = make_rng(seed)
    order = []
    for label in sorted({i.label for i in instances}, key=lambda v: (v is None, v)):
        group = [j for j, inst in enumerate(instances) if inst.label == label]
        order += [group[j] for j in rng.permutation(len(group))]
    folds: list[list[Instance]] = [[] for _ in range(k)]
    for pos, j in enumerate(order):
        folds[pos % k].append(instances[j])
    return folds


def split_folds(dataset: DomainDataset, folds: list[list[Instance]], test_fold: int, val_fold: int) -> DomainDataset:
    """Train on the remaining folds, validate on ``val_fold``, test on ``test_fold``."""
    if test_fold == val_fold:
        raise ContractError("test and validation folds must differ")
    train = [inst for f, fold in enumerate(folds) if f not in (test_fold, val_fold) for inst in fold]
    return DomainDataset(dataset.name, dataset.domain, train, list(dataset.unlabeled), folds[val_fold], folds[test_fold])


def holdout_split(dataset: DomainDataset, seed: int = 0, k: int = 5) -> DomainDataset:
    """The first cross-validation rotation: test fold 0, validation fold 1, rest train."""
    return split_folds(dataset, fold_split(dataset.labeled, k, seed), 0, 1)


def synth_domains(
    M: int,
    n_labeled: int,
    n_unlabeled: int,
    dim: int,
    separation: float,
    domain_shift: float,
    seed: int,
    base_rate: float = 0.1,
    n_sentiment: int | None = None,
    prior_shift: float = 0.0,
) -> list[DomainDataset]:
    """Poisson term-count domains sharing one sentiment vocabulary.

    Features ``[0, s)`` are positive cues and ``[s, 2s)`` negative cues
    (``s = n_sentiment``); the matching class raises their rate by
    ``separation``. Each domain owns a disjoint block of nuisance features
    after the sentiment block whose rate is raised by ``domain_shift``, so
    domains differ in ways unrelated to the label.

    Labeled pools are balanced. The positive share of domain ``d``'s
    unlabeled pool is ``0.5 + prior_shift * (d / (M - 1) - 0.5)``, so a
    nonzero ``prior_shift`` gives the domains different class priors there.
    """
    if min(M, n_labeled, dim) <= 0 or n_unlabeled < 0:
        raise ContractError("synthetic domain counts must be positive")
    if not 0.0 <= prior_shift <= 1.0:
        raise ContractError(f"prior_shift must lie in [0, 1], got {prior_shift}")
    s = n_sentiment if n_sentiment is not None else max(1, dim // 10)
    block = (dim - 2 * s) // M
    if block <= 0:
        raise ContractError(f"dim={dim} too small for {M} domains with {s} sentiment features per class")
    rng = make_rng(seed)
    out = []
    for d in range(M):
        rate = np.full(dim, base_rate)
        rate[2 * s + d * block : 2 * s + (d + 1) * block] += domain_shift

        positive = 0.5 + prior_shift * (d / (M - 1) - 0.5) if M > 1 else 0.5

        def draw(label: int | None):
            r = rate.copy()
            y = label if label is not None else (2 if rng.random() < positive else 1)
            cue = slice(0, s) if y == 2 else slice(s, 2 * s)
            r[cue] += separation
            return SparseVector.from_dense(rng.poisson(r).astype(np.float64))

        labels = [1 + (j % 2) for j in range(n_labeled)]
        labeled = [Instance(draw(y), y, d) for y in labels]
        unlabeled = [Instance(draw(None), None, d) for _ in range(n_unlabeled)]
        out.append(DomainDataset(f"synth{d}", d, labeled, unlabeled))
    return out
