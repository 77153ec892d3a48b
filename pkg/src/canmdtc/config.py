"""Run configuration: a line-oriented ``key = value`` file, overridable from the command line."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .networks import ModelSpec
from .trainer import TrainingConfig

SYNTHETIC = "synthetic"


class ConfigError(ValueError):
    """Bad config file, unknown key or unparsable value."""


@dataclass
class RunConfig:
    # data
    data: str = SYNTHETIC
    n_domains: int = 3
    n_labeled: int = 2000
    n_unlabeled: int = 2000
    dim: int = 100
    separation: float = 0.6
    domain_shift: float = 1.0
    data_seed: int = 0
    max_features: int = 5000
    embeddings: str = ""
    target: str = ""
    # model
    backend: str = "mlp"
    hidden_dims: list[int] = field(default_factory=lambda: [64, 32])
    shared_dim: int = 16
    private_dim: int = 8
    dropout_p: float = 0.4
    emb_dim: int = 100
    kernel_sizes: list[int] = field(default_factory=lambda: [3, 4, 5])
    kernels_per_size: int = 200
    # training
    lam: float = 1.0
    learning_rate: float = 1e-4
    batch_size: int = 8
    max_iterations: int = 2000
    seed: int = 0
    ablation: str = "full"
    eval_every: int = 50
    folds: int = 5
    fold_seed: int = 0
    lambda_grid: list[float] = field(default_factory=lambda: [0.0001, 0.001, 0.01, 0.1, 1.0, 5.0])
    # io
    output_dir: str = "runs"
    checkpoint: str = ""

    def __post_init__(self):
        for key in ("data", "embeddings", "checkpoint"):
            value = getattr(self, key)
            if value and value != SYNTHETIC and not Path(value).exists():
                raise ConfigError(f"{key}: path {value!r} does not exist")
        if self.backend not in ("mlp", "cnn"):
            raise ConfigError(f"backend must be 'mlp' or 'cnn', got {self.backend!r}")
        self.training()

    def training(self, **overrides) -> TrainingConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(TrainingConfig) if hasattr(self, f.name)}
        try:
            return TrainingConfig(**{**kw, **overrides})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def model_template(self, input_dim: int | None = None, vocab_size: int = 0) -> ModelSpec:
        return ModelSpec(
            n_domains=self.n_domains, backend=self.backend, input_dim=input_dim or self.dim,
            hidden_dims=list(self.hidden_dims), shared_dim=self.shared_dim, private_dim=self.private_dim,
            dropout_p=self.dropout_p, vocab_size=vocab_size, emb_dim=self.emb_dim,
            kernel_sizes=list(self.kernel_sizes), kernels_per_size=self.kernels_per_size,
        )


_TYPES = get_type_hints(RunConfig)
KEYS = tuple(f.name for f in fields(RunConfig))


def parse_value(key: str, raw: str):
    """Convert the text of one value to the field's type."""
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind == list[int]:
            return [int(v) for v in raw.replace(",", " ").split()]
        if kind == list[float]:
            return [float(v) for v in raw.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    return raw


def read_config_file(path: str | Path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are ignored."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            if key not in _TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = parse_value(key, value)
    return values


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """File values first, then ``overrides`` (already typed, ``None`` entries skipped)."""
    values = read_config_file(path) if path else {}
    for key, value in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}")
        if value is not None:
            values[key] = value
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in dataclasses.asdict(cfg).items():
        text = ", ".join(map(str, value)) if isinstance(value, list) else str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
