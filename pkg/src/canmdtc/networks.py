"""Shared-private CAN components: extractors, label classifier, conditional discriminator."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

CHECKPOINT_VERSION = 1
SIMPLEX_TOL = 1e-6


class ContractError(ValueError):
    """A caller violated an operation's precondition."""


class Module:
    """Minimal parameter container.

    Parameters are discovered by walking instance attributes in definition
    order: tensors with ``requires_grad``, child modules, and lists of modules.
    """

    training = False
    rng: np.random.Generator | None = None

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Tensor, Module)):
                yield name, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out.append((full, value))
            else:
                out.extend(value.named_parameters(full + "."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, rng: np.random.Generator | None = None) -> "Module":
        for m in self.modules():
            m.training = True
            if rng is not None:
                m.rng = rng
        return self

    def eval(self) -> "Module":
        for m in self.modules():
            m.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _dropout(self, h: Tensor, p: float) -> Tensor:
        return T.dropout(h, p, self.training, self.rng)


# softmax output layers start small so initial predictions are near uniform
OUTPUT_GAIN = 0.1


class Linear(Module):
    """Affine layer ``x @ W + b`` with uniform weights and zero bias.

    The default bound ``sqrt(6 / fan_in)`` (He) keeps activation scale
    through ReLU layers; ``gain`` multiplies it.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator | None = None, gain: float = 1.0):
        bound = gain * np.sqrt(6.0 / in_dim)
        w = rng.uniform(-bound, bound, (in_dim, out_dim)) if rng is not None else np.zeros((in_dim, out_dim))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.weight), self.bias)


@dataclass
class MlpExtractorSpec:
    input_dim: int = 5000
    hidden_dims: list[int] = field(default_factory=lambda: [1000, 500])
    output_dim: int = 128
    dropout_p: float = 0.4

    def __post_init__(self):
        if self.input_dim <= 0 or self.output_dim <= 0 or any(h <= 0 for h in self.hidden_dims):
            raise ContractError(f"all MLP dimensions must be positive: {self}")


@dataclass
class CnnExtractorSpec:
    vocab_size: int
    emb_dim: int = 100
    kernel_sizes: list[int] = field(default_factory=lambda: [3, 4, 5])
    kernels_per_size: int = 200
    output_dim: int = 128
    dropout_p: float = 0.4

    @property
    def pooled_dim(self) -> int:
        return self.kernels_per_size * len(self.kernel_sizes)


class MlpExtractor(Module):
    """Dense bag-of-features input -> ReLU hidden layers (with dropout) -> ReLU projection."""

    def __init__(self, spec: MlpExtractorSpec, rng: np.random.Generator | None):
        self.spec = spec
        dims = [spec.input_dim, *spec.hidden_dims]
        self.hidden = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.out = Linear(dims[-1], spec.output_dim, rng)

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    def __call__(self, x) -> Tensor:
        h = T.as_tensor(x)
        if h.data.ndim != 2 or h.shape[1] != self.spec.input_dim:
            raise ShapeError(f"MLP extractor expects [batch, {self.spec.input_dim}], got {list(h.shape)}")
        for layer in self.hidden:
            h = self._dropout(T.relu(layer(h)), self.spec.dropout_p)
        return T.relu(self.out(h))


class CnnExtractor(Module):
    """Token ids -> embeddings -> per-size conv + max-over-time -> ReLU projection.

    Row ``vocab_size`` of the embedding table is the shared out-of-vocabulary
    vector; ids outside ``[0, vocab_size]`` map to it.
    """

    def __init__(self, spec: CnnExtractorSpec, rng: np.random.Generator | None, embeddings: np.ndarray | None = None):
        self.spec = spec
        n_rows = spec.vocab_size + 1
        if embeddings is not None:
            embeddings = np.asarray(embeddings, dtype=np.float64)
            if embeddings.shape != (n_rows, spec.emb_dim):
                raise ShapeError(f"embedding table must be {[n_rows, spec.emb_dim]}, got {list(embeddings.shape)}")
            table = embeddings.copy()
        elif rng is not None:
            table = rng.uniform(-0.05, 0.05, (n_rows, spec.emb_dim))
        else:
            table = np.zeros((n_rows, spec.emb_dim))
        self.embedding = Tensor(table, requires_grad=True)
        self.conv_weights = []
        self.conv_biases = []
        for k in spec.kernel_sizes:
            fan_in = k * spec.emb_dim
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, (spec.kernels_per_size, fan_in)) if rng is not None \
                else np.zeros((spec.kernels_per_size, fan_in))
            self.conv_weights.append(Tensor(w, requires_grad=True))
            self.conv_biases.append(Tensor(np.zeros(spec.kernels_per_size), requires_grad=True))
        self.proj = Linear(spec.pooled_dim, spec.output_dim, rng)

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = [(f"{prefix}embedding", self.embedding)]
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            out += [(f"{prefix}conv.{i}.weight", w), (f"{prefix}conv.{i}.bias", b)]
        return out + self.proj.named_parameters(prefix + "proj.")

    @property
    def output_dim(self) -> int:
        return self.spec.output_dim

    def pooled(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.intp)
        if ids.ndim != 1:
            raise ShapeError(f"CNN extractor expects a 1-D token-id sequence, got shape {list(ids.shape)}")
        ids = np.where((ids < 0) | (ids > self.spec.vocab_size), self.spec.vocab_size, ids)
        if ids.size == 0:
            ids = np.array([self.spec.vocab_size])
        tokens = T.embedding(self.embedding, ids)
        # relu(max(r)) == max(relu(r)) since relu is monotone
        feats = [
            T.conv1d_maxpool(tokens, w, b, k)
            for k, w, b in zip(self.spec.kernel_sizes, self.conv_weights, self.conv_biases)
        ]
        return T.relu(T.concat_lastaxis(feats))

    def __call__(self, batch: Sequence) -> Tensor:
        if isinstance(batch, np.ndarray) and batch.ndim == 1 and batch.dtype != object:
            batch = [batch]
        h = T.stack([self.pooled(ids) for ids in batch])
        h = self._dropout(h, self.spec.dropout_p)
        return T.relu(self.proj(h))


class MlpHead(Module):
    """One ReLU hidden layer of the input's width, then a softmax output."""

    def __init__(self, input_dim: int, n_out: int, dropout_p: float, rng: np.random.Generator | None):
        self.input_dim = input_dim
        self.dropout_p = dropout_p
        self.hidden = Linear(input_dim, input_dim, rng)
        self.out = Linear(input_dim, n_out, rng, gain=OUTPUT_GAIN)

    def __call__(self, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"head expects [batch, {self.input_dim}], got {list(x.shape)}")
        h = self._dropout(T.relu(self.hidden(x)), self.dropout_p)
        return T.softmax_rows(self.out(h))


@dataclass
class ModelSpec:
    """Everything needed to rebuild a :class:`CanModel` (stored in checkpoints)."""

    n_domains: int
    backend: str = "mlp"
    input_dim: int = 5000
    hidden_dims: list[int] = field(default_factory=lambda: [1000, 500])
    shared_dim: int = 128
    private_dim: int = 64
    n_classes: int = 2
    dropout_p: float = 0.4
    vocab_size: int = 0
    emb_dim: int = 100
    kernel_sizes: list[int] = field(default_factory=lambda: [3, 4, 5])
    kernels_per_size: int = 200
    condition_on_predictions: bool = True
    entropy_weighting: bool = True
    detach_predictions: bool = True
    n_private: int | None = None

    def __post_init__(self):
        if self.backend not in ("mlp", "cnn"):
            raise ContractError(f"unknown extractor backend {self.backend!r}")
        if self.n_domains < 1 or self.shared_dim <= 0 or self.private_dim < 0:
            raise ContractError(f"invalid model dimensions: {self}")
        if self.n_private is None:
            self.n_private = self.n_domains

    def extractor(self, output_dim: int):
        if self.backend == "mlp":
            return MlpExtractorSpec(self.input_dim, list(self.hidden_dims), output_dim, self.dropout_p)
        return CnnExtractorSpec(
            self.vocab_size, self.emb_dim, list(self.kernel_sizes), self.kernels_per_size, output_dim, self.dropout_p
        )

    @property
    def classifier_input_dim(self) -> int:
        return self.shared_dim + self.private_dim

    @property
    def discriminator_input_dim(self) -> int:
        return self.shared_dim + (self.n_classes if self.condition_on_predictions else 0)


def _make_extractor(spec, rng, embeddings=None):
    if isinstance(spec, MlpExtractorSpec):
        return MlpExtractor(spec, rng)
    return CnnExtractor(spec, rng, embeddings)


class CanModel(Module):
    """Shared extractor, per-domain private extractors, classifier and conditional discriminator.

    ``n_private`` may be smaller than ``n_domains`` (multi-source adaptation:
    the discriminator also sees the label-free target domain, which has no
    private extractor). ``private_dim == 0`` drops private extractors entirely.
    """

    def __init__(self, spec: ModelSpec, seed: int | None = 0, embeddings: np.ndarray | None = None):
        self.spec = spec
        rng = T.make_rng(seed) if seed is not None else None
        self.shared = _make_extractor(spec.extractor(spec.shared_dim), rng, embeddings)
        self.private = [] if spec.private_dim == 0 else [
            _make_extractor(spec.extractor(spec.private_dim), rng, embeddings) for _ in range(spec.n_private)
        ]
        self.classifier = MlpHead(spec.classifier_input_dim, spec.n_classes, spec.dropout_p, rng)
        self.discriminator = MlpHead(spec.discriminator_input_dim, spec.n_domains, spec.dropout_p, rng)

    @property
    def n_domains(self) -> int:
        return self.spec.n_domains

    @property
    def input_dim(self) -> int | None:
        """Dense input width for the MLP backend; None for token-id input."""
        return self.spec.input_dim if self.spec.backend == "mlp" else None

    def forward_shared(self, x) -> Tensor:
        return self.shared(x)

    def forward_private(self, x, domain: int) -> Tensor | None:
        if not self.private:
            return None
        if not 0 <= domain < len(self.private):
            raise ContractError(f"no private extractor for domain {domain} (have {len(self.private)})")
        return self.private[domain](x)

    def classify(self, f: Tensor, fd: Tensor | None) -> Tensor:
        if self.spec.private_dim == 0:
            return self.classifier(f)
        if fd is None:
            fd = Tensor(np.zeros((f.shape[0], self.spec.private_dim)))
        return self.classifier(T.concat_lastaxis([f, fd]))

    def classify_unseen_domain(self, f: Tensor) -> Tensor:
        return self.classify(f, None)

    def predict_proba(self, x, domain: int | None) -> Tensor:
        """Label distribution; ``domain=None`` uses the zero private feature."""
        f = self.forward_shared(x)
        fd = self.forward_private(x, domain) if domain is not None else None
        return self.classify(f, fd)

    def discriminate(self, f: Tensor, c: Tensor | None) -> Tensor:
        if not self.spec.condition_on_predictions:
            return self.discriminator(f)
        if c is None:
            raise ContractError("conditional discriminator needs label predictions")
        if np.any(c.data < -SIMPLEX_TOL) or np.any(np.abs(c.data.sum(axis=1) - 1.0) > SIMPLEX_TOL):
            raise ContractError("discriminator conditioning input is not on the probability simplex")
        if self.spec.detach_predictions:
            c = c.detach()
        return self.discriminator(T.concat_lastaxis([f, c]))

    def main_parameters(self) -> list[Tensor]:
        params = self.shared.parameters()
        for p in self.private:
            params += p.parameters()
        return params + self.classifier.parameters()

    def discriminator_parameters(self) -> list[Tensor]:
        return self.discriminator.parameters()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise ContractError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if p.shape != state[name].shape:
                raise ShapeError(f"{name}: checkpoint shape {list(state[name].shape)} != {list(p.shape)}")
            p.data[...] = state[name]


def save_checkpoint(model: CanModel, path: str | Path) -> None:
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__spec__"] = np.array(json.dumps(asdict(model.spec), sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path) -> CanModel:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {version}")
        spec = ModelSpec(**json.loads(str(z["__spec__"])))
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    model = CanModel(spec, seed=None)
    model.load_state_dict(state)
    return model
