"""Classification and entropy-conditioned adversarial losses.

Per-domain expectations are minibatch means; domain terms are summed.
Labels are ``1`` (negative) / ``2`` (positive) at the API boundary and
0-based class indices inside :class:`Batch`. Domain indices are 0-based.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .networks import CanModel, ContractError
from .tensor import Tensor

PROB_FLOOR = 1e-12


@dataclass
class Batch:
    """One domain's minibatch. ``x`` is a dense matrix (MLP) or a list of id arrays (CNN)."""

    x: object
    domain: int
    y: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class BatchLoss:
    value: Tensor
    count: int
    n_clamped: int = 0

    def item(self) -> float:
        return self.value.item()


def nll_rows(probs: Tensor, targets) -> tuple[Tensor, int]:
    """Per-row ``-log probs[r, targets[r]]`` with the probability floor; returns (losses, n_clamped)."""
    p = T.pick(probs, targets)
    n_clamped = int(np.sum(p.data < PROB_FLOOR))
    return -T.log(T.clamp_min(p, PROB_FLOOR)), n_clamped


def nll_class(c, y: int) -> float:
    """``-log c_y`` for a label ``y`` in {1, 2}."""
    if y not in (1, 2):
        raise ContractError(f"label must be 1 or 2, got {y!r}")
    c = np.asarray(c, dtype=np.float64)
    return -math.log(min(max(c[y - 1], PROB_FLOOR), 1.0))


def nll_domain(d_tilde, d: int) -> float:
    """``-log d_tilde[d]`` for a 0-based domain index."""
    d_tilde = np.asarray(d_tilde, dtype=np.float64)
    if not 0 <= d < d_tilde.size:
        raise ContractError(f"domain index {d} out of range for {d_tilde.size} domains")
    return -math.log(min(max(d_tilde[d], PROB_FLOOR), 1.0))


def entropy(c) -> np.ndarray | float:
    """Shannon entropy (nats) of each row of ``c``, with ``0 log 0 = 0``."""
    c = np.asarray(c, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(c > 0, c * np.log(np.where(c > 0, c, 1.0)), 0.0)
    e = -terms.sum(axis=-1)
    return float(e) if e.ndim == 0 else e


def entropy_weight(c) -> np.ndarray | float:
    """Instance weight ``1 + exp(-entropy(c))``; lies in [1.5, 2] for binary predictions."""
    e = entropy(c)
    return 1.0 + np.exp(-e) if isinstance(e, np.ndarray) else 1.0 + math.exp(-e)


def _check_batches(batches: Sequence[Batch], n_domains: int, need_labels: bool) -> None:
    for b in batches:
        if len(b) == 0:
            raise ContractError(f"empty minibatch for domain {b.domain}")
        if not 0 <= b.domain < n_domains:
            raise ContractError(f"domain index {b.domain} outside [0, {n_domains})")
        if need_labels and b.y is None:
            raise ContractError(f"classification loss needs labels (domain {b.domain})")


def _private_domain(model: CanModel, domain: int) -> int | None:
    # domains without a private extractor (adaptation target) use the zero feature
    return domain if domain < len(model.private) else None


def _forward_domains(model: CanModel, groups: list[tuple[int, object]]):
    """Shared features and label predictions for several domains in one pass.

    ``groups`` holds ``(domain, x)`` pairs. Returns ``(f, c, sizes)`` where
    rows of ``f``/``c`` follow the group order.
    """
    sizes = [len(x) for _, x in groups]
    f = model.forward_shared(_merge_inputs([x for _, x in groups]))
    if not model.private:
        return f, model.classify(f, None), sizes
    fds = []
    for (domain, x), n in zip(groups, sizes):
        private = _private_domain(model, domain)
        if private is None:
            fds.append(T.Tensor(np.zeros((n, model.spec.private_dim))))
        else:
            fds.append(model.forward_private(x, private))
    fd = fds[0] if len(fds) == 1 else T.concat(fds, axis=0)
    return f, model.classify(f, fd), sizes


def _domain_means(losses: Tensor, sizes: list[int], weights: np.ndarray | None = None) -> Tensor:
    """Sum over groups of the (optionally weighted) mean of each group's rows."""
    scale = np.concatenate([np.full(n, 1.0 / n) for n in sizes])
    if weights is not None:
        scale = scale * weights
    return T.sum(T.mul_const(losses, scale))


def j_c(model: CanModel, labeled: Sequence[Batch]) -> BatchLoss:
    """Sum over domains of the mean classification NLL."""
    _check_batches(labeled, model.n_domains, need_labels=True)
    _, c, sizes = _forward_domains(model, [(b.domain, b.x) for b in labeled])
    losses, clamped = nll_rows(c, np.concatenate([b.y for b in labeled]))
    return BatchLoss(_domain_means(losses, sizes), int(np.sum(sizes)), clamped)


def j_d_entropy(
    model: CanModel,
    batches: Sequence[Batch],
    entropy_weighting: bool | None = None,
    reverse_coeff: float | None = None,
    detach_features: bool = False,
) -> BatchLoss:
    """Sum over domains of the mean ``w(c) * NLL(D([f, c]), domain)``.

    Batches sharing a domain (its labeled and unlabeled minibatches) form
    one expectation. ``w`` is a constant per instance (no gradient); with
    entropy weighting off, ``w == 1``. ``reverse_coeff`` inserts a
    gradient-reversal node between the shared features and the
    discriminator, so the value is unchanged while the shared extractor
    receives ``-coeff`` times the gradient. ``detach_features`` cuts the
    graph below the discriminator (used when only the discriminator is
    being updated).
    """
    _check_batches(batches, model.n_domains, need_labels=False)
    weighting = model.spec.entropy_weighting if entropy_weighting is None else entropy_weighting
    by_domain: dict[int, list[Batch]] = {}
    for b in batches:
        by_domain.setdefault(b.domain, []).append(b)
    groups = [(d, _merge_inputs([b.x for b in group])) for d, group in by_domain.items()]

    f, c, sizes = _forward_domains(model, groups)
    if detach_features:
        f = f.detach()
    elif reverse_coeff is not None:
        f = T.grad_reverse(f, reverse_coeff)
        if not model.spec.detach_predictions:
            c = T.grad_reverse(c, reverse_coeff)
    d_tilde = model.discriminate(f, c)
    targets = np.concatenate([np.full(n, d) for (d, _), n in zip(groups, sizes)])
    losses, clamped = nll_rows(d_tilde, targets)
    weights = entropy_weight(c.data) if weighting else None
    return BatchLoss(_domain_means(losses, sizes, weights), int(np.sum(sizes)), clamped)


def _merge_inputs(xs: list):
    if len(xs) == 1:
        return xs[0]
    if all(isinstance(x, np.ndarray) and x.ndim == 2 for x in xs):
        return np.vstack(xs)
    return [row for x in xs for row in x]


def combined_objective(jc: BatchLoss, jde: BatchLoss, lam: float) -> Tensor:
    """``J_C + lam * J_D^E`` as one differentiable scalar."""
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    if lam == 0:
        return jc.value
    return jc.value + jde.value * lam
