"""Finite-difference certification of every differentiable op and the training losses.

Each check draws random inputs, reduces the op's output to a scalar with a
random weight tensor, and compares the analytic gradient against central
differences via :func:`finite_diff_check`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .networks import CanModel, ModelSpec
from .objectives import Batch, combined_objective, j_c, j_d_entropy, nll_rows
from .tensor import Tensor, finite_diff_check, make_rng

GRADCHECK_TOL = 1e-4


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    points: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < GRADCHECK_TOL

    def to_dict(self) -> dict:
        return {"name": self.name, "max_rel_error": float(self.max_rel_error), "points": self.points,
                "tolerance": GRADCHECK_TOL, "passed": bool(self.passed)}


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.sum(T.mul_const(out, w))


def _leaf(rng, shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, shape), requires_grad=True)


# every builder returns (x, f) where f(x) is a scalar tensor
def _unary(op, low=-1.0, high=1.0, shape=(3, 4)):
    def build(rng):
        x = _leaf(rng, shape, low, high)
        w = rng.normal(size=op(Tensor(x.data)).shape)
        return x, lambda x: _weighted(op(x), w)

    return build


def _binary(op, shape_a, shape_b, side=0):
    def build(rng):
        a, b = _leaf(rng, shape_a), _leaf(rng, shape_b)
        w = rng.normal(size=op(Tensor(a.data), Tensor(b.data)).shape)
        if side == 0:
            return a, lambda x: _weighted(op(x, b), w)
        return b, lambda x: _weighted(op(a, x), w)

    return build


def _dropout(rng):
    x = _leaf(rng, (4, 5))
    w = rng.normal(size=(4, 5))
    seed = int(rng.integers(2**31))
    return x, lambda x: _weighted(T.dropout(x, 0.4, True, make_rng(seed)), w)


def _embedding(rng):
    weight = _leaf(rng, (6, 3))
    ids = rng.integers(0, 6, size=5)
    w = rng.normal(size=(5, 3))
    return weight, lambda x: _weighted(T.embedding(x, ids), w)


def _conv(which):
    def build(rng):
        k = int(rng.integers(1, 4))
        tokens, weight, bias = _leaf(rng, (int(rng.integers(1, 7)), 3)), _leaf(rng, (4, k * 3)), _leaf(rng, (4,))
        w = rng.normal(size=4)
        args = [tokens, weight, bias]

        def f(x):
            a = list(args)
            a[which] = x
            return _weighted(T.conv1d_maxpool(a[0], a[1], a[2], k), w)

        return args[which], f

    return build


def _nll(rng):
    logits = _leaf(rng, (5, 3), -2.0, 2.0)
    targets = rng.integers(0, 3, size=5)
    return logits, lambda x: T.mean(nll_rows(T.softmax_rows(x), targets)[0])


OP_CHECKS: dict[str, Callable] = {
    "matmul[a]": _binary(T.matmul, (3, 4), (4, 2), 0),
    "matmul[b]": _binary(T.matmul, (3, 4), (4, 2), 1),
    "add": _binary(T.add, (3, 4), (3, 4)),
    "sub[a]": _binary(T.sub, (3, 4), (3, 4), 0),
    "sub[b]": _binary(T.sub, (3, 4), (3, 4), 1),
    "mul": _binary(T.mul, (3, 4), (3, 4)),
    "add_bias[x]": _binary(T.add_bias, (3, 4), (4,), 0),
    "add_bias[b]": _binary(T.add_bias, (3, 4), (4,), 1),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "mul_const": _unary(lambda x: T.mul_const(x, np.arange(12.0).reshape(3, 4) - 5)),
    "power": _unary(lambda x: T.power(x, 2.5), 0.2, 2.0),
    "relu": _unary(T.relu),
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.1, 3.0),
    "clamp_min": _unary(lambda x: T.clamp_min(x, 0.0)),
    "softmax_rows": _unary(T.softmax_rows, -3.0, 3.0),
    "sum": _unary(lambda x: T.scale(T.sum(x), 1.0)),
    "mean": _unary(lambda x: T.scale(T.mean(x), 1.0)),
    "reshape": _unary(lambda x: T.reshape(x, (2, 6))),
    "getitem": _unary(lambda x: T.getitem(x, (slice(0, 2), slice(1, 4)))),
    "pick": _unary(lambda x: T.pick(x, np.array([2, 0, 3]))),
    "concat[axis0]": _binary(lambda a, b: T.concat([a, b], axis=0), (2, 4), (3, 4)),
    "concat[lastaxis]": _binary(lambda a, b: T.concat_lastaxis([a, b]), (3, 2), (3, 4), 1),
    "stack": _binary(lambda a, b: T.stack([a, b]), (3, 4), (3, 4)),
    "dropout": _dropout,
    "embedding": _embedding,
    "conv1d_maxpool[tokens]": _conv(0),
    "conv1d_maxpool[weight]": _conv(1),
    "conv1d_maxpool[bias]": _conv(2),
    "nll": _nll,
}


def _check_grad_reverse(rng) -> float:
    # identity forward, so the expected gradient is -coeff times the plain one
    x = _leaf(rng, (3, 4))
    w = rng.normal(size=(3, 4))
    coeff = float(rng.uniform(0.1, 3.0))
    out = _weighted(T.grad_reverse(x, coeff), w)
    out.backward()
    return float(np.max(np.abs(x.grad - (-coeff * w)) / np.maximum(1.0, np.abs(x.grad))))


LOSS_SPEC = dict(input_dim=6, hidden_dims=[5], shared_dim=4, private_dim=3, dropout_p=0.4)


def _random_batches(rng, model: CanModel, batch_size: int = 3):
    n = model.n_domains
    labeled = [Batch(rng.poisson(1.0, (batch_size, model.input_dim)).astype(float), d,
                     rng.integers(0, 2, size=batch_size)) for d in range(n)]
    unlabeled = [Batch(rng.poisson(1.0, (batch_size, model.input_dim)).astype(float), d) for d in range(n)]
    return labeled, unlabeled


def _loss_point(rng, which: str, coords_per_param: int) -> float:
    # the losses as trained stop gradients through w(c) and through c into the
    # discriminator; the fully-coupled variant is the one a central difference sees
    entropy = which == "j_d_entropy[disc params]"
    spec = ModelSpec(n_domains=2, **LOSS_SPEC, entropy_weighting=entropy, detach_predictions=entropy)
    model = CanModel(spec, seed=int(rng.integers(2**31)))
    model.eval()
    labeled, unlabeled = _random_batches(rng, model)
    lam = float(rng.uniform(0.1, 2.0))

    def loss() -> Tensor:
        if which == "j_c":
            return j_c(model, labeled).value
        jde = j_d_entropy(model, labeled + unlabeled)
        if which == "combined":
            return combined_objective(j_c(model, labeled), jde, lam)
        return jde.value

    params = model.discriminator_parameters() if entropy else model.parameters()
    worst = 0.0
    for p in params:
        coords = rng.choice(p.data.size, size=min(coords_per_param, p.data.size), replace=False)
        model.zero_grad()
        worst = max(worst, finite_diff_check(lambda _x: loss(), p, coords=coords))
    return worst


LOSS_CHECKS = ("j_c", "j_d_entropy", "j_d_entropy[disc params]", "combined")


def run_gradcheck_suite(points: int = 100, seed: int = 0, coords_per_param: int = 3) -> list[GradCheckResult]:
    """Check every op and loss at ``points`` random points each."""
    rng = make_rng(seed)
    results = []
    for name, build in OP_CHECKS.items():
        worst = 0.0
        for _ in range(points):
            x, f = build(rng)
            worst = max(worst, finite_diff_check(f, x))
        results.append(GradCheckResult(name, worst, points))
    results.append(GradCheckResult("grad_reverse", max(_check_grad_reverse(rng) for _ in range(points)), points))
    for which in LOSS_CHECKS:
        worst = max(_loss_point(rng, which, coords_per_param) for _ in range(points))
        results.append(GradCheckResult(which, worst, points))
    return results
