"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that records its
parents and a closure mapping the output gradient to one gradient per parent.
:meth:`Tensor.backward` walks the recorded graph in reverse topological order
and accumulates gradients additively into leaf tensors.

Broadcasting is deliberately absent except for :func:`add_bias`; binary
elementwise ops require identical shapes.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """An input lies outside the mathematical domain of an operation."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (e.g. backward from a non-scalar)."""


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; same seed gives the same draws."""
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


class Tensor:
    """A dense array optionally participating in the autodiff graph.

    Leaf tensors created with ``requires_grad=True`` carry a zero-initialised
    ``grad`` of the same shape. Non-leaf tensors never store gradients; they
    only route them to their parents during :meth:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = ""):
        self.data = np.array(data, dtype=np.float64, copy=True) if not isinstance(data, np.ndarray) \
            or data.dtype != np.float64 else data
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward = _backward
        self.op = op
        self.grad = np.zeros_like(self.data) if (self.requires_grad and _backward is None) else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op or 'leaf'!r})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Gradients accumulate across calls; reset with :meth:`zero_grad`.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor with requires_grad=True")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __getitem__(self, index):
        return getitem(self, index)


def _lift(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, op=op)
    return Tensor(data, op=op)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ----------------------------------------------------------------------------
# linear algebra and elementwise ops
# ----------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply shapes {list(a.shape)} and {list(b.shape)}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _result(A @ B, (a, b), backward, "matmul")


def _same_shape(name: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes {list(a.shape)} and {list(b.shape)} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    return _result(x.data * s, (x,), lambda g: (g * s,), "scale")


def mul_const(x: Tensor, weights) -> Tensor:
    """Elementwise product with a constant array of the same shape (no gradient to it)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != x.shape:
        raise ShapeError(f"mul_const: shapes {list(x.shape)} and {list(w.shape)} differ")
    return _result(x.data * w, (x,), lambda g: (g * w,), "mul_const")


def power(x: Tensor, exponent: float) -> Tensor:
    X = x.data
    return _result(X**exponent, (x,), lambda g: (g * exponent * X ** (exponent - 1),), "pow")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a bias vector to every row of ``x`` (the one supported broadcast)."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias shape {list(b.shape)} does not match last axis of {list(x.shape)}")
    axes = tuple(range(x.data.ndim - 1))

    def backward(g):
        return g, g.sum(axis=axes) if axes else g

    return _result(x.data + b.data, (x, b), backward, "add_bias")


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    X = x.data
    if np.any(X <= 0):
        raise DomainError(f"log: input has {int(np.sum(X <= 0))} nonpositive entries (min {X.min():.3g})")
    return _result(np.log(X), (x,), lambda g: (g / X,), "log")


def clamp_min(x: Tensor, lo: float) -> Tensor:
    """``max(x, lo)``; clamped entries receive no gradient. NaN passes through."""
    keep = ~(x.data < lo)
    return _result(np.where(keep, x.data, lo), (x,), lambda g: (g * keep,), "clamp_min")


def softmax_rows(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {list(x.shape)}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _result(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _result(np.array(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),), "mean")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(x.data[index], (x,), backward, "getitem")


def pick(x: Tensor, idx) -> Tensor:
    """Row-wise gather: ``out[r] = x[r, idx[r]]``."""
    idx = np.asarray(idx, dtype=np.intp)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: index shape {list(idx.shape)} does not match rows of {list(x.shape)}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[1]):
        raise ShapeError(f"pick: index out of range for {x.shape[1]} columns")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[rows, idx] = g
        return (full,)

    return _result(x.data[rows, idx], (x,), backward, "pick")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    ndim = tensors[0].data.ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != ax):
            raise ShapeError(f"concat: shapes {[list(t.shape) for t in tensors]} disagree off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def concat_lastaxis(tensors: Sequence[Tensor]) -> Tensor:
    return concat(tensors, axis=-1)


def stack(tensors: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    return concat([reshape(t, (1,) + t.shape) for t in tensors], axis=0)


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``train`` is false."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return _result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


def grad_reverse(x: Tensor, coeff: float = 1.0) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``-coeff``."""
    return _result(x.data.copy(), (x,), lambda g: (-coeff * g,), "grad_reverse")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.intp)
    shape = weight.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _result(weight.data[ids], (weight,), backward, "embedding")


def conv1d_maxpool(tokens: Tensor, weight: Tensor, bias: Tensor, kernel_size: int) -> Tensor:
    """Max over window positions of an affine map of each flattened window.

    ``tokens`` is ``[T, emb]``; ``weight`` is ``[n_kernels, kernel_size * emb]``.
    Sequences shorter than ``kernel_size`` are right-padded with zero rows.
    Returns ``[n_kernels]``.
    """
    T, emb = tokens.shape
    if weight.shape[1] != kernel_size * emb or bias.shape != (weight.shape[0],):
        raise ShapeError(
            f"conv1d_maxpool: weight {list(weight.shape)} / bias {list(bias.shape)} "
            f"incompatible with kernel_size={kernel_size}, emb={emb}"
        )
    X = tokens.data
    if T < kernel_size:
        X = np.vstack([X, np.zeros((kernel_size - T, emb))])
    n_pos = X.shape[0] - kernel_size + 1
    windows = np.lib.stride_tricks.sliding_window_view(X, (kernel_size, emb))[:, 0].reshape(n_pos, -1)
    W, b = weight.data, bias.data
    responses = windows @ W.T + b
    best = responses.argmax(axis=0)
    kernels = np.arange(W.shape[0])

    def backward(g):
        gW = g[:, None] * windows[best]
        gwin = g[:, None] * W  # [n_kernels, k*emb]
        gX = np.zeros_like(X)
        for k in range(W.shape[0]):
            start = best[k]
            gX[start : start + kernel_size] += gwin[k].reshape(kernel_size, emb)
        return gX[:T], gW, g.copy()

    return _result(responses[best, kernels], (tokens, weight, bias), backward, "conv1d_maxpool")


# ----------------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------------


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
    kink_tol: float = 1e-6,
) -> float:
    """Max relative error between the analytic gradient and central differences.

    ``f`` maps ``x`` to a scalar tensor and may close over other tensors; ``x``
    is perturbed in place, one coordinate at a time, and restored afterwards.
    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.

    When the one-sided differences disagree by more than ``kink_tol`` the
    coordinate is retried with a step 100x smaller. Curvature shrinks the gap
    with the step, a kink (e.g. relu at 0) inside the step does not; such
    coordinates are skipped.
    """
    if not x.requires_grad:
        raise GraphError("finite_diff_check needs x with requires_grad=True")
    x.zero_grad()
    out = f(x)
    if out.data.size != 1:
        raise GraphError(f"finite_diff_check: f must be scalar-valued, got shape {out.shape}")
    base = out.item()
    if out.requires_grad:
        out.backward()
    analytic = x.grad.reshape(-1).copy()
    flat = x.data.reshape(-1)

    def differences(i, step):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x).item()
        flat[i] = orig - step
        fm = f(x).item()
        flat[i] = orig
        return (fp - base) / step, (base - fm) / step, (fp - fm) / (2 * step)

    worst = 0.0
    for i in range(flat.size) if coords is None else coords:
        fwd, bwd, numeric = differences(i, eps)
        gap = abs(fwd - bwd)
        if gap > kink_tol * max(1.0, abs(fwd), abs(bwd)):
            fwd, bwd, numeric = differences(i, eps / 100)
            if abs(fwd - bwd) > 0.1 * gap:
                continue
        worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
    x.zero_grad()
    return worst
