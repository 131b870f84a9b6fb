"""Minimal reverse-mode automatic differentiation on top of numpy.

Every op returns a new :class:`Tensor` holding a float64 array and a reference
to the :class:`Node` that produced it. Nodes receive a monotonically increasing
sequence number when they are created, so sorting the nodes reachable from a
loss by that number gives a valid topological order; :func:`backward` walks it
in reverse, visiting each node exactly once.
"""

from __future__ import annotations

import itertools
import os
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DomainError",
    "Tensor",
    "Node",
    "Graph",
    "Rng",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "relu",
    "xlogx",
    "clamp_min",
    "matmul",
    "transpose",
    "sum",
    "mean",
    "concat",
    "reshape",
    "take_rows",
    "take_columns",
    "diagonal",
    "softmax",
    "batchnorm",
    "dropout",
    "backward",
    "gradcheck",
    "no_grad",
]

DEBUG = os.environ.get("CLOVEN_DEBUG", "") not in ("", "0")


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class DomainError(ContractError):
    """A numeric op was evaluated outside its mathematical domain."""


_seq = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Node:
    """Record of one differentiable operation.

    ``backward_fn`` maps the upstream gradient to one gradient per input
    (``None`` where an input does not need one).
    """

    __slots__ = ("seq", "op", "inputs", "backward_fn")

    def __init__(self, op: str, inputs: Sequence["Tensor"], backward_fn):
        self.seq = next(_seq)
        self.op = op
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tensor:
    """Dense float64 array that participates in reverse-mode differentiation."""

    __array_priority__ = 100.0
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _grad_enabled and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    out.node = Node(op, inputs, backward_fn) if needs else None
    if DEBUG and not np.all(np.isfinite(data)):
        if all(np.all(np.isfinite(t.data)) for t in inputs):
            raise FloatingPointError(f"{op} produced non-finite output from finite inputs")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: zero in denominator")
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _make(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(a.data)
    return _make(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    # np.maximum keeps NaN so a diverged input stays visible downstream
    return _make(np.maximum(a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def xlogx(a) -> Tensor:
    """Elementwise ``x*log(x)`` with ``0*log(0) := 0``."""
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise DomainError("xlogx: negative argument")
    pos = a.data > 0
    safe = np.where(pos, a.data, 1.0)
    out = np.where(a.data == 0, 0.0, a.data * np.log(safe))
    # the derivative diverges at 0; underflowed probabilities contribute nothing
    return _make(out, "xlogx", (a,), lambda g: (g * np.where(pos, np.log(safe) + 1.0, 0.0),))


def clamp_min(a, floor: float) -> Tensor:
    a = _as_tensor(a)
    keep = a.data >= floor
    return _make(np.maximum(a.data, floor), "clamp_min", (a,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# shape and reduction ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.T.copy(), "transpose", (a,), lambda g: (g.T,))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out, dtype=np.float64), "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else a.shape[axis]
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    other = [t.shape[:axis] + t.shape[axis + 1:] for t in tensors]
    if any(o != other[0] for o in other):
        raise ContractError(f"concat: mismatched shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), "concat", tensors, bw)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (g.reshape(a.shape),))


def take_columns(a, index) -> Tensor:
    a = _as_tensor(a)
    index = np.asarray(index)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, (slice(None), index), g)
        return (out,)

    return _make(a.data[:, index], "take_columns", (a,), bw)


def take_rows(a, index) -> Tensor:
    a = _as_tensor(a)
    index = np.asarray(index)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], "take_rows", (a,), bw)


def diagonal(a) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[0]
    if a.ndim != 2 or a.shape[1] != n:
        raise ContractError("diagonal: square matrix required")
    return _make(np.diag(a.data).copy(), "diagonal", (a,), lambda g: (np.diag(g),))


# ----------------------------------------------------------------------------
# composite layers with fused backward rules


def softmax(a) -> Tensor:
    """Row-wise softmax of a 2-D tensor, stabilised by subtracting the row max."""
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ContractError("softmax: expects a 2-D tensor")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make(out, "softmax", (a,), bw)


def batchnorm(
    x,
    weight: Tensor,
    bias: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalisation over rows of an ``n x d`` tensor.

    In training mode the batch statistics are used and ``running_mean`` and
    ``running_var`` are updated in place (unbiased variance, as torch does).
    """
    x = _as_tensor(x)
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ContractError(f"batchnorm: input {x.shape} does not match {weight.shape[0]} features")
    n = x.shape[0]
    if training:
        if n < 2:
            raise ContractError("batchnorm: training mode needs at least 2 rows")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * n / (n - 1)
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * weight.data + bias.data

    def bw(g):
        gw = (g * xhat).sum(axis=0)
        gb = g.sum(axis=0)
        gx_hat = g * weight.data
        if training:
            gx = inv_std / n * (n * gx_hat - gx_hat.sum(axis=0) - xhat * (gx_hat * xhat).sum(axis=0))
        else:
            gx = gx_hat * inv_std
        return gx, gw, gb

    return _make(out, "batchnorm", (x, weight, bias), bw)


def dropout(x, p: float, training: bool, rng: Optional["Rng"]) -> Tensor:
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` at train time."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: p must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: training mode requires an Rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return _make(x.data * mask, "dropout", (x,), lambda g: (g * mask,))


# ----------------------------------------------------------------------------
# graph traversal


class Graph:
    """Nodes reachable from a root tensor, in creation (append) order."""

    def __init__(self, root: Tensor):
        seen: dict[int, Node] = {}
        stack = [root]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or id(node) in seen:
                continue
            seen[id(node)] = node
            stack.extend(node.inputs)
        self.nodes: list[Node] = sorted(seen.values(), key=lambda n: n.seq)

    def __len__(self) -> int:
        return len(self.nodes)

    def dump(self) -> str:
        index = {id(n): i for i, n in enumerate(self.nodes)}
        lines = []
        for i, n in enumerate(self.nodes):
            srcs = []
            for t in n.inputs:
                if t.node is not None:
                    srcs.append(f"%{index[id(t.node)]}")
                else:
                    srcs.append(t.name or ("leaf" if t.requires_grad else "const") + str(list(t.shape)))
            lines.append(f"%{i} = {n.op}({', '.join(srcs)})")
        return "\n".join(lines)


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf that requires it."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    for node in reversed(Graph(loss).nodes):
        # a node's output tensor is not referenced from the node, so pending
        # gradients are keyed by node identity
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp.node)
                grads[key] = gi if key not in grads else grads[key] + gi


# ----------------------------------------------------------------------------
# randomness


class Rng:
    """Seeded counter-based random stream (numpy's Philox).

    ``fork`` derives an independent child stream from a tuple of integer keys, so
    e.g. the dropout masks of epoch 3, step 7 never depend on how many draws
    happened earlier.
    """

    def __init__(self, seed: int, *keys: int):
        self.seed = int(seed)
        self.keys = tuple(int(k) for k in keys)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.keys])
        self._gen = np.random.Generator(np.random.Philox(ss))

    def fork(self, *keys: int) -> "Rng":
        return Rng(self.seed, *self.keys, *keys)

    def random(self, shape) -> np.ndarray:
        return self._gen.random(shape)

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self._gen.normal(0.0, scale, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def choice(self, n: int, size: int, replace: bool = False, p=None) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace, p=p)


# ----------------------------------------------------------------------------
# verification


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` must map ``x`` (and whatever it closes over) to a scalar tensor. The
    numeric derivative is a central difference with step ``h``.
    """
    x.requires_grad = True
    x.grad = None
    backward(f(x))
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    numeric = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(x).item()
            flat[i] = orig - h
            down = f(x).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


def gradcheck_many(f: Callable[[], Tensor], params: Iterable[Tensor], h: float = 1e-5) -> float:
    """Like :func:`gradcheck` but over every tensor in ``params`` at once."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(f())
    worst = 0.0
    with no_grad():
        for p in params:
            analytic = np.zeros_like(p.data) if p.grad is None else p.grad
            flat = p.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
            err = np.abs(analytic.reshape(-1) - numeric) / np.maximum(1.0, np.abs(analytic.reshape(-1)))
            if err.size:
                worst = max(worst, float(err.max()))
    return worst
