"""Small reverse-mode autodiff engine on top of numpy.

Every primitive runs eagerly and, when a :class:`Tape` is active and at least
one input requires a gradient, appends a node to that tape.  ``backward``
replays the tape in reverse order.  Execution order is a topological order,
so every node is visited once.

Values are float32 by default.  ``set_precision("float64")`` (or the
``METAMT_FLOAT64=1`` environment variable) switches globally, which is used
for gradient verification only.
"""

from __future__ import annotations

import math
import os
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64 if os.environ.get("METAMT_FLOAT64", "") not in ("", "0") else np.float32
_TAPES: list["Tape"] = []

MASK_VALUE = -1e9


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class ContractError(RuntimeError):
    pass


def set_precision(name: str) -> None:
    global _DTYPE
    if name in ("float32", "32"):
        _DTYPE = np.float32
    elif name in ("float64", "64"):
        _DTYPE = np.float64
    else:
        raise ValueError(f"unknown precision {name!r}")


def get_dtype():
    return _DTYPE


class precision:
    """Context manager that temporarily switches the global precision."""

    def __init__(self, name: str):
        self.name = name
        self._old = None

    def __enter__(self):
        self._old = _DTYPE
        set_precision(self.name)
        return self

    def __exit__(self, *exc):
        global _DTYPE
        _DTYPE = self._old
        return False


class Tensor:
    __slots__ = ("data", "requires_grad", "_tape", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.requires_grad = requires_grad
        self._tape = None
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return sum_all(self)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes)


class Parameter(Tensor):
    """A named leaf tensor with a gradient accumulator."""

    __slots__ = ("path", "grad", "trainable")

    def __init__(self, path: str, value, trainable: bool = True):
        super().__init__(value, requires_grad=trainable, op="param")
        self.path = path
        self.trainable = trainable
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.path!r}, shape={self.shape})"


class Tape:
    """Ordered record of primitive applications."""

    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple, Callable]] = []
        self.visited = 0

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, out: Tensor, parents: tuple, fn: Callable) -> None:
        out._tape = self
        self.nodes.append((out, parents, fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1 or loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced under this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        self.visited = 0
        for out, parents, fn in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            self.visited += 1
            pgrads = fn(g)
            for p, pg in zip(parents, pgrads):
                if pg is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                if isinstance(p, Parameter):
                    p.grad += pg
                elif id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finish(op: str, out_data: np.ndarray, parents: tuple, fn: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"non-finite value produced by {op}")
    needs = any(isinstance(p, Tensor) and p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.op = op
    out._tape = None
    out.requires_grad = False
    if needs and _TAPES:
        out.requires_grad = True
        _TAPES[-1].record(out, parents, fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    return _finish("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0
    return _finish("relu", x.data * mask, (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, train: bool = True) -> Tensor:
    """Inverted dropout with a Bernoulli keep-mask drawn from ``rng``."""
    x = _as_tensor(x)
    if not train or rate <= 0.0:
        return x
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(_DTYPE) / _DTYPE(keep)
    return _finish("dropout", x.data * mask, (x,), lambda g: (g * mask,))


# -- shape ---------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    return _finish("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes=None) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes) if axes else tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.ascontiguousarray(x.data.transpose(axes)), (x,),
                   lambda g: (g.transpose(inv),))


# -- reductions ----------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape = x.shape
    return _finish("sum", np.asarray(x.data.sum(), dtype=_DTYPE), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(_DTYPE),))


def mean_all(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    shape, n = x.shape, x.data.size
    return _finish("mean", np.asarray(x.data.mean(), dtype=_DTYPE), (x,),
                   lambda g: (np.full(shape, g / n, dtype=_DTYPE),))


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``np.matmul``."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def fn(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                # fold batch dims into one big product: (N,k)^T (N,p)
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return (ga, gb)

    return _finish("matmul", ad @ bd, (a, b), fn)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


# -- normalisation / probabilities ---------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", y, (x,), fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse

    def fn(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _finish("log_softmax", y, (x,), fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine params must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _DTYPE(eps))
    xhat = xc * inv
    gd = gamma.data

    def fn(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return (dx, (g * xhat).sum(axis=lead), g.sum(axis=lead))

    return _finish("layer_norm", xhat * gd + beta.data, (x, gamma, beta), fn)


def embedding(table: Tensor, ids) -> Tensor:
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"embedding id out of range [0, {n})")
    shape = table.shape

    def fn(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _finish("embedding", table.data[ids], (table,), fn)


def cross_entropy(logits: Tensor, targets, pad_id: int | None = None,
                  label_smoothing: float = 0.0) -> Tensor:
    """Mean negative log-likelihood of ``targets`` over non-pad positions."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [batch x V] logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if t.shape[0] != n:
        raise ShapeError(f"{t.shape[0]} targets for {n} logit rows")
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target id out of range [0, {v})")
    keep = np.ones(n, dtype=bool) if pad_id is None else t != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy over zero non-pad targets")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    nll = -logp[rows, t]
    if label_smoothing > 0.0:
        nll = (1.0 - label_smoothing) * nll - label_smoothing * logp.mean(axis=1)
    loss = np.asarray((nll * keep).sum() / count, dtype=_DTYPE)

    def fn(g):
        p = np.exp(logp)
        target = np.zeros_like(p)
        target[rows, t] = 1.0 - label_smoothing
        if label_smoothing > 0.0:
            target += label_smoothing / v
        grad = (p - target) * (keep[:, None] / count)
        return (grad * g,)

    return _finish("cross_entropy", loss, (logits,), fn)


# -- helpers for code that does not need gradients --------------------------------


def no_tape():
    """Run a block without recording, even inside an active tape."""
    return _Suspend()


class _Suspend:
    def __enter__(self):
        self._saved = list(_TAPES)
        _TAPES.clear()
        return self

    def __exit__(self, *exc):
        _TAPES.extend(self._saved)
        return False


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, dim, 2, dtype=np.float64) * (-math.log(10000.0) / dim))
    pe = np.zeros((length, dim), dtype=np.float64)
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div[: dim // 2])
    return pe.astype(_DTYPE)


def check_finite(arrays: Sequence[np.ndarray], what: str) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {what}")
