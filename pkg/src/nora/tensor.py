"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op that touches a tensor with ``requires_grad`` records a node carrying
its parents and a closure mapping the output adjoint to parent adjoints.
Nodes are numbered at creation, so sorting the nodes reachable from a loss
by that number recovers insertion order; :meth:`Tape.backward` walks it in
reverse.  The graph is rebuilt on every forward pass.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Parameter",
    "Tape",
    "tensor",
    "no_grad",
    "grad_enabled",
    "apply_op",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "absolute",
    "exp",
    "log",
    "tanh",
    "gelu",
    "relu",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "concat",
]

_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class _Node:
    __slots__ = ("seq", "op", "parents", "backward")

    def __init__(self, op: str, parents: tuple, backward: Callable):
        self.seq = next(_seq)
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """An n-dimensional float64 array that may take part in autodiff."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    # -- basic properties --------------------------------------------------
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
        return self.transpose()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __deepcopy__(self, memo):
        # the generic deepcopy dominates adapter setup; the graph node is never copied
        new = object.__new__(type(self))
        memo[id(self)] = new
        new.__dict__.update(self.__dict__)
        new.data = self.data.copy()
        new.grad = None if self.grad is None else self.grad.copy()
        new._node = None
        return new

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic --------------------------------------------------------
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

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __abs__(self):
        return absolute(self)

    def __getitem__(self, idx):
        return index(self, idx)

    # -- reductions and shape ops -----------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else int(np.prod([self.shape[a] for a in _axes(axis)]))
        return reduce_sum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def tanh(self):
        return tanh(self)

    def abs(self):
        return absolute(self)

    def backward(self, seed=None) -> "Tape":
        """Backpropagate from this tensor; a non-scalar root needs a ``seed`` of its shape."""
        tape = Tape.from_loss(self, seeded=seed is not None)
        tape.backward(seed)
        return tape


class Parameter(Tensor):
    """A leaf tensor owned by a module.

    ``decay`` marks whether AdamW's decoupled weight decay applies to it.
    ``role`` is a free-form tag (``"weight"``, ``"nora_B"``, ...) used by the
    optimizer and the parameter accounting.
    """

    def __init__(self, data, trainable: bool = True, decay: bool = True, role: str = ""):
        super().__init__(data, requires_grad=trainable)
        self.decay = decay
        self.role = role

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, value: bool) -> None:
        self.requires_grad = bool(value)
        if not value:
            self.grad = None


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _axes(axis) -> tuple:
    return tuple(axis) if isinstance(axis, (tuple, list)) else (axis,)


def _check_finite(out: np.ndarray, op: str) -> None:
    # a finite sum implies finite entries; only a non-finite sum needs the full scan
    with np.errstate(over="ignore", invalid="ignore"):
        total = out.sum()
    if np.isfinite(total):
        return
    if not np.all(np.isfinite(out)):
        bad = np.argwhere(~np.isfinite(out))
        where = tuple(int(i) for i in bad[0]) if bad.size else ()
        raise NumericError(f"{op} produced a non-finite value at index {where}", index=where)


# pure data movement cannot create non-finite values from finite inputs
_MOVES = frozenset({"reshape", "transpose", "index", "concat"})


def apply_op(op: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` as a tensor and record ``backward`` if any parent needs grads.

    ``backward(g)`` receives the output adjoint and returns one adjoint (or
    ``None``) per parent.  Parent adjoints may carry broadcast dimensions; they
    are reduced to the parent's shape by the tape.
    """
    if op not in _MOVES:
        _check_finite(out, op)
    res = Tensor.__new__(Tensor)
    res.data = out
    res.grad = None
    res.name = None
    res._node = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    res.requires_grad = needs
    if needs:
        res._node = _Node(op, tuple(parents), backward)
    return res


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


class Tape:
    """Nodes reachable from one loss, in insertion order, with their adjoints."""

    def __init__(self, root: Tensor, nodes: list):
        self.root = root
        self.nodes = nodes
        self.gradients: dict[int, np.ndarray] = {}

    @classmethod
    def from_loss(cls, loss: Tensor, seeded: bool = False) -> "Tape":
        if not isinstance(loss, Tensor):
            raise ContractError("backward needs a Tensor")
        if loss.data.size != 1 and not seeded:
            raise ContractError(f"backward needs a scalar loss (or an explicit seed), got shape {loss.shape}")
        if loss._node is None and not loss.requires_grad:
            raise ContractError("loss is detached from any recorded graph")
        seen: set[int] = set()
        nodes = []
        stack = [loss._node] if loss._node is not None else []
        while stack:
            node = stack.pop()
            if node.seq in seen:
                continue
            seen.add(node.seq)
            nodes.append(node)
            for p in node.parents:
                if p._node is not None and p._node.seq not in seen:
                    stack.append(p._node)
        nodes.sort(key=lambda n: n.seq)
        return cls(loss, nodes)

    def backward(self, seed=None) -> None:
        root = self.root
        if seed is None:
            g0 = np.ones_like(root.data)
        else:
            g0 = np.asarray(seed, dtype=np.float64)
            if g0.size != root.data.size:
                raise ContractError(f"seed of shape {g0.shape} does not match root of shape {root.shape}")
            g0 = g0.reshape(root.shape)
        if root._node is None:
            _accumulate_leaf(root, g0)
            return
        grads = self.gradients
        grads[root._node.seq] = g0
        for node in reversed(self.nodes):
            g = grads.pop(node.seq, None)
            if g is None:
                continue
            pgs = node.backward(g)
            for parent, pg in zip(node.parents, pgs):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(np.asarray(pg, dtype=np.float64), parent.shape)
                if parent._node is not None:
                    key = parent._node.seq
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                else:
                    _accumulate_leaf(parent, pg)


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return apply_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return apply_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd
    _check_finite(out, "div")

    def back(g):
        q = g / bd
        return q, -q * out

    return apply_op("div", out, (a, b), back)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def power(a, k: int) -> Tensor:
    """``a ** k`` for a non-negative integer ``k``."""
    a = _as_tensor(a)
    if int(k) != k or k < 0:
        raise ContractError(f"power only supports non-negative integer exponents, got {k!r}")
    k = int(k)
    x = a.data
    if k == 0:
        return apply_op("pow", np.ones_like(x), (a,), lambda g: (None,))
    out = x**k

    def back(g):
        return (g * k * x ** (k - 1),)

    return apply_op("pow", out, (a,), back)


def absolute(a) -> Tensor:
    # subgradient at 0 is 0 (np.sign(0) == 0)
    a = _as_tensor(a)
    x = a.data
    return apply_op("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x)
    return apply_op("log", out, (a,), lambda g: (g / x,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return apply_op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


_SQRT_HALF = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _SQRT_HALF))
    out = x * cdf

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return apply_op("gelu", out, (a,), back)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    mask = (x > 0).astype(np.float64)
    return apply_op("relu", x * mask, (a,), lambda g: (g * mask,))


# -- linear algebra and shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands with ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return apply_op("matmul", out, (a, b), back)


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, tuple(ax % len(shape) for ax in _axes(axis)))
        return (np.broadcast_to(g, shape),)

    return apply_op("sum", np.asarray(out, dtype=np.float64), (a,), back)


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {a.shape} to {shape}") from None
    old = a.shape
    return apply_op("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return apply_op("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def index(a, idx) -> Tensor:
    a = _as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    out = np.array(a.data[idx], dtype=np.float64)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return apply_op("index", out, (a,), back)


def concat(tensors: Iterable, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return apply_op("concat", out, ts, back)


# -- fused ops ----------------------------------------------------------------


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", out, (a,), back)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part)."""
    a = _as_tensor(a)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = xc * inv

    def back(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * out).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - out * gxm),)

    return apply_op("layer_norm", out, (a,), back)


def cross_entropy(logits, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits`` (N x K) against integer labels."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects N x K logits, got {logits.shape}")
    y = np.asarray(labels, dtype=np.intp)
    if y.shape != (logits.shape[0],):
        raise DimensionError(f"labels shape {y.shape} does not match logits {logits.shape}")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(y))
    out = np.asarray(np.mean(lse - shifted[rows, y]))
    probs = np.exp(shifted - lse[:, None])

    def back(g):
        d = probs.copy()
        d[rows, y] -= 1.0
        return (d * (g / len(y)),)

    return apply_op("cross_entropy", out, (logits,), back)
