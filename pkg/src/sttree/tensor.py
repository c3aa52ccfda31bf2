"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable operation records a node carrying a global sequence
number. :func:`backward` rebuilds the tape of nodes reachable from the loss,
ordered by sequence number, and replays it in exact reverse order.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels


class TensorError(ValueError):
    """Shape, rank, or domain violation in a tensor operation."""


class NonFiniteError(TensorError):
    """NaN reached an operation that refuses it."""


_seq = itertools.count()
_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable recording for the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    __slots__ = ("seq", "parents", "backward_fn", "name")

    def __init__(self, parents, backward_fn, name):
        self.seq = next(_seq)
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    """A float64 array plus optional gradient and its recording node."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise TensorError(f"empty tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_rank(self)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _raise_rank(t):
    raise TensorError(f"expected a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn: Callable, name: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.node = Node(tuple(parents), backward_fn, name) if needs else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Ordered record of the operations that produced a value.

    Nodes are kept in recording order; :meth:`backward` walks them in
    exact reverse.
    """

    def __init__(self, nodes: list[tuple[Tensor, Node]]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        found: dict[int, tuple[Tensor, Node]] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in found:
                continue
            found[id(t)] = (t, t.node)
            stack.extend(t.node.parents)
        return cls(sorted(found.values(), key=lambda pair: pair[1].seq))

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, out: Tensor, seed: np.ndarray | None = None) -> None:
        grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data) if seed is None else seed}
        for t, node in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if p.node is None:
                    # leaf: accumulate into .grad
                    p.grad = pg.copy() if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    grads[key] = grads[key] + pg if key in grads else pg
        if out.node is None and out.requires_grad:
            g = grads[id(out)]
            out.grad = g.copy() if out.grad is None else out.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf tensor that influenced ``loss``."""
    if loss.data.size != 1:
        raise TensorError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape.from_output(loss).backward(loss)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
                 "div")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    out = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise TensorError("log of a non-positive value")
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def sqrt(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd < 0):
        raise TensorError("sqrt of a negative value")
    out = np.sqrt(xd)

    def bw(g):
        # subgradient 0 at the origin
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * 0.5 / safe, 0.0),)

    return _make(out, (x,), bw, "sqrt")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    xd = x.data
    inside = (xd > lo) & (xd < hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


# ---------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise TensorError(f"cannot reshape {src} to {tuple(shape)}") from exc
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(np.transpose(x.data, axes))
    return _make(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, idx) -> Tensor:
    src = x.shape

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return _make(np.stack([t.data for t in tensors], axis=axis), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)), "stack")


def roll(x: Tensor, shift: int, axis: int) -> Tensor:
    return _make(np.roll(x.data, shift, axis=axis), (x,),
                 lambda g: (np.roll(g, -shift, axis=axis),), "roll")


# ---------------------------------------------------------------------------
# reductions


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _make(np.asarray(out, dtype=np.float64), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum_(x, axis, keepdims), 1.0 / n)


def max_(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    """Max along one axis; the gradient goes to the first maximal index."""
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    lead = moved.shape[:-1]
    vals, idx = kernels.argmax_lastaxis(np.ascontiguousarray(moved.reshape(-1, moved.shape[-1])))
    vals = vals.reshape(lead)
    idx = idx.reshape(lead)
    out = np.expand_dims(vals, axis) if keepdims else vals
    src = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        full = np.zeros(src)
        np.put_along_axis(full, np.expand_dims(idx, axis), g, axis=axis)
        return (full,)

    res = _make(out, (x,), bw, "max")
    return res


def argmax(x: Tensor, axis: int) -> np.ndarray:
    """First-occurrence argmax (non-differentiable)."""
    axis = axis % x.ndim
    moved = np.moveaxis(x.data, axis, -1)
    _, idx = kernels.argmax_lastaxis(np.ascontiguousarray(moved.reshape(-1, moved.shape[-1])))
    return idx.reshape(moved.shape[:-1])


# ---------------------------------------------------------------------------
# linear algebra / nn


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x @ weight + bias, weight stored as (in, out)."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def conv1d(x: Tensor, kernel: Tensor, padding: str = "valid") -> Tensor:
    """Cross-correlation of x (B, C, L) with kernel (F, C, K).

    ``padding="same"`` zero-pads (K-1)//2 on the left and the rest on the
    right so the output keeps length L.
    """
    if x.ndim != 3 or kernel.ndim != 3:
        raise TensorError(f"conv1d expects 3-d operands, got {x.shape} and {kernel.shape}")
    b, c, length = x.shape
    f, ck, k = kernel.shape
    if c != ck:
        raise TensorError(f"conv1d channel mismatch: input {x.shape}, kernel {kernel.shape}")
    xd = x.data
    left = right = 0
    if padding == "same":
        left = (k - 1) // 2
        right = k - 1 - left
        xd = np.pad(xd, ((0, 0), (0, 0), (left, right)))
    elif padding != "valid":
        raise TensorError(f"unknown padding mode {padding!r}")
    padded_len = xd.shape[2]
    if k > padded_len:
        raise TensorError(f"kernel too long: K={k} > L={padded_len}")
    xd = np.ascontiguousarray(xd)
    wd = np.ascontiguousarray(kernel.data)
    out = kernels.conv1d_forward(xd, wd)

    def bw(g):
        g = np.ascontiguousarray(g)
        gx = gw = None
        if x.requires_grad:
            gx = kernels.conv1d_grad_input(g, wd, padded_len)
            if left or right:
                gx = gx[:, :, left : padded_len - right]
        if kernel.requires_grad:
            gw = kernels.conv1d_grad_kernel(g, xd, k)
        return gx, gw

    return _make(out, (x, kernel), bw, "conv1d")


def maxpool1d(x: Tensor, window="global") -> Tensor:
    """Max over non-overlapping windows of the last axis (B, C, L)."""
    length = x.shape[-1]
    if window == "global":
        return max_(x, axis=-1, keepdims=True)
    window = int(window)
    if window < 1 or window > length:
        raise TensorError(f"pool window {window} invalid for length {length}")
    n = length // window
    trimmed = x if n * window == length else getitem(x, (..., slice(0, n * window)))
    blocks = reshape(trimmed, trimmed.shape[:-1] + (n, window))
    return max_(blocks, axis=-1)


def avgpool1d(x: Tensor, window="global") -> Tensor:
    """Mean over non-overlapping windows of the last axis."""
    length = x.shape[-1]
    if window == "global":
        return mean(x, axis=-1, keepdims=True)
    window = int(window)
    if window < 1 or window > length:
        raise TensorError(f"pool window {window} invalid for length {length}")
    n = length // window
    trimmed = x if n * window == length else getitem(x, (..., slice(0, n * window)))
    blocks = reshape(trimmed, trimmed.shape[:-1] + (n, window))
    return mean(blocks, axis=-1)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if np.isnan(xd).any():
        raise NonFiniteError("softmax input contains NaN")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gain and shift by bias."""
    xd = x.data
    n = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gxhat = g * gd
        gx = inv / n * (n * gxhat - gxhat.sum(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        ggain = _unbroadcast(g * xhat, gd.shape)
        gbias = _unbroadcast(g, bias.shape)
        return gx, ggain, gbias

    return _make(xhat * gd + bias.data, (x, gain, bias), bw, "layer_norm")


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
