"""Array values with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a float64 numpy array. Tensors created through a
:class:`Tape` (``tape.param``) are tracked: every primitive applied to a
tracked tensor appends a node to the same tape, and :func:`backprop` walks the
tape backwards once to produce gradients for the trainable leaves.

Untracked tensors behave like plain constants and never touch a tape, so the
same model code runs for inference (constants only) and training (leaves on a
tape).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "tape", "index", "trainable")

    # ndarray <op> Tensor must dispatch to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, data, tape: "Tape | None" = None, index: int | None = None,
                 trainable: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.index = index
        self.trainable = trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item()

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", tracked" if self.tracked else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def _raise_item():
    raise ValueError("item() requires a single-element tensor")


@dataclass
class _Node:
    tensor: Tensor
    parents: tuple[Tensor, ...]
    vjp: Vjp | None


class Tape:
    """Ordered record of primitive operations.

    Recording order is a valid topological order, so a single reverse sweep
    visits each node exactly once. Gradients are kept outside the tape, which
    makes the tape reusable for repeated backward passes.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def param(self, data, trainable: bool = True) -> Tensor:
        """Add a leaf. Non-trainable leaves are tracked but never reported."""
        if isinstance(data, Tensor):
            data = data.data
        t = Tensor(np.array(data, dtype=np.float64), self, len(self.nodes), trainable)
        self.nodes.append(_Node(t, (), None))
        return t

    def record(self, data: np.ndarray, parents: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
        t = Tensor(data, self, len(self.nodes))
        self.nodes.append(_Node(t, parents, vjp))
        return t


def backprop(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of a scalar ``loss`` for every trainable leaf on ``tape``.

    Trainable leaves that do not influence the loss get a zero gradient. A loss
    that was never recorded (a constant) yields an empty map.
    """
    if loss.size != 1:
        raise ValueError("backprop requires scalar")
    if loss.tape is None:
        return {}
    if loss.tape is not tape:
        raise ValueError("loss was recorded on a different tape")

    grads: dict[int, np.ndarray] = {loss.index: np.ones_like(loss.data)}
    out: dict[Tensor, np.ndarray] = {}
    for node in reversed(tape.nodes[: loss.index + 1]):
        idx = node.tensor.index
        if node.vjp is None:
            if node.tensor.trainable:
                g = grads.get(idx)
                out[node.tensor] = g if g is not None else np.zeros_like(node.tensor.data)
            continue
        g = grads.pop(idx, None)
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or parent.tape is not tape:
                continue
            prev = grads.get(parent.index)
            grads[parent.index] = pg if prev is None else prev + pg
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Vjp) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is None:
                tape = p.tape
            elif p.tape is not tape:
                raise ValueError("operands are recorded on different tapes")
    if tape is None:
        return Tensor(data)
    return tape.record(data, parents, vjp)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape),
                            _unbroadcast(-g * out / bd, bd.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    p = float(exponent)
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


# -- elementwise unary ------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (0.5 * g / out,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


def clamp_min(a, low: float) -> Tensor:
    """max(a, low); the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    keep = a.data >= low
    return _make(np.where(keep, a.data, low), (a,), lambda g: (g * keep,))


# -- reductions and shape ---------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty reduction")
    return sum_(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), vjp)


def concat(parts: Iterable, axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([p.data for p in parts], axis=axis), parts,
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(parts: Iterable, axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    return _make(np.stack([p.data for p in parts], axis=axis), parts,
                 lambda g: tuple(np.moveaxis(g, axis, 0)))


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim == 0 or bd.ndim == 0:
        raise ValueError("matmul: scalar operands are not allowed")
    if ad.shape[-1] != bd.shape[-2 if bd.ndim > 1 else 0]:
        raise ValueError(f"matmul: inner dimensions differ ({ad.shape} @ {bd.shape})")
    a2 = ad[None, :] if ad.ndim == 1 else ad
    b2 = bd[:, None] if bd.ndim == 1 else bd
    out = a2 @ b2

    def vjp(g):
        g2 = g
        if ad.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bd.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        ga = _unbroadcast(ga, a2.shape)
        gb = _unbroadcast(gb, b2.shape)
        return ga.reshape(ad.shape), gb.reshape(bd.shape)

    if ad.ndim == 1:
        out = out[..., 0, :]
    if bd.ndim == 1:
        out = out[..., 0]
    return _make(out, (a, b), vjp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), vjp)


# -- statistics -------------------------------------------------------------

STD_FLOOR = 1e-5


def tensor_stats(x, axes=None, keepdims: bool = False) -> tuple[Tensor, Tensor]:
    """Population mean and standard deviation over ``axes``.

    The std is floored at ``STD_FLOOR`` so constant features never produce a
    division by zero downstream. The floor is applied to the variance
    (``STD_FLOOR**2``), which keeps the gradient finite at zero spread.
    """
    x = as_tensor(x)
    red = _norm_axes(axes, x.ndim)
    if not red or any(x.shape[ax] == 0 for ax in red):
        raise ValueError("tensor_stats: empty reduction")
    mu = mean(x, red, keepdims=True)
    var = mean(square(x - mu), red, keepdims=True)
    std = sqrt(clamp_min(var, STD_FLOOR ** 2))
    if not keepdims:
        mu = reshape(mu, tuple(n for i, n in enumerate(x.shape) if i not in red))
        std = reshape(std, mu.shape)
    return mu, std


def linear(x, weight, bias=None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else add(out, bias)


def cosine_similarity(a, b, axis: int = -1, eps: float = 1e-8) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    dot = sum_(a * b, axis)
    na = sqrt(sum_(square(a), axis) + eps * eps)
    nb = sqrt(sum_(square(b), axis) + eps * eps)
    return dot / (na * nb)


def normalize(a, axis: int = -1, eps: float = 1e-8) -> Tensor:
    a = as_tensor(a)
    return a / sqrt(sum_(square(a), axis, keepdims=True) + eps * eps)
