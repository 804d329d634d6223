"""Reverse-mode automatic differentiation over numpy arrays.

Operations on :class:`Tensor` objects are recorded on the innermost active
:class:`Tape` whenever an input requires a gradient.  Because nodes are
appended in creation order, walking the tape backwards is a reverse
topological order, so each node is visited exactly once::

    with Tape() as tape:
        loss = ((x @ w) ** 2).sum()
    grads = tape.gradient(loss, {"w": w})
"""

from __future__ import annotations

from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

DTYPE = np.float64

_TAPES: List["Tape"] = []


class Tape:
    """Records operations and accumulates gradients on :meth:`gradient`."""

    def __init__(self):
        self.nodes: List["Tensor"] = []
        self.grads: Dict[int, np.ndarray] = {}

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def record(self, node: "Tensor") -> None:
        self.nodes.append(node)

    def backward(self, loss: "Tensor", seed: Optional[np.ndarray] = None) -> Dict[int, np.ndarray]:
        """Propagate from ``loss``; returns gradients keyed by ``id(tensor)``."""
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data) if seed is None else seed}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                pg = _unbroadcast(pg, parent.data.shape)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            # Interior gradients are no longer needed once propagated.
            if node is not loss:
                grads.pop(id(node), None)
        self.grads = grads
        return grads

    def gradient(self, loss: "Tensor", sources):
        """Gradients of scalar ``loss`` w.r.t. ``sources`` (a dict, list or single tensor).

        Sources that do not influence the loss get zero gradients.
        """
        if loss.data.size != 1:
            raise ValueError("gradient() needs a scalar loss")
        grads = self.backward(loss)

        def get(t):
            g = grads.get(id(t))
            return np.zeros_like(t.data) if g is None else g

        if isinstance(sources, Tensor):
            return get(sources)
        if isinstance(sources, dict):
            return {k: get(t) for k, t in sources.items()}
        return [get(t) for t in sources]


def _active_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


ArrayLike = Union["Tensor", np.ndarray, float, int]


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable] = None
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> Tuple[int, ...]:
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
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite value produced by {getattr(backward, '__qualname__', 'op')}")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        tape = _active_tape()
        if tape is not None:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
            tape.record(out)
    return out


# ---------------------------------------------------------------- elementwise
def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data))


def neg(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a: ArrayLike, exponent: float) -> Tensor:
    a = as_tensor(a)
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    c = float(exponent)
    return _make(a.data ** c, (a,), lambda g: (g * c * a.data ** (c - 1),))


def exp(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,))


def sqrt(a: ArrayLike) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def leaky_relu(a: ArrayLike, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    pos = a.data >= 0
    return _make(np.where(pos, a.data, slope * a.data), (a,), lambda g: (np.where(pos, g, slope * g),))


def softmax(a: ArrayLike, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (a,), backward)


# ----------------------------------------------------------------- reductions
def tsum(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims)
    shape = a.data.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: ArrayLike, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.data.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


# --------------------------------------------------------------------- shapes
def reshape(a: ArrayLike, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: ArrayLike, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a: ArrayLike, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def backward(g):
        z = np.zeros(shape, dtype=DTYPE)
        np.add.at(z, idx, g)
        return (z,)

    return _make(a.data[idx], (a,), backward)


def take(a: ArrayLike, indices, axis: int) -> Tensor:
    """``np.take`` along ``axis`` with a 1-D integer index array."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    shape = a.data.shape

    def backward(g):
        z = np.zeros(shape, dtype=DTYPE)
        np.add.at(np.moveaxis(z, axis, 0), indices, np.moveaxis(g, axis, 0))
        return (z,)

    return _make(np.take(a.data, indices, axis=axis), (a,), backward)


def concat(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, backward)


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(ts)))

    return _make(np.stack([t.data for t in ts], axis=axis), ts, backward)


# --------------------------------------------------------------- linear algebra
def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """Batched matrix product with numpy broadcasting; operands must be at least 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")

    def backward(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), backward)


def conv2d(x: ArrayLike, w: ArrayLike, b: Optional[ArrayLike] = None, padding: Optional[int] = None) -> Tensor:
    """Stride-1 2-D cross-correlation.

    ``x`` is (B, C, H, W), ``w`` is (O, C, k, k).  ``padding=None`` means
    "same" (k // 2 zeros on every side).
    """
    x, w = as_tensor(x), as_tensor(w)
    B, C, H, W_ = x.shape
    O, C2, k, k2 = w.shape
    if C != C2 or k != k2:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, kernel {w.shape}")
    p = k // 2 if padding is None else int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    Ho, Wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))  # B C Ho Wo k k
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)
    wf = w.data.reshape(O, C * k * k)
    out = (cols @ wf.T).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.data[None, :, None, None]
        parents.append(b)

    def backward(g):
        gf = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
        gw = (gf.T @ cols).reshape(w.data.shape)
        gcols = (gf @ wf).reshape(B, Ho, Wo, C, k, k)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[:, :, di:di + Ho, dj:dj + Wo] += gcols[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + H, p:p + W_] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _make(out, parents, backward)


def dropout(x: ArrayLike, rate: float, rng: np.random.Generator, train: bool = True) -> Tensor:
    """Inverted dropout: zero with probability ``rate``, rescale survivors by ``1/(1-rate)``."""
    x = as_tensor(x)
    if not train or rate == 0:
        return x
    if not 0 <= rate < 1:
        raise ValueError("dropout rate must be in [0, 1)")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, Tensor(mask))


def parameter(data, name: str = "") -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)
