"""Reverse-mode autodiff over float64 numpy arrays.

Deliberately small: only the primitives the models in this package are built
from. Every primitive carries a closed-form backward; the test suite holds
each one against central finite differences.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence, Tuple, Union

import numpy as np

Arrayish = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Operand shapes do not conform."""


_GRAD_ENABLED = True


class no_grad:
    """Context manager that disables graph construction (pure forward)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Tensor:
    """A float64 ndarray plus an optional backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data: Arrayish, requires_grad: bool = False):
        self.data = _arr(data)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    # -- graph machinery ----------------------------------------------------

    def _tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    def backward(self) -> None:
        """Backpropagate from a scalar; accumulates into .grad of leaves."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other: Arrayish) -> "Tensor":
        o = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data + o.data

        def bw(g, a=self, b=o):
            _acc(a, _unbroadcast(g, a.data.shape))
            _acc(b, _unbroadcast(g, b.data.shape))

        return _make(out_data, (self, o), bw)

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        def bw(g, a=self):
            _acc(a, -g)

        return _make(-self.data, (self,), bw)

    def __sub__(self, other: Arrayish) -> "Tensor":
        o = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data - o.data

        def bw(g, a=self, b=o):
            _acc(a, _unbroadcast(g, a.data.shape))
            _acc(b, _unbroadcast(-g, b.data.shape))

        return _make(out_data, (self, o), bw)

    def __rsub__(self, other: Arrayish) -> "Tensor":
        return Tensor(other) - self

    def __mul__(self, other: Arrayish) -> "Tensor":
        o = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data * o.data

        def bw(g, a=self, b=o):
            _acc(a, _unbroadcast(g * b.data, a.data.shape))
            _acc(b, _unbroadcast(g * a.data, b.data.shape))

        return _make(out_data, (self, o), bw)

    __rmul__ = __mul__

    def __truediv__(self, other: Arrayish) -> "Tensor":
        o = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data / o.data

        def bw(g, a=self, b=o):
            _acc(a, _unbroadcast(g / b.data, a.data.shape))
            _acc(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return _make(out_data, (self, o), bw)

    def __rtruediv__(self, other: Arrayish) -> "Tensor":
        return Tensor(other) / self

    def __matmul__(self, other: "Tensor") -> "Tensor":
        o = other if isinstance(other, Tensor) else Tensor(other)
        if self.data.ndim != 2 or o.data.ndim != 2:
            raise ShapeError(
                f"matmul needs 2-D operands, got {self.data.shape} and {o.data.shape}"
            )
        if self.data.shape[1] != o.data.shape[0]:
            raise ShapeError(
                f"matmul shape mismatch: {self.data.shape} @ {o.data.shape}"
            )
        out_data = self.data @ o.data

        def bw(g, a=self, b=o):
            _acc(a, g @ b.data.T)
            _acc(b, a.data.T @ g)

        return _make(out_data, (self, o), bw)

    def __pow__(self, p: float) -> "Tensor":
        if isinstance(p, Tensor):
            raise TypeError("only scalar exponents are supported")
        out_data = self.data ** p

        def bw(g, a=self, p=float(p)):
            _acc(a, g * p * a.data ** (p - 1.0))

        return _make(out_data, (self,), bw)

    # -- elementwise functions ------------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def bw(g, a=self, y=out_data):
            _acc(a, g * y)

        return _make(out_data, (self,), bw)

    def log(self) -> "Tensor":
        out_data = np.log(self.data)

        def bw(g, a=self):
            _acc(a, g / a.data)

        return _make(out_data, (self,), bw)

    def relu(self) -> "Tensor":
        keep = self.data > 0.0
        out_data = np.where(keep, self.data, 0.0)

        def bw(g, a=self, keep=keep):
            _acc(a, g * keep)

        return _make(out_data, (self,), bw)

    # -- reductions and reshaping ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g, a=self, axis=axis, keepdims=keepdims):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            _acc(a, np.broadcast_to(gg, a.data.shape))

        return _make(out_data, (self,), bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.data.shape[i] for i in axis]))
        else:
            n = self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, shape) -> "Tensor":
        out_data = self.data.reshape(shape)

        def bw(g, a=self):
            _acc(a, g.reshape(a.data.shape))

        return _make(out_data, (self,), bw)

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError(f".T needs a 2-D tensor, got shape {self.data.shape}")
        out_data = self.data.T

        def bw(g, a=self):
            _acc(a, g.T)

        return _make(out_data, (self,), bw)

    def __getitem__(self, idx) -> "Tensor":
        idx = _normalize_index(idx)
        out_data = self.data[idx]

        def bw(g, a=self, idx=idx):
            buf = np.zeros_like(a.data)
            if _is_fancy(idx):
                np.add.at(buf, idx, g)
            else:
                buf[idx] += g
            _acc(a, buf)

        return _make(out_data, (self,), bw)

    # -- softmax family ---------------------------------------------------------

    def softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def bw(g, a=self, y=y, axis=axis):
            dot = (g * y).sum(axis=axis, keepdims=True)
            _acc(a, (g - dot) * y)

        return _make(y, (self,), bw)

    def log_softmax(self, axis: int = -1) -> "Tensor":
        shifted = self.data - self.data.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out_data = shifted - lse
        soft = np.exp(out_data)

        def bw(g, a=self, soft=soft, axis=axis):
            _acc(a, g - soft * g.sum(axis=axis, keepdims=True))

        return _make(out_data, (self,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along an axis; backward slices the gradient back apart."""
    ts = [t if isinstance(t, Tensor) else Tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]

    def bw(g, ts=ts, sizes=sizes, axis=axis):
        offset = 0
        for t, s in zip(ts, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + s)
            _acc(t, g[tuple(sl)])
            offset += s

    return _make(out_data, tuple(ts), bw)


# -- internals ------------------------------------------------------------------


def _make(data: np.ndarray, parents: Tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p._tracked() for p in parents):
        out._parents = parents
        out._backward = backward
        out.requires_grad = True
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if not t._tracked():
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _normalize_index(idx):
    if isinstance(idx, list):
        return np.asarray(idx, dtype=np.intp)
    if isinstance(idx, tuple):
        return tuple(
            np.asarray(i, dtype=np.intp) if isinstance(i, (list, np.ndarray)) else i
            for i in idx
        )
    if isinstance(idx, np.ndarray) and idx.dtype != bool:
        return idx.astype(np.intp, copy=False)
    return idx


def _is_fancy(idx) -> bool:
    if isinstance(idx, np.ndarray):
        return True
    if isinstance(idx, tuple):
        return any(isinstance(i, np.ndarray) for i in idx)
    return False
