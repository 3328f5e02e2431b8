"""Layers and functional ops on top of the autograd tensor.

Modules register parameters by attribute assignment, torch-style, and every
model in the package is assembled from the pieces here. Initialisation is
always driven by an explicit numpy Generator so that a model is a pure
function of its config and seed.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterator, Optional, Sequence, Tuple

import numpy as np

from .tensor import ShapeError, Tensor, concat


class ConfigError(ValueError):
    """A layer configuration violates its constraints."""


class MaskedRowError(ValueError):
    """An attention query row has no allowed key."""


class UndefinedLossError(ValueError):
    """Cross entropy was asked to average over zero positions."""


class Parameter(Tensor):
    """A trainable leaf tensor with a grad buffer and a model-unique name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)


class Module:
    """Base class tracking child modules and parameters in definition order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, p in self._params.items():
            p.name = prefix + key
            yield p.name, p
        for key, m in self._modules.items():
            yield from m.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


class ModuleList(Module):
    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        self._items: list[Module] = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        self._modules[str(len(self._items))] = module
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i: int) -> Module:
        return self._items[i]


# -- functional ops ---------------------------------------------------------


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map out = x @ w + b for x [N, Din], w [Din, Dout], b [Dout]."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(
            f"linear shape mismatch: x {x.data.shape} vs w {w.data.shape}"
        )
    out = x @ w
    if b is not None:
        if b.data.shape != (w.data.shape[1],):
            raise ShapeError(
                f"linear bias shape {b.data.shape} does not match w {w.data.shape}"
            )
        out = out + b
    return out


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1, padding: Optional[int] = None) -> Tensor:
    """Same-padded 1-D convolution over time.

    x is [T, Din], kernels is [k, Din, Dout] with k odd, and the output has
    ceil(T / stride) rows. Implemented as gather + matmul so the backward
    pass falls out of the primitives.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"conv1d input must be [T, Din], got {x.data.shape}")
    if kernels.data.ndim != 3:
        raise ShapeError(f"conv1d kernels must be [k, Din, Dout], got {kernels.data.shape}")
    k, din, dout = kernels.data.shape
    t, xin = x.data.shape
    if t == 0:
        raise ShapeError("conv1d input is empty (T = 0)")
    if xin != din:
        raise ShapeError(f"conv1d channel mismatch: x {x.data.shape} vs kernels {kernels.data.shape}")
    if k % 2 == 0:
        raise ConfigError(f"conv1d kernel width must be odd, got {k}")
    if stride < 1:
        raise ConfigError(f"conv1d stride must be >= 1, got {stride}")
    same_pad = (k - 1) // 2
    if padding is None:
        padding = same_pad
    if padding != same_pad:
        raise ConfigError(f"conv1d requires same-padding (k-1)/2 = {same_pad}, got {padding}")

    t_out = (t + 2 * padding - k) // stride + 1
    if padding > 0:
        zeros = Tensor(np.zeros((padding, din)))
        xp = concat([zeros, x, zeros], axis=0)
    else:
        xp = x
    gather = (np.arange(t_out)[:, None] * stride + np.arange(k)[None, :]).astype(np.intp)
    cols = xp[gather]                          # [T', k, Din]
    cols = cols.reshape((t_out, k * din))
    return cols @ kernels.reshape((k * din, dout))


def conv1d_output_length(t: int, stride: int, kernel: int = 3) -> int:
    """Length law for same-padded conv1d: ceil(t / stride)."""
    return (t + 2 * ((kernel - 1) // 2) - kernel) // stride + 1


def scaled_dot_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    mask: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Tensor]:
    """Row-softmax attention; returns (output, weights).

    mask is boolean [Lq, Lk] with True marking allowed keys; masked weights
    come out exactly zero. A fully masked query row is a contract violation.
    """
    if q.data.ndim != 2 or k.data.ndim != 2 or v.data.ndim != 2:
        raise ShapeError("attention operands must be 2-D")
    d = q.data.shape[1]
    if d == 0 or k.data.shape[1] != d:
        raise ShapeError(f"attention dim mismatch: q {q.data.shape} vs k {k.data.shape}")
    if k.data.shape[0] != v.data.shape[0]:
        raise ShapeError(f"key/value length mismatch: {k.data.shape} vs {v.data.shape}")
    logits = (q @ k.T) * (1.0 / math.sqrt(d))
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != (q.data.shape[0], k.data.shape[0]):
            raise ShapeError(f"mask shape {m.shape} does not match logits {logits.data.shape}")
        dead = ~m.any(axis=1)
        if dead.any():
            raise MaskedRowError(f"query rows fully masked: {np.flatnonzero(dead).tolist()}")
        # -1e30 underflows to an exact zero weight after the softmax shift
        logits = logits + np.where(m, 0.0, -1e30)
    weights = logits.softmax(axis=-1)
    return weights @ v, weights


def cross_entropy(logits: Tensor, targets: np.ndarray, ignore_id: Optional[int] = None) -> Tensor:
    """Mean negative log-softmax over non-ignored positions."""
    if logits.data.ndim != 2:
        raise ShapeError(f"cross_entropy logits must be [N, C], got {logits.data.shape}")
    t = np.asarray(targets, dtype=np.intp)
    if t.ndim != 1 or t.shape[0] != logits.data.shape[0]:
        raise ShapeError(f"targets shape {t.shape} does not match logits {logits.data.shape}")
    n_classes = logits.data.shape[1]
    keep = np.ones(t.shape[0], dtype=bool) if ignore_id is None else t != ignore_id
    if not keep.any():
        raise UndefinedLossError("all positions ignored; loss undefined")
    sel = t[keep]
    if sel.size and (sel.min() < 0 or sel.max() >= n_classes):
        raise ShapeError(f"target ids outside [0, {n_classes})")
    ls = logits.log_softmax(axis=-1)
    rows = np.flatnonzero(keep).astype(np.intp)
    picked = ls[(rows, sel)]
    return -picked.mean()


# -- layer modules -----------------------------------------------------------


class Linear(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator,
                 bias: bool = True, scale: Optional[float] = None):
        super().__init__()
        s = scale if scale is not None else 1.0 / math.sqrt(din)
        self.weight = Parameter(rng.normal(0.0, s, size=(din, dout)))
        self.bias = Parameter(np.zeros(dout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv1d(Module):
    """Same-padded 1-D convolution layer with optional stride and bias."""

    def __init__(self, din: int, dout: int, kernel: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True):
        super().__init__()
        s = 1.0 / math.sqrt(kernel * din)
        self.kernels = Parameter(rng.normal(0.0, s, size=(kernel, din, dout)))
        self.bias = Parameter(np.zeros(dout)) if bias else None
        self.stride = stride

    def forward(self, x: Tensor) -> Tensor:
        out = conv1d(x, self.kernels, stride=self.stride)
        if self.bias is not None:
            out = out + self.bias
        return out


class Embedding(Module):
    def __init__(self, vocab: int, dim: int, rng: np.random.Generator, scale: float = 0.02):
        super().__init__()
        self.table = Parameter(rng.normal(0.0, scale, size=(vocab, dim)))
        self.vocab = vocab

    def forward(self, ids) -> Tensor:
        ids = np.asarray(ids, dtype=np.intp)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab):
            raise ShapeError(f"embedding id outside [0, {self.vocab})")
        return self.table[ids]


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(dim))
        self.beta = Parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / ((var + self.eps) ** 0.5) * self.gamma + self.beta


class MultiHeadSelfAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(dim, dim, rng, bias=False)
        self.wk = Linear(dim, dim, rng, bias=False)
        self.wv = Linear(dim, dim, rng, bias=False)
        self.wo = Linear(dim, dim, rng, bias=False)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        q, k, v = self.wq(x), self.wk(x), self.wv(x)
        outs = []
        for h in range(self.heads):
            sl = slice(h * self.head_dim, (h + 1) * self.head_dim)
            out, _ = scaled_dot_attention(q[:, sl], k[:, sl], v[:, sl], mask=mask)
            outs.append(out)
        return self.wo(concat(outs, axis=1))


class TransformerBlock(Module):
    """Pre-norm self-attention plus a position-wise conv feed-forward."""

    def __init__(self, dim: int, heads: int, ffn_dim: int, kernel: int,
                 rng: np.random.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"model dim {dim} not divisible by {heads} heads")
        self.ln_attn = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, rng)
        self.ln_ffn = LayerNorm(dim)
        self.conv_in = Conv1d(dim, ffn_dim, kernel, rng)
        self.conv_out = Conv1d(ffn_dim, dim, 1, rng)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = x + self.attn(self.ln_attn(x), mask=mask)
        return x + self.conv_out(self.conv_in(self.ln_ffn(x)).relu())


@lru_cache(maxsize=None)
def _sinusoid_cache(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length, dtype=np.float64)[:, None]
    idx = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * (idx // 2) / dim)
    pe = np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))
    pe.setflags(write=False)
    return pe


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Standard fixed sine/cosine position table, [length, dim]."""
    return _sinusoid_cache(length, dim)
