"""Dense tensors with reverse-mode automatic differentiation.

Data live in numpy arrays, float32 unless another dtype is requested
explicitly (the gradient checker runs in float64). Each differentiable
operation records its inputs and a backward rule on the output tensor;
``Tensor.backward`` orders the recorded graph topologically and replays the
rules in reverse.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    return np.ascontiguousarray(data, dtype=np.float32 if dtype is None else dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.name = name

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        live = tuple(p for p in parents if p.requires_grad)
        if _grad_enabled and live:
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray):
        if not self.requires_grad:
            return
        if g.dtype != self.data.dtype:
            g = g.astype(self.data.dtype)
        if self.grad is None:
            self.grad = np.array(g, copy=True).reshape(self.shape)
        else:
            self.grad = self.grad + g.reshape(self.shape)

    # -- backward ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None):
        """Reverse-mode pass from this tensor (defaults to a scalar seed of 1)."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
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
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported; multiply by a constant instead")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

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
        return transpose(self, axes if axes else None)

    def relu(self):
        return relu(self)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return Tensor._result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return Tensor._result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _wrap(a)
    b = _wrap(b, a)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._result(a.data * b.data, (a, b), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return Tensor._result(out, (x,), backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return Tensor._result(np.log(x.data), (x,), backward)


def relu(x: Tensor) -> Tensor:
    """max(0, x); the gradient at exactly 0 is 0 and NaN inputs stay NaN."""
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return Tensor._result(np.maximum(x.data, 0).astype(x.data.dtype, copy=False), (x,), backward)


# -- reductions and shape ---------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return Tensor._result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return Tensor._result(x.data.reshape(shape), (x,), backward)


def flatten(x: Tensor) -> Tensor:
    """Collapse all axes after the first."""
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (g.transpose(inverse),)

    return Tensor._result(x.data.transpose(axes), (x,), backward)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.data.dtype

    basic = all(isinstance(i, (int, slice, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(np.ascontiguousarray(x.data[idx]), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching rules; inputs need at least 2 axes."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._result(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def _im2col3(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    ho, wo = h - 2, w - 2
    cols = np.empty((b, c, 9, ho, wo), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, 3 * i + j] = x[:, :, i:i + ho, j:j + wo]
    return cols.reshape(b, c * 9, ho * wo)


def conv2d_3x3_valid(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """Valid 3x3 cross-correlation with unit stride plus per-channel bias.

    ``x`` is ``[C_in, H, W]`` or batched ``[B, C_in, H, W]``; kernels are
    ``[C_out, C_in, 3, 3]``.
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    xd = x.data if batched else x.data[None]
    bsz, cin, h, w = xd.shape
    if h < 3 or w < 3:
        raise DimensionError(f"conv input spatial extent must be >= 3, got {h}x{w}")
    if kernels.ndim != 4 or kernels.shape[1:] != (cin, 3, 3):
        raise DimensionError(f"kernels {kernels.shape} do not match input channels {cin}")
    cout = kernels.shape[0]
    if bias.shape != (cout,):
        raise DimensionError(f"bias {bias.shape} does not match {cout} output channels")
    ho, wo = h - 2, w - 2
    cols = _im2col3(xd)
    kmat = kernels.data.reshape(cout, cin * 9)
    out = np.matmul(kmat, cols) + bias.data[None, :, None]
    out = out.reshape(bsz, cout, ho, wo)
    if not batched:
        out = out[0]

    def backward(g):
        g = (g if batched else g[None]).reshape(bsz, cout, ho * wo)
        gx = gk = gb = None
        if kernels.requires_grad:
            gk = np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(kernels.shape)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(kmat.T, g).reshape(bsz, cin, 9, ho, wo)
            full = np.zeros((bsz, cin, h, w), dtype=xd.dtype)
            for i in range(3):
                for j in range(3):
                    full[:, :, i:i + ho, j:j + wo] += gcols[:, :, 3 * i + j]
            gx = full if batched else full[0]
        return gx, gk, gb

    return Tensor._result(np.ascontiguousarray(out), (x, kernels, bias), backward)


# -- normalisation and probabilities ----------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._result(s, (x,), backward)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [B,K], got {logits.shape}")
    bsz, k = logits.shape
    if bsz < 1 or labels.shape[0] != bsz:
        raise ValueError(f"need one label per row: {labels.shape[0]} labels for {bsz} rows")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(bsz)
    loss = np.asarray((lse - shifted[rows, labels]).mean(), dtype=z.dtype)

    def backward(g):
        p = np.exp(shifted - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / bsz),)

    return Tensor._result(loss, (logits,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis (population variance) then apply gain/shift."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gx = gg = gs = None
        if gain.requires_grad:
            gg = (g * xhat).sum(axis=lead)
        if shift.requires_grad:
            gs = g.sum(axis=lead)
        if x.requires_grad:
            gxhat = g * gain.data
            gx = (inv / d) * (d * gxhat - gxhat.sum(axis=-1, keepdims=True)
                              - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True))
        return gx, gg, gs

    return Tensor._result(out.astype(x.data.dtype, copy=False), (x, gain, shift), backward)


def multi_head_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         heads: int = 1, return_weights: bool = False):
    """Scaled dot-product self-attention over ``x`` of shape ``[..., T, D]``."""
    d = x.shape[-1]
    if heads < 1 or d % heads:
        raise ConfigurationError(f"hidden dimension {d} is not divisible by {heads} heads")
    dh = d // heads
    q, k, v = matmul(x, wq), matmul(x, wk), matmul(x, wv)
    if heads > 1:
        lead = x.shape[:-1]

        def split(t):
            t = reshape(t, lead + (heads, dh))
            axes = list(range(t.ndim))
            axes[-3], axes[-2] = axes[-2], axes[-3]
            return transpose(t, tuple(axes))

        q, k, v = split(q), split(k), split(v)
    scores = matmul(q, swap_last(k)) * (1.0 / math.sqrt(dh))
    weights = softmax(scores, axis=-1)
    h = matmul(weights, v)
    if heads > 1:
        axes = list(range(h.ndim))
        axes[-3], axes[-2] = axes[-2], axes[-3]
        h = reshape(transpose(h, tuple(axes)), x.shape)
    out = matmul(h, wo)
    return (out, weights) if return_weights else out


def sample_normal(rng, shape, mean: float = 0.0, std: float = 1.0, requires_grad: bool = False) -> Tensor:
    """Box-Muller normal draw from ``rng`` as a float32 tensor."""
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    return Tensor(rng.normal(tuple(shape), mean, std), requires_grad=requires_grad, dtype=np.float32)
