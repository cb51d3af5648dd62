"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray plus an optional backward record (parent tensors
and a closure that routes the output gradient to them). Graphs are built
dynamically per forward pass and freed once backward() has run. Float32 is
the training dtype; float64 is supported for gradient checking and metric
work.

Single-threaded by design: graph construction and backward never share
tensors across threads. numpy kernels may use threads internally.
"""

from __future__ import annotations

import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, RangeError, ShapeError

__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "matmul",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "conv1d",
    "maxpool1d",
    "embedding",
    "concat",
    "reshape",
    "transpose",
    "narrow",
    "mean",
    "tsum",
    "stop_gradient",
    "cross_entropy_with_logits",
    "backward",
    "sq_norm",
]


_grad_enabled = True


class no_grad:
    """Context manager: skip backward-graph construction inside the block."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense array with an optional gradient and backward-graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self):
        backward(self)

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operators -------------------------------------------------------------

    def __add__(self, other):
        return add(self, _lift(other, self.dtype))

    def __radd__(self, other):
        return add(_lift(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.dtype))

    def __rsub__(self, other):
        return sub(_lift(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _lift(other, self.dtype))

    def __rmul__(self, other):
        return mul(_lift(other, self.dtype), self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("tensor/tensor division is not part of the op set; multiply by a reciprocal")
        return mul(self, _lift(1.0 / other, self.dtype))

    def __neg__(self):
        return mul(self, _lift(-1.0, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, p)


def _lift(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise -----------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.shape))

    return Tensor._result(out_data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "sub")
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.shape))

    return Tensor._result(out_data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return Tensor._result(out_data, (a, b), bwd)


def pow_const(a: Tensor, p: float) -> Tensor:
    out_data = a.data ** p

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * p * a.data ** (p - 1))

    return Tensor._result(out_data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (a.data > 0))

    return Tensor._result(out_data, (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh approximation)."""
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + t)

    def bwd(g):
        if a.requires_grad:
            dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            a.accumulate_grad(g * (0.5 * (1.0 + t) + 0.5 * x * dt))

    return Tensor._result(out_data, (a,), bwd)


# -- linear algebra ---------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: operands must be at least 1-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else -1]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} do not match")
    out_data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a.accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b.accumulate_grad(_unbroadcast(gb, b.shape))

    return Tensor._result(out_data, (a, b), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis; rows sum to 1."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            a.accumulate_grad(out_data * (g - dot))

    return Tensor._result(out_data, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} must be ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx_hat = g * gain.data
            m1 = gx_hat.mean(axis=-1, keepdims=True)
            m2 = (gx_hat * xhat).mean(axis=-1, keepdims=True)
            x.accumulate_grad(inv * (gx_hat - m1 - xhat * m2))

    return Tensor._result(out_data, (x, gain, bias), bwd)


# -- sequence ops ------------------------------------------------------------------


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Temporal convolution.

    x: (B, T, C_in); weight: (K, C_in, C_out); bias: (C_out,).
    Output: (B, T_out, C_out) with T_out = (T + 2*padding - K) // stride + 1.
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d: need x (B,T,C) and weight (K,Cin,Cout), got {x.shape} and {weight.shape}")
    k, c_in, c_out = weight.shape
    if x.shape[2] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape} do not match weight {weight.shape}")
    b_sz, t_len = x.shape[0], x.shape[1]
    t_pad = t_len + 2 * padding
    if t_pad < k:
        raise ShapeError(f"conv1d: padded length {t_pad} shorter than kernel {k} for input {x.shape}")
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (0, 0)))
    t_out = (t_pad - k) // stride + 1
    # windows[b, t, k, c] = xp[b, t*stride + k, c]
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)[:, ::stride]  # (B,T_out,C,K)
    win = np.ascontiguousarray(win.transpose(0, 1, 3, 2)).reshape(b_sz, t_out, k * c_in)
    w_flat = weight.data.reshape(k * c_in, c_out)
    out_data = win @ w_flat
    if bias is not None:
        if bias.shape != (c_out,):
            raise ShapeError(f"conv1d: bias {bias.shape} must be ({c_out},)")
        out_data += bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(-1, c_out)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0))
        if weight.requires_grad:
            gw = win.reshape(-1, k * c_in).T @ g2
            weight.accumulate_grad(gw.reshape(k, c_in, c_out))
        if x.requires_grad:
            gwin = (g @ w_flat.T).reshape(b_sz, t_out, k, c_in)
            gxp = np.zeros((b_sz, t_pad, c_in), dtype=g.dtype)
            for kk in range(k):
                gxp[:, kk:kk + stride * t_out:stride] += gwin[:, :, kk]
            if padding:
                gxp = gxp[:, padding:t_pad - padding]
            x.accumulate_grad(gxp)

    return Tensor._result(out_data, parents, bwd)


def maxpool1d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping temporal max-pool; a trailing remainder is dropped."""
    if x.ndim != 3:
        raise ShapeError(f"maxpool1d: need (B,T,C), got {x.shape}")
    if factor < 1:
        raise ContractError(f"maxpool1d: factor must be >= 1, got {factor}")
    b_sz, t_len, c = x.shape
    t_out = t_len // factor
    if t_out == 0:
        raise ShapeError(f"maxpool1d: length {t_len} shorter than pool factor {factor}")
    blocks = x.data[:, :t_out * factor].reshape(b_sz, t_out, factor, c)
    idx = blocks.argmax(axis=2)
    out_data = np.take_along_axis(blocks, idx[:, :, None, :], axis=2)[:, :, 0, :]

    def bwd(g):
        if x.requires_grad:
            gb = np.zeros((b_sz, t_out, factor, c), dtype=g.dtype)
            np.put_along_axis(gb, idx[:, :, None, :], g[:, :, None, :], axis=2)
            gx = np.zeros((b_sz, t_len, c), dtype=g.dtype)
            gx[:, :t_out * factor] = gb.reshape(b_sz, t_out * factor, c)
            x.accumulate_grad(gx)

    return Tensor._result(out_data, (x,), bwd)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[idx[...], :]."""
    if table.ndim != 2:
        raise ShapeError(f"embedding: table must be 2-D, got {table.shape}")
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"embedding: index out of range for table {table.shape}")
    out_data = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[1]))
            table.accumulate_grad(gt)

    return Tensor._result(out_data, (table,), bwd)


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = list(tensors)
    if not ts:
        raise ContractError("concat: need at least one tensor")
    try:
        out_data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    ax = axis % out_data.ndim
    sizes = [t.shape[ax] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[ax] = slice(lo, hi)
                t.accumulate_grad(g[tuple(sl)])

    return Tensor._result(out_data, ts, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.shape))

    return Tensor._result(out_data, (x,), bwd)


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    out_data = x.data.transpose(axes)
    inv = np.argsort(axes)

    def bwd(g):
        if x.requires_grad:
            x.accumulate_grad(g.transpose(inv))

    return Tensor._result(out_data, (x,), bwd)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward zero-pads the complement."""
    n = x.shape[axis]
    if start < 0 or start + length > n:
        raise ShapeError(f"narrow: [{start}, {start + length}) out of range for axis {axis} of {x.shape}")
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out_data = x.data[sl]

    def bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[sl] = g
            x.accumulate_grad(gx)

    return Tensor._result(out_data, (x,), bwd)


# -- reductions --------------------------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    out_data = x.data.sum(axis=ax, keepdims=keepdims)

    def bwd(g):
        if x.requires_grad:
            if ax is None:
                x.accumulate_grad(np.broadcast_to(g, x.shape).astype(x.dtype, copy=True))
            else:
                if not keepdims:
                    g = np.expand_dims(g, ax)
                x.accumulate_grad(np.broadcast_to(g, x.shape).copy())

    return Tensor._result(out_data, (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    ax = _norm_axis(axis, x.ndim)
    count = x.size if ax is None else int(np.prod([x.shape[a] for a in ax]))
    out = tsum(x, axis=axis, keepdims=keepdims)
    return mul(out, _lift(1.0 / count, x.dtype))


def sq_norm(x: Tensor) -> Tensor:
    """Sum of squares over every element."""
    return tsum(mul(x, x))


# -- gradient control / losses -------------------------------------------------------


def stop_gradient(x: Tensor) -> Tensor:
    """Identity on values; blocks all gradient flow."""
    return Tensor(x.data, requires_grad=False)


def cross_entropy_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean cross-entropy between integer targets and rows of logits.

    logits: (N, K); targets: (N,) ints in [0, K).
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (N,K), got {logits.shape}")
    targets = np.asarray(targets)
    n, k = logits.shape
    if targets.shape != (n,):
        raise ShapeError(f"cross_entropy: targets {targets.shape} must be ({n},)")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise RangeError(
            f"cross_entropy: target outside [0, {k}): {int(targets.min())}..{int(targets.max())}")
    z = logits.data
    zmax = z.max(axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    sum_e = e.sum(axis=-1, keepdims=True)
    log_p = (z - zmax) - np.log(sum_e)
    out_data = np.asarray(-log_p[np.arange(n), targets].mean(), dtype=z.dtype)

    def bwd(g):
        if logits.requires_grad:
            p = e / sum_e
            p[np.arange(n), targets] -= 1.0
            logits.accumulate_grad((g / n) * p)

    return Tensor._result(out_data, (logits,), bwd)


# -- backward ------------------------------------------------------------------------


def backward(loss: Tensor):
    """Populate .grad on every reachable leaf tensor with requires_grad.

    Repeated calls without zeroing accumulate into leaf gradients. The loss
    must be scalar-shaped. Interior gradients are recomputed fresh per call
    and released afterwards.
    """
    if loss.size != 1:
        raise ContractError(f"backward: loss must be scalar-shaped, got shape {loss.shape}")
    # Iterative topological order (graphs can be thousands of nodes deep).
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    interior = [n for n in order if n._backward is not None]
    for node in interior:
        node.grad = None
    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in interior:
        node.grad = None
