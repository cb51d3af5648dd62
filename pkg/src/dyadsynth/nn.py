"""Model building blocks on top of the autodiff tensor.

Layers register their parameters into a ParameterStore under a dotted name
prefix at construction time, so checkpoints are flat name -> array maps and
construction order fixes iteration order.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .params import ParameterStore
from .tensor import (
    Tensor,
    concat,
    conv1d,
    gelu,
    layer_norm,
    matmul,
    maxpool1d,
    narrow,
    relu,
    reshape,
    softmax,
    transpose,
)

NEG_INF = -1e9  # additive attention mask value; underflows to 0 after softmax


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Linear:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, bias: bool = True, init_scale: float = 1.0):
        w = xavier_uniform(rng, d_in, d_out, (d_in, d_out))
        if init_scale != 1.0:
            w *= init_scale
        self.w = store.add(f"{name}.w", w)
        self.b = store.add(f"{name}.b", np.zeros(d_out, dtype=np.float32)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.w)
        if self.b is not None:
            y = y + self.b
        return y


class LayerNorm:
    def __init__(self, store: ParameterStore, name: str, dim: int):
        self.g = store.add(f"{name}.g", np.ones(dim, dtype=np.float32))
        self.b = store.add(f"{name}.b", np.zeros(dim, dtype=np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.g, self.b)


class Embedding:
    def __init__(self, store: ParameterStore, name: str, count: int, dim: int,
                 rng: np.random.Generator, scale: float = 0.02):
        self.table = store.add(f"{name}.table",
                               (scale * rng.standard_normal((count, dim))).astype(np.float32))

    def __call__(self, idx: np.ndarray) -> Tensor:
        from .tensor import embedding

        return embedding(self.table, idx)


class PositionTable:
    """Learned positional encodings for sequences up to max_len."""

    def __init__(self, store: ParameterStore, name: str, max_len: int, dim: int,
                 rng: np.random.Generator):
        self.max_len = max_len
        self.table = store.add(f"{name}.pos",
                               (0.02 * rng.standard_normal((max_len, dim))).astype(np.float32))

    def __call__(self, length: int) -> Tensor:
        if length > self.max_len:
            raise ShapeError(f"sequence length {length} exceeds positional table ({self.max_len},)")
        return narrow(self.table, 0, 0, length)


class MultiHeadAttention:
    """Scaled dot-product attention with separate query and key/value sources."""

    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int,
                 rng: np.random.Generator):
        if dim % heads:
            raise ShapeError(f"attention dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.wq = Linear(store, f"{name}.wq", dim, dim, rng)
        self.wk = Linear(store, f"{name}.wk", dim, dim, rng)
        self.wv = Linear(store, f"{name}.wv", dim, dim, rng)
        self.wo = Linear(store, f"{name}.wo", dim, dim, rng)
        self.last_attention: np.ndarray | None = None  # (B, H, Tq, Tk) probs, for inspection

    def _split(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        return transpose(reshape(x, (b, t, self.heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, q_src: Tensor, kv_src: Tensor,
                 key_mask: np.ndarray | None = None) -> Tensor:
        """key_mask: optional (B, T_k) boolean array; False keys are unattendable."""
        if q_src.shape[0] != kv_src.shape[0] or q_src.shape[2] != kv_src.shape[2]:
            raise ShapeError(f"attention: query {q_src.shape} vs key/value {kv_src.shape}")
        b, tq, _ = q_src.shape
        tk = kv_src.shape[1]
        q = self._split(self.wq(q_src))
        k = self._split(self.wk(kv_src))
        v = self._split(self.wv(kv_src))
        logits = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        if key_mask is not None:
            if key_mask.shape != (b, tk):
                raise ShapeError(f"attention: key mask {key_mask.shape} must be ({b}, {tk})")
            bias = np.where(key_mask, 0.0, NEG_INF).astype(np.float32)
            logits = logits + Tensor(bias[:, None, None, :])
        attn = softmax(logits)
        self.last_attention = attn.data
        out = matmul(attn, v)
        out = reshape(transpose(out, (0, 2, 1, 3)), (b, tq, self.dim))
        return self.wo(out)


class FeedForward:
    def __init__(self, store: ParameterStore, name: str, dim: int, hidden_mult: int,
                 rng: np.random.Generator):
        self.fc1 = Linear(store, f"{name}.fc1", dim, dim * hidden_mult, rng)
        self.fc2 = Linear(store, f"{name}.fc2", dim * hidden_mult, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class TransformerBlock:
    """Pre-norm self-attention block."""

    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int,
                 rng: np.random.Generator, ffn_mult: int = 4):
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim)
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, heads, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.ffn = FeedForward(store, f"{name}.ffn", dim, ffn_mult, rng)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, key_mask)
        return x + self.ffn(self.ln2(x))


class CrossAttentionBlock:
    """Pre-norm block whose queries come from a fixed per-call source."""

    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int,
                 rng: np.random.Generator, ffn_mult: int = 4):
        self.ln_q = LayerNorm(store, f"{name}.lnq", dim)
        self.ln_kv = LayerNorm(store, f"{name}.lnkv", dim)
        self.attn = MultiHeadAttention(store, f"{name}.attn", dim, heads, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.ffn = FeedForward(store, f"{name}.ffn", dim, ffn_mult, rng)

    def __call__(self, stream: Tensor, queries: Tensor) -> Tensor:
        stream = stream + self.attn(self.ln_q(queries), self.ln_kv(stream))
        return stream + self.ffn(self.ln2(stream))


class Transformer:
    """Stack of self-attention blocks with a final norm."""

    def __init__(self, store: ParameterStore, name: str, dim: int, heads: int,
                 layers: int, rng: np.random.Generator):
        self.blocks = [TransformerBlock(store, f"{name}.block{i}", dim, heads, rng)
                       for i in range(layers)]
        self.ln_f = LayerNorm(store, f"{name}.lnf", dim)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        for blk in self.blocks:
            x = blk(x, key_mask)
        return self.ln_f(x)


class ConvDownsampler:
    """Stages of (conv, relu, max-pool 2); halves the length per stage."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 stages: int, kernel: int, rng: np.random.Generator):
        self.kernel = kernel
        self.pad = kernel // 2
        self.weights = []
        self.biases = []
        for i in range(stages):
            ci = d_in if i == 0 else d_out
            w = store.add(f"{name}.conv{i}.w",
                          xavier_uniform(rng, kernel * ci, d_out, (kernel, ci, d_out)))
            b = store.add(f"{name}.conv{i}.b", np.zeros(d_out, dtype=np.float32))
            self.weights.append(w)
            self.biases.append(b)

    def __call__(self, x: Tensor) -> Tensor:
        for w, b in zip(self.weights, self.biases):
            x = conv1d(x, w, b, stride=1, padding=self.pad)
            x = relu(x)
            x = maxpool1d(x, 2)
        return x


class ConvUpsampler:
    """Mirror of ConvDownsampler: repeat-interpolate x2 then conv, per stage."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 stages: int, kernel: int, rng: np.random.Generator):
        self.kernel = kernel
        self.pad = kernel // 2
        self.weights = []
        self.biases = []
        for i in range(stages):
            co = d_out if i == stages - 1 else d_in
            w = store.add(f"{name}.conv{i}.w",
                          xavier_uniform(rng, kernel * d_in, co, (kernel, d_in, co)))
            b = store.add(f"{name}.conv{i}.b", np.zeros(co, dtype=np.float32))
            self.weights.append(w)
            self.biases.append(b)
        self.stages = stages

    def __call__(self, x: Tensor) -> Tensor:
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = repeat_interleave_time(x, 2)
            x = conv1d(x, w, b, stride=1, padding=self.pad)
            if i < self.stages - 1:
                x = relu(x)
        return x


def repeat_interleave_time(x: Tensor, factor: int) -> Tensor:
    """(B, T, C) -> (B, T*factor, C) by repeating each step."""
    b, t, c = x.shape
    tiled = concat([reshape(x, (b, t, 1, c))] * factor, axis=2)
    return reshape(tiled, (b, t * factor, c))
