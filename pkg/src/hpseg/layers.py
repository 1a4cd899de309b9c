"""Parameterized building blocks: linear, norm, attention, MLP, convolution.

Each block registers its parameters into a ParamStore under a dotted name
prefix (e.g. "plant_decoder.layer0.self_attn.q_proj.weight") so optimizer
grouping and checkpointing can address them by path.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError
from .tensor import (
    ParamStore,
    Tensor,
    add,
    conv2d,
    gelu,
    layer_norm,
    linear_forward,
    matmul,
    reshape,
    softmax,
    transpose,
)

NEG_INF = -1e9


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Linear:
    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_out: int,
                 rng: np.random.Generator, dtype, group: str = "head",
                 learnable: bool = True):
        w = xavier_uniform(rng, (d_out, d_in), d_in, d_out, dtype)
        self.weight = store.add(f"{prefix}.weight", w, group, learnable)
        self.bias = store.add(f"{prefix}.bias", np.zeros(d_out, dtype=dtype), group, learnable)

    def __call__(self, x: Tensor) -> Tensor:
        return linear_forward(x, self.weight.tensor, self.bias.tensor)


class LayerNorm:
    def __init__(self, store: ParamStore, prefix: str, d: int, dtype,
                 group: str = "head", learnable: bool = True):
        self.gain = store.add(f"{prefix}.gain", np.ones(d, dtype=dtype), group, learnable)
        self.bias = store.add(f"{prefix}.bias", np.zeros(d, dtype=dtype), group, learnable)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain.tensor, self.bias.tensor)


class MultiHeadAttention:
    """Scaled dot-product attention with per-head splitting and output projection.

    ``attn_mask`` is boolean (queries x keys), True = attendable. A query row
    with no attendable key falls back to full attention for that row instead
    of producing NaNs.
    """

    def __init__(self, store: ParamStore, prefix: str, dim: int, heads: int,
                 rng: np.random.Generator, dtype, group: str = "head",
                 learnable: bool = True):
        if dim % heads != 0:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = 1.0 / np.sqrt(self.head_dim)
        self.q_proj = Linear(store, f"{prefix}.q_proj", dim, dim, rng, dtype, group, learnable)
        self.k_proj = Linear(store, f"{prefix}.k_proj", dim, dim, rng, dtype, group, learnable)
        self.v_proj = Linear(store, f"{prefix}.v_proj", dim, dim, rng, dtype, group, learnable)
        self.out_proj = Linear(store, f"{prefix}.out_proj", dim, dim, rng, dtype, group, learnable)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, attn_mask=None) -> Tensor:
        n = q.shape[0]
        m = k.shape[0]
        qh = transpose(reshape(self.q_proj(q), (n, self.heads, self.head_dim)), (1, 0, 2))
        kh = transpose(reshape(self.k_proj(k), (m, self.heads, self.head_dim)), (1, 0, 2))
        vh = transpose(reshape(self.v_proj(v), (m, self.heads, self.head_dim)), (1, 0, 2))
        scores = matmul(qh, transpose(kh, (0, 2, 1))) * self.scale
        if attn_mask is not None:
            mask = np.asarray(attn_mask, dtype=bool)
            full_rows = ~mask.any(axis=1)
            if full_rows.any():
                mask = mask.copy()
                mask[full_rows] = True
            bias = np.where(mask, 0.0, NEG_INF).astype(scores.dtype)
            scores = add(scores, bias[None, :, :])
        weights = softmax(scores, axis=-1)
        out = matmul(weights, vh)
        out = reshape(transpose(out, (1, 0, 2)), (n, self.dim))
        return self.out_proj(out)


class Mlp:
    """Stack of linear layers with GELU between them (not after the last)."""

    def __init__(self, store: ParamStore, prefix: str, dims: list[int],
                 rng: np.random.Generator, dtype, group: str = "head",
                 learnable: bool = True):
        self.layers = [
            Linear(store, f"{prefix}.fc{i}", dims[i], dims[i + 1], rng, dtype, group, learnable)
            for i in range(len(dims) - 1)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = gelu(x)
        return x


class Conv2d:
    def __init__(self, store: ParamStore, prefix: str, c_in: int, c_out: int,
                 kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, dtype, group: str = "head",
                 learnable: bool = True):
        fan_in = c_in * kernel * kernel
        fan_out = c_out * kernel * kernel
        w = xavier_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, fan_out, dtype)
        self.weight = store.add(f"{prefix}.weight", w, group, learnable)
        self.bias = store.add(f"{prefix}.bias", np.zeros(c_out, dtype=dtype), group, learnable)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight.tensor, self.bias.tensor,
                      stride=self.stride, padding=self.padding)


_POS_CACHE: dict[tuple, np.ndarray] = {}


def sine_position_encoding(channels: int, h: int, w: int, dtype=np.float32) -> np.ndarray:
    """2-D sinusoidal positional encoding of shape (channels, h, w).

    First half of the channels encodes y, second half x, sin/cos interleaved,
    coordinates normalized to (0, 2*pi].
    """
    key = (channels, h, w, np.dtype(dtype).name)
    cached = _POS_CACHE.get(key)
    if cached is not None:
        return cached
    half = channels // 2
    temperature = 10000.0
    ys = (np.arange(h, dtype=np.float64) + 1.0) / h * (2 * np.pi)
    xs = (np.arange(w, dtype=np.float64) + 1.0) / w * (2 * np.pi)
    dim_t = temperature ** (2 * (np.arange(half) // 2) / half)
    pos_y = ys[:, None] / dim_t[None, :]
    pos_x = xs[:, None] / dim_t[None, :]
    pos_y = np.stack([np.sin(pos_y[:, 0::2]), np.cos(pos_y[:, 1::2])], axis=2).reshape(h, -1)
    pos_x = np.stack([np.sin(pos_x[:, 0::2]), np.cos(pos_x[:, 1::2])], axis=2).reshape(w, -1)
    out = np.zeros((channels, h, w), dtype=dtype)
    out[:half] = pos_y.T[:, :, None]
    out[channels - half:] = pos_x.T[:, None, :]
    _POS_CACHE[key] = out
    return out
