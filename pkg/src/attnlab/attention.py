"""Attention variants: MHA, MDHA, RMHA and RCMHA.

All four share one pipeline. They differ along two switches:

* ``conv``: a width-3 causal depth-wise convolution on projected Q, K, V
  (MDHA, RCMHA);
* ``relative``: Transformer-XL scoring with relative sinusoids and global
  content/position biases ``u``/``v`` (RMHA, RCMHA), instead of plain
  ``QK^T`` with absolute sinusoids added at the embedding (MHA, MDHA).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import ops
from .tensor import Rng, Tensor, as_tensor


class Variant(str, enum.Enum):
    MHA = "MHA"
    MDHA = "MDHA"
    RMHA = "RMHA"
    RCMHA = "RCMHA"

    @property
    def relative(self) -> bool:
        return self in (Variant.RMHA, Variant.RCMHA)

    @property
    def conv(self) -> bool:
        return self in (Variant.MDHA, Variant.RCMHA)

    @classmethod
    def parse(cls, name) -> "Variant":
        if isinstance(name, cls):
            return name
        key = str(name).strip().upper()
        try:
            return cls(key)
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown attention variant {name!r}; valid variants: {valid}") from None


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    heads: int
    p_drop: float = 0.0
    mem_len: int = 0
    kernel_width: int = 3

    def __post_init__(self):
        if self.d_model <= 0 or self.heads <= 0:
            raise ValueError("d_model and heads must be positive")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.mem_len < 0:
            raise ValueError("mem_len must be >= 0")
        if not 0.0 <= self.p_drop < 1.0:
            raise ValueError(f"p_drop must be in [0, 1), got {self.p_drop}")
        if self.kernel_width != 3:
            raise ValueError("kernel width is fixed at 3")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads


def param_shapes(variant: Variant, d_model: int) -> dict[str, tuple[int, ...]]:
    """Names and shapes of one attention module's parameters, in canonical order."""
    variant = Variant.parse(variant)
    shapes = {name: (d_model, d_model) for name in ("W_q", "W_k", "W_v", "W_o")}
    if variant.conv:
        for name in ("dwc_q", "dwc_k", "dwc_v"):
            shapes[name] = (d_model, 3)
    if variant.relative:
        shapes["W_kR"] = (d_model, d_model)
        shapes["u"] = (d_model,)
        shapes["v"] = (d_model,)
    return shapes


def check_params(variant: Variant, params: Mapping[str, Tensor], d_model: int) -> None:
    want = param_shapes(variant, d_model)
    have = set(params)
    if have != set(want):
        raise ValueError(f"{variant.value} expects parameters {sorted(want)}, got {sorted(have)}")
    for name, shape in want.items():
        if tuple(params[name].shape) != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")


# ---------------------------------------------------------------------------
# positional tables and masks


def sinusoid_table(positions, d_model: int, dtype=np.float64) -> np.ndarray:
    """Row p: sin(p / 10000^(2i/d)) at column 2i, cos(...) at 2i+1."""
    if d_model % 2:
        raise ValueError(f"sinusoid table needs an even width, got {d_model}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, d_model, 2, dtype=np.float64) / d_model))
    angles = pos * inv_freq
    table = np.empty((pos.shape[0], d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table.astype(dtype)


@lru_cache(maxsize=64)
def _rel_sinusoids(k_len: int, q_len: int, d_model: int, dtype_str: str) -> np.ndarray:
    arr = sinusoid_table(relative_offsets(k_len, q_len), d_model, np.dtype(dtype_str))
    arr.flags.writeable = False
    return arr


@lru_cache(maxsize=64)
def _abs_sinusoids(length: int, d_model: int, dtype_str: str) -> np.ndarray:
    arr = sinusoid_table(np.arange(length), d_model, np.dtype(dtype_str))
    arr.flags.writeable = False
    return arr


def relative_offsets(k_len: int, q_len: int) -> np.ndarray:
    """Offsets covered by the relative table, descending: Lk-1, ..., -(Lq-1)."""
    return np.arange(k_len - 1, -q_len, -1)


def causal_mask(q_len: int, total_len: int) -> np.ndarray:
    """Boolean [q_len, total_len]; query i sees keys 0 .. (total_len - q_len) + i."""
    if total_len < q_len:
        raise ValueError(f"total_len={total_len} is shorter than q_len={q_len}")
    mem = total_len - q_len
    return np.arange(total_len)[None, :] <= (np.arange(q_len)[:, None] + mem)


# ---------------------------------------------------------------------------
# heads


def split_heads(x: Tensor, heads: int) -> Tensor:
    """[B, L, d] -> [B, heads, L, d/heads]."""
    b, l, d = x.shape
    if d % heads:
        raise ValueError(f"d_model={d} is not divisible by heads={heads}")
    return ops.transpose(ops.reshape(x, (b, l, heads, d // heads)), (0, 2, 1, 3))


def merge_heads(x: Tensor) -> Tensor:
    """[B, heads, L, d_head] -> [B, L, heads*d_head]."""
    b, h, l, dh = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1, 3)), (b, l, h * dh))


def apply_dwc(x_heads: Tensor, kernels: Tensor) -> Tensor:
    """Causal width-3 convolution along L of ``x_heads`` [B, h, L, d_head].

    ``kernels`` is [h*d_head, 3]; channel ``c`` of head ``k`` uses row
    ``k*d_head + c``, the same channel order ``split_heads`` produces.
    """
    b, h, l, dh = x_heads.shape
    if kernels.shape != (h * dh, 3):
        raise ValueError(f"dwc kernels must be [{h * dh}, 3], got {kernels.shape}")
    return ops.causal_conv(x_heads, ops.reshape(kernels, (h, dh, 3)))


# ---------------------------------------------------------------------------
# scoring


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None, p_drop: float = 0.0,
                         rng: Rng | None = None, training: bool = False):
    """softmax(QK^T / sqrt(d) | mask) V for head tensors [B, h, L, d]."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"head width mismatch: Q {q.shape} vs K {k.shape}")
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(q.shape[-1]))
    return _attend(scores, v, mask, p_drop, rng, training)


def _attend(scores, v, mask, p_drop, rng, training):
    weights = ops.softmax_rows(scores, mask)
    dropped = ops.dropout(weights, p_drop, rng, training)
    return ops.matmul(dropped, v), weights


def _np(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def rel_scores_naive(q, k, r, u, v) -> np.ndarray:
    """Relative scores by explicit per-(i, j) offset lookup. Reference only.

    q: [B, h, Lq, d]; k: [B, h, Lk, d]; r: [h, Lk+Lq-1, d] projected relative
    encodings for offsets Lk-1 down to -(Lq-1); u, v: [h, d] (or flat [h*d]).
    score[i, j] = ((q_i + u) . k_j + (q_i + v) . r[offset(i, j)]) / sqrt(d)
    with offset(i, j) = (Lk - Lq + i) - j.
    """
    q, k, r = _np(q), _np(k), _np(r)
    _, h, lq, d = q.shape
    lk = k.shape[2]
    u = _np(u).reshape(h, d)
    v = _np(v).reshape(h, d)
    offsets = list(relative_offsets(lk, lq))
    if r.shape[1] != len(offsets):
        raise ValueError(f"relative table has {r.shape[1]} rows, need {len(offsets)} "
                         f"for offsets {lk - 1}..{-(lq - 1)}")
    row = np.empty((lq, lk), dtype=np.intp)
    for i in range(lq):
        for j in range(lk):
            row[i, j] = offsets.index((lk - lq + i) - j)
    gathered = r[:, row, :]  # [h, Lq, Lk, d]
    content = np.einsum("bhid,bhjd->bhij", q + u[None, :, None, :], k)
    position = np.einsum("bhid,hijd->bhij", q + v[None, :, None, :], gathered)
    return (content + position) / math.sqrt(d)


def rel_scores_shifted(q: Tensor, k: Tensor, r: Tensor, u: Tensor, v: Tensor) -> Tensor:
    """Same values as :func:`rel_scores_naive`, via one matmul against the
    whole offset table followed by :func:`ops.rel_shift`."""
    q, k, r, u, v = (as_tensor(t) for t in (q, k, r, u, v))
    _, h, lq, d = q.shape
    lk = k.shape[2]
    if r.shape[-2] != lk + lq - 1:
        raise ValueError(f"relative table has {r.shape[-2]} rows, need {lk + lq - 1}")
    u = ops.reshape(u, (h, 1, d))
    v = ops.reshape(v, (h, 1, d))
    content = ops.matmul(ops.add(q, u), ops.transpose(k, (0, 1, 3, 2)))
    position = ops.matmul(ops.add(q, v), ops.transpose(r, (0, 2, 1)))
    position = ops.rel_shift(position, lk)
    return ops.scale(ops.add(content, position), 1.0 / math.sqrt(d))


def relative_table(W_kR: Tensor, k_len: int, q_len: int, heads: int) -> Tensor:
    """Project the fixed relative sinusoids with ``W_kR`` and split into heads: [h, R, d_head]."""
    d_model = W_kR.shape[0]
    sin = Tensor(_rel_sinusoids(k_len, q_len, d_model, W_kR.dtype.str))
    r = ops.matmul(sin, W_kR)
    n = r.shape[0]
    return ops.transpose(ops.reshape(r, (n, heads, d_model // heads)), (1, 0, 2))


def absolute_encoding(length: int, d_model: int, dtype) -> np.ndarray:
    return _abs_sinusoids(length, d_model, np.dtype(dtype).str)


# ---------------------------------------------------------------------------
# full module


def attention_forward(variant, config: AttentionConfig, params: Mapping[str, Tensor], x: Tensor,
                      memory: Tensor | None = None, rng: Rng | None = None,
                      training: bool = False):
    """One attention module over ``x`` [B, L, d] with optional cached ``memory`` [B, M, d].

    Returns ``(y, weights)`` with ``y`` [B, L, d] and ``weights`` [B, h, L, M+L].
    """
    variant = Variant.parse(variant)
    check_params(variant, params, config.d_model)
    b, l, d = x.shape
    if d != config.d_model:
        raise ValueError(f"input width {d} != d_model {config.d_model}")
    if memory is not None and memory.shape[1] == 0:
        memory = None
    if memory is not None and (memory.shape[0] != b or memory.shape[2] != d):
        raise ValueError(f"memory shape {memory.shape} does not match input {x.shape}")
    m = 0 if memory is None else memory.shape[1]
    h = config.heads
    kv_in = x if memory is None else ops.concat([memory, x], axis=1)

    # conv variants see up to width-1 real memory frames as left context for Q
    ctx = min(m, config.kernel_width - 1) if variant.conv else 0
    q_in = x if ctx == 0 else ops.slice_axis(kv_in, m - ctx, None, axis=1)

    q = split_heads(ops.matmul(q_in, params["W_q"]), h)
    k = split_heads(ops.matmul(kv_in, params["W_k"]), h)
    v = split_heads(ops.matmul(kv_in, params["W_v"]), h)
    if variant.conv:
        q = apply_dwc(q, params["dwc_q"])
        if ctx:
            q = ops.slice_axis(q, ctx, None, axis=2)
        k = apply_dwc(k, params["dwc_k"])
        v = apply_dwc(v, params["dwc_v"])

    mask = causal_mask(l, m + l)
    if variant.relative:
        r = relative_table(params["W_kR"], m + l, l, h)
        scores = rel_scores_shifted(q, k, r, params["u"], params["v"])
    else:
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))),
                           1.0 / math.sqrt(config.d_head))
    ctx_heads, weights = _attend(scores, v, mask, config.p_drop, rng, training)
    y = ops.matmul(merge_heads(ctx_heads), params["W_o"])
    y = ops.dropout(y, config.p_drop, rng, training)
    return y, weights


def init_attention_params(variant, d_model: int, rng: Rng, dtype=np.float32) -> dict[str, Tensor]:
    """Glorot-uniform projections, zero u/v, delta [0, 0, 1] convolution kernels."""
    params = {}
    for name, shape in param_shapes(variant, d_model).items():
        if name.startswith("W_"):
            data = glorot_uniform(rng, shape, dtype)
        elif name.startswith("dwc_"):
            data = delta_kernels(shape[0], dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def glorot_uniform(rng: Rng, shape, dtype) -> np.ndarray:
    """U(-a, a) with a = sqrt(6 / (fan_in + fan_out)); std = sqrt(2 / (fan_in + fan_out))."""
    fan_in, fan_out = shape
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape, dtype)


def delta_kernels(channels: int, dtype=np.float32) -> np.ndarray:
    k = np.zeros((channels, 3), dtype=dtype)
    k[:, 2] = 1
    return k
