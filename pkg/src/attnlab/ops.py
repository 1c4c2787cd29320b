"""Differentiable numpy ops.

Each op computes its forward value with numpy and registers a backward
closure on the active tape. Broadcasting is limited to leading (batch) axes:
the trailing axes of both operands must match exactly.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Rng, Tensor, as_tensor, record

KERNEL_WIDTH = 3


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` over axes that were broadcast."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_trailing(a: np.ndarray, b: np.ndarray, op: str, trailing: int) -> None:
    sa, sb = a.shape[a.ndim - trailing:], b.shape[b.ndim - trailing:]
    if trailing and sa != sb:
        raise ValueError(f"{op}: trailing shapes differ: {a.shape} vs {b.shape}")


def _const(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    out = a.data + b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return record("add", out, (a, b), bw)


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = _const(b, a)
    out = a.data - b.data
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), -_unbroadcast(g, sb)

    return record("sub", out, (a, b), bw)


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    b = _const(b, a)
    ad, bd = a.data, b.data
    out = ad * bd

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return record("mul", out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    out = a.data * c

    def bw(g):
        return (g * c,)

    return record("scale", out, (a,), bw)


def squared_relu(x: Tensor) -> Tensor:
    """max(0, x)**2; the adjoint at x == 0 is 0."""
    pos = np.maximum(x.data, 0)
    out = pos * pos

    def bw(g):
        return (g * (2 * pos),)

    return record("squared_relu", out, (x,), bw)


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape, dt = x.shape, x.dtype

    def bw(g):
        return (np.broadcast_to(g, shape).astype(dt),)

    return record("sum", np.asarray(x.data.sum(), dtype=dt), (x,), bw)


def mean(x: Tensor) -> Tensor:
    n = x.size
    shape, dt = x.shape, x.dtype

    def bw(g):
        return (np.full(shape, g / n, dtype=dt),)

    return record("mean", np.asarray(x.data.mean(), dtype=dt), (x,), bw)


# ---------------------------------------------------------------------------
# linear algebra and shape plumbing


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``.

    Leading axes broadcast numpy-style; adjoints are ``dA = dC @ B^T`` and
    ``dB = A^T @ dC`` summed over any broadcast axes.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2))
        gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return record("matmul", out, (a, b), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(src),)

    return record("reshape", out, (x,), bw)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))

    def bw(g):
        return (g.transpose(inv),)

    return record("transpose", out, (x,), bw)


def concat(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = tuple(xs)
    sizes = [t.shape[axis] for t in xs]
    out = np.concatenate([t.data for t in xs], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return record("concat", out, xs, bw)


def slice_axis(x: Tensor, start: int, stop: int | None, axis: int) -> Tensor:
    """``x[..., start:stop, ...]`` along ``axis``."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = np.ascontiguousarray(x.data[idx])
    shape, dt = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        full[idx] = g
        return (full,)

    return record("slice", out, (x,), bw)


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``."""
    ids = np.asarray(ids.data if isinstance(ids, Tensor) else ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"token id out of range [0, {table.shape[0]})")
    out = table.data[ids]
    shape, dt = table.shape, table.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dt)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return record("embedding", out, (table,), bw)


# ---------------------------------------------------------------------------
# normalisation and probability


def softmax_rows(x: Tensor, mask=None) -> Tensor:
    """Softmax over the last axis.

    ``mask`` is boolean, True where an entry may receive probability; masked
    entries come out exactly 0. It must match the trailing axes of ``x`` and
    broadcasts over the leading ones.
    """
    xd = x.data
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=bool)
        _check_trailing(xd, m, "softmax_rows", m.ndim)
        if not m.any(axis=-1).all():
            raise ValueError("softmax_rows: fully masked row (degenerate attention row)")
        z = np.where(m, xd, -np.inf)
    else:
        m = None
        z = xd
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax", y, (x,), bw)


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood (nats) of integer ``targets`` under ``logits`` [B, V]."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets).reshape(-1)
    ld = logits.data
    if ld.ndim != 2 or ld.shape[0] != t.shape[0]:
        raise ValueError(f"cross_entropy: logits {ld.shape} vs targets {t.shape}")
    n, v = ld.shape
    if t.size and (t.min() < 0 or t.max() >= v):
        raise IndexError(f"target out of range [0, {v})")
    rows = np.arange(n)
    logp = log_softmax_np(ld)
    loss = np.asarray(-logp[rows, t].mean(), dtype=ld.dtype)

    def bw(g):
        p = np.exp(logp)
        p[rows, t] -= 1
        return (p * (g / n),)

    return record("cross_entropy", loss, (logits,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    if d < 1:
        raise ValueError("layer_norm needs a non-empty last axis")
    return record("layer_norm", out, (x, gain, bias), bw)


def dropout(x: Tensor, p: float, rng: Rng | None, training: bool) -> Tensor:
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit Rng")
    keep = rng.random(x.shape, dtype=np.float64) >= p
    factor = (keep / (1.0 - p)).astype(x.dtype)
    out = x.data * factor

    def bw(g):
        return (g * factor,)

    return record("dropout", out, (x,), bw)


# ---------------------------------------------------------------------------
# sequence ops


def _causal_taps(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """sum_j k[..., j] * x shifted right by (width-1-j) along axis -2."""
    width = k.shape[-1]
    out = x * k[..., width - 1]
    L = x.shape[-2]
    for j in range(width - 1):
        shift = width - 1 - j
        if shift >= L:
            continue
        out[..., shift:, :] += x[..., :L - shift, :] * k[..., j]
    return out


def _causal_taps_adjoint(g: np.ndarray, k: np.ndarray) -> np.ndarray:
    width = k.shape[-1]
    out = g * k[..., width - 1]
    L = g.shape[-2]
    for j in range(width - 1):
        shift = width - 1 - j
        if shift >= L:
            continue
        out[..., :L - shift, :] += g[..., shift:, :] * k[..., j]
    return out


def causal_conv(x: Tensor, kernels: Tensor) -> Tensor:
    """Per-channel causal convolution along axis -2 of ``x`` [..., L, C].

    ``kernels`` has shape [..., C, width] and broadcasts against the leading
    axes of ``x`` (ignoring L). Tap ``width-1`` multiplies the current frame,
    tap 0 the frame ``width-1`` steps back; frames before the start are zero.
    """
    xd, kd = x.data, kernels.data
    if kd.shape[-2] != xd.shape[-1]:
        raise ValueError(f"causal_conv: {xd.shape[-1]} channels in x, kernels {kd.shape}")
    width = kd.shape[-1]
    # kernels viewed as [..., 1, C, width] so they broadcast over L
    kv = kd[..., None, :, :]
    out = _causal_taps(xd, kv)
    L = xd.shape[-2]

    def bw(g):
        gx = _causal_taps_adjoint(g, kv)
        cols = []
        for j in range(width):
            shift = width - 1 - j
            if shift >= L:
                cols.append(np.zeros(g.shape[:-2] + (g.shape[-1],), dtype=kd.dtype))
                continue
            cols.append((g[..., shift:, :] * xd[..., :L - shift, :]).sum(axis=-2))
        gk = np.stack(cols, axis=-1)
        return gx, _unbroadcast(gk, kd.shape)

    return record("causal_conv", out, (x, kernels), bw)


def depthwise_conv1d_causal(x: Tensor, kernels: Tensor) -> Tensor:
    """Width-3 causal depth-wise convolution of ``x`` [B, L, C] with ``kernels`` [C, 3].

    ``out[b, t, c] = sum_j kernels[c, j] * x[b, t-2+j, c]``, zero left padding,
    no bias and no channel mixing.
    """
    if kernels.ndim != 2 or kernels.shape[1] != KERNEL_WIDTH:
        raise ValueError(f"kernels must be [C, {KERNEL_WIDTH}], got {kernels.shape}")
    if x.ndim != 3 or x.shape[-1] != kernels.shape[0]:
        raise ValueError(f"channel mismatch: x {x.shape} vs kernels {kernels.shape}")
    return causal_conv(x, kernels)


def rel_shift(scores: Tensor, k_len: int) -> Tensor:
    """Re-index a per-offset score table to per-key scores.

    ``scores`` is [..., Lq, Lk+Lq-1] where column ``r`` holds relative offset
    ``Lk-1-r``. Query ``i`` (absolute position ``Lk-Lq+i``) and key ``j`` sit at
    offset ``Lk-Lq+i-j``, i.e. column ``Lq-1-i+j``. That is a fixed stride
    pattern over the flat buffer, so the gather is a single strided view.
    """
    sd = np.ascontiguousarray(scores.data)
    *lead, lq, r = sd.shape
    if r != k_len + lq - 1:
        raise ValueError(f"rel_shift: need {k_len + lq - 1} offsets, got {r}")
    step = sd.strides[-1]
    lead_strides = sd.strides[:-2]

    def view(buf):
        base = buf[..., 0, lq - 1:]
        return as_strided(base, shape=(*lead, lq, k_len),
                          strides=(*lead_strides, (r - 1) * step, step), writeable=True)

    out = view(sd).copy()
    dt = sd.dtype

    def bw(g):
        full = np.zeros(sd.shape, dtype=dt)
        view(full)[...] = g
        return (full,)

    return record("rel_shift", out, (scores,), bw)


def detach(x: Tensor) -> Tensor:
    return Tensor(x.data)


def sqrt_inv(n: int) -> float:
    return 1.0 / math.sqrt(n)
