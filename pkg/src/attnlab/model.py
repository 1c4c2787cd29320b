"""Transformer-XL style decoder-only character model.

Pre-norm residual blocks of {attention variant, Squared-ReLU FFN}, with
segment-level recurrence: every block caches its last ``mem_len`` inputs,
detached, and attends over them on the next segment.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from . import ops
from .attention import (AttentionConfig, Variant, absolute_encoding, attention_forward,
                        delta_kernels, glorot_uniform, param_shapes)
from .tensor import Rng, Tensor, resolve_dtype

Params = dict[str, Tensor]
MemoryState = list  # one Tensor [B, M, d_model] per layer, M <= mem_len


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 128
    heads: int = 4
    p_drop: float = 0.0
    d_ff: int | None = None
    seg_len: int = 64
    mem_len: int | None = None
    variant: Variant = Variant.RCMHA

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.mem_len is None:
            object.__setattr__(self, "mem_len", self.seg_len)
        for name in ("vocab_size", "n_layers", "d_model", "heads", "d_ff", "seg_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        self.attention  # validates divisibility, p_drop, mem_len

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.d_model, self.heads, self.p_drop, self.mem_len)

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


def param_shapes_for(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in the canonical (checkpoint) order."""
    d, f, V = config.d_model, config.d_ff, config.vocab_size
    shapes = {"embed": (V, d)}
    for l in range(config.n_layers):
        p = f"blocks.{l}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        for name, shape in param_shapes(config.variant, d).items():
            shapes[p + "attn." + name] = shape
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "ffn.W1"] = (d, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.W2"] = (f, d)
        shapes[p + "ffn.b2"] = (d,)
    shapes["ln_f.gain"] = (d,)
    shapes["ln_f.bias"] = (d,)
    shapes["out.W"] = (d, V)
    shapes["out.b"] = (V,)
    return shapes


def init_params(config: ModelConfig, rng: Rng, dtype=np.float32) -> Params:
    """Glorot-uniform matrices, N(0, 0.02) embedding and read-out, unit gains,
    zero biases and u/v, delta convolution kernels. Deterministic per seed.

    The small read-out keeps initial predictions close to uniform.
    """
    dtype = resolve_dtype(dtype)
    params: Params = {}
    shapes = param_shapes_for(config)
    for name, shape in shapes.items():
        leaf = name.rsplit(".", 1)[-1]
        if name in ("embed", "out.W"):
            data = rng.normal(0.0, 0.02, shape, dtype)
        elif name.endswith(".gain"):
            data = np.ones(shape, dtype=dtype)
        elif len(shape) == 2 and leaf.startswith("W"):
            data = glorot_uniform(rng, shape, dtype)
        elif leaf.startswith("dwc_"):
            data = delta_kernels(shape[0], dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def subtree(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# forward


def ffn_forward(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor,
                p_drop: float = 0.0, rng: Rng | None = None, training: bool = False) -> Tensor:
    if x.shape[-1] != W1.shape[0] or W1.shape[1] != W2.shape[0] or W2.shape[1] != b2.shape[0]:
        raise ValueError(f"ffn shape chain broken: x {x.shape}, W1 {W1.shape}, W2 {W2.shape}")
    hidden = ops.squared_relu(ops.add(ops.matmul(x, W1), b1))
    out = ops.add(ops.matmul(hidden, W2), b2)
    return ops.dropout(out, p_drop, rng, training)


def block_forward(x: Tensor, memory: Tensor | None, params: Mapping[str, Tensor],
                  config: ModelConfig, rng: Rng | None = None, training: bool = False) -> Tensor:
    """h = x + attn(norm(x) | norm(memory)); return h + ffn(norm(h))."""
    xn = ops.layer_norm(x, params["ln1.gain"], params["ln1.bias"])
    mn = None
    if memory is not None and memory.shape[1] > 0:
        mn = ops.layer_norm(memory, params["ln1.gain"], params["ln1.bias"])
    a, _ = attention_forward(config.variant, config.attention, subtree(params, "attn."),
                             xn, mn, rng, training)
    h = ops.add(x, a)
    hn = ops.layer_norm(h, params["ln2.gain"], params["ln2.bias"])
    f = ffn_forward(hn, params["ffn.W1"], params["ffn.b1"], params["ffn.W2"], params["ffn.b2"],
                    config.p_drop, rng, training)
    return ops.add(h, f)


def embed(tokens: np.ndarray, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Token embedding scaled by sqrt(d_model); absolute sinusoids added for MHA/MDHA."""
    x = ops.scale(ops.embedding(params["embed"], tokens), math.sqrt(config.d_model))
    if not config.variant.relative:
        pe = absolute_encoding(tokens.shape[1], config.d_model, x.dtype)
        x = ops.add(x, Tensor(pe))
    return x


def model_forward(tokens, memory: MemoryState | None, params: Mapping[str, Tensor],
                  config: ModelConfig, rng: Rng | None = None, training: bool = False):
    """Logits [B, L, V] for ``tokens`` [B, L] and the updated (detached) memory."""
    tokens = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be [B, L], got shape {tokens.shape}")
    b, l = tokens.shape
    if l > config.seg_len:
        raise ValueError(f"segment length {l} exceeds seg_len={config.seg_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise IndexError(f"token id out of range [0, {config.vocab_size})")
    if memory is not None and len(memory) not in (0, config.n_layers):
        raise ValueError(f"memory has {len(memory)} layers, model has {config.n_layers}")
    x = embed(tokens, params, config)
    new_memory = []
    for i in range(config.n_layers):
        mem = memory[i] if memory else None
        if mem is not None and (mem.shape[0] != b or mem.shape[2] != config.d_model):
            raise ValueError(f"memory[{i}] shape {mem.shape} incompatible with batch {b}, "
                             f"d_model {config.d_model}")
        new_memory.append(_update_memory(mem, x, config.mem_len))
        x = block_forward(x, mem, subtree(params, f"blocks.{i}."), config, rng, training)
    x = ops.layer_norm(x, params["ln_f.gain"], params["ln_f.bias"])
    logits = ops.add(ops.matmul(x, params["out.W"]), params["out.b"])
    return logits, new_memory


def _update_memory(mem: Tensor | None, x: Tensor, mem_len: int) -> Tensor:
    """Last ``mem_len`` frames of [mem || x], copied off the graph."""
    b, _, d = x.shape
    if mem_len == 0:
        return Tensor(np.zeros((b, 0, d), dtype=x.dtype))
    cat = x.data if mem is None or mem.shape[1] == 0 else np.concatenate([mem.data, x.data], axis=1)
    return Tensor(np.ascontiguousarray(cat[:, -mem_len:]))


class Model:
    """Config plus parameters, callable as ``model(tokens, memory) -> (logits, memory)``."""

    def __init__(self, config: ModelConfig, params: Params):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, rng: Rng, dtype=np.float32) -> "Model":
        return cls(config, init_params(config, rng, dtype))

    def __call__(self, tokens, memory=None, rng=None, training=False):
        return model_forward(tokens, memory, self.params, self.config, rng, training)

    def param_count(self) -> int:
        return param_count(self.params)


# ---------------------------------------------------------------------------
# parameter accounting


def param_count(params) -> int:
    """Number of scalar learnable entries, by enumerating every tensor."""
    tensors = params.values() if isinstance(params, Mapping) else params
    total = 0
    for t in tensors:
        total += int(np.prod(t.shape, dtype=np.int64))
    return total


def param_count_formula(config: ModelConfig) -> int:
    """Closed form of :func:`param_count` for a full model.

    Per block: 4 d^2 attention projections, 9 d for the three width-3
    convolutions (conv variants), d^2 + 2 d for W_kR, u, v (relative
    variants), 4 d for two layer norms, 2 d d_ff + d_ff + d for the FFN.
    Outside blocks: V d embedding, 2 d final norm, d V + V output layer.
    """
    d, f, V = config.d_model, config.d_ff, config.vocab_size
    block = 4 * d * d + 4 * d + 2 * d * f + f + d
    if config.variant.conv:
        block += 9 * d
    if config.variant.relative:
        block += d * d + 2 * d
    return V * d + config.n_layers * block + 2 * d + d * V + V


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params: Mapping[str, Tensor], path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float32, canonical order) and
    ``<path>.manifest`` (one ``name=d0,d1,...`` line per tensor)."""
    path = Path(path)
    bin_path, man_path = path.with_suffix(".bin"), path.with_suffix(".manifest")
    lines = []
    with open(bin_path, "wb") as fh:
        for name, t in params.items():
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
            lines.append(f"{name}={','.join(str(n) for n in t.shape)}")
    man_path.write_text("\n".join(lines) + "\n")
    return bin_path, man_path


def load_checkpoint(path, dtype=np.float32) -> Params:
    path = Path(path)
    raw = np.fromfile(path.with_suffix(".bin"), dtype="<f4")
    params: Params = {}
    offset = 0
    for line in path.with_suffix(".manifest").read_text().splitlines():
        if not line.strip():
            continue
        name, dims = line.split("=", 1)
        shape = tuple(int(n) for n in dims.split(",") if n)
        size = int(np.prod(shape, dtype=np.int64))
        chunk = raw[offset:offset + size]
        if chunk.size != size:
            raise ValueError(f"checkpoint truncated at {name}")
        params[name] = Tensor(chunk.reshape(shape).astype(dtype), requires_grad=True, name=name)
        offset += size
    if offset != raw.size:
        raise ValueError(f"checkpoint has {raw.size - offset} trailing values")
    return params
