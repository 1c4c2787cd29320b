"""Verification suites shared by the CLI and the test-suite.

Loop oracles here are deliberately naive: explicit Python loops over the
defining formula, with no shared code path with the fast ops.
"""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import (AttentionConfig, Variant, attention_forward, init_attention_params,
                        rel_scores_naive, rel_scores_shifted)
from .bench import VARIATIONS
from .gradcheck import GradcheckReport, gradcheck
from .model import ModelConfig, init_params, model_forward
from .tensor import Rng, Tensor



# ---------------------------------------------------------------------------
# loop oracles


def matmul_loop(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def conv_loop(x: np.ndarray, kernels: np.ndarray) -> np.ndarray:
    """out[b, t, c] = sum_j kernels[c, j] * x[b, t-2+j, c], zero outside."""
    B, L, C = x.shape
    out = np.zeros_like(x, dtype=np.float64)
    for b in range(B):
        for t in range(L):
            for c in range(C):
                s = 0.0
                for j in range(3):
                    src = t - 2 + j
                    if 0 <= src < L:
                        s += kernels[c, j] * x[b, src, c]
                out[b, t, c] = s
    return out


def attention_loop(q, k, v, mask=None):
    """Per (query, key) pair: scores, softmax over allowed keys, weighted sum."""
    B, H, Lq, d = q.shape
    Lk = k.shape[2]
    out = np.zeros((B, H, Lq, v.shape[-1]))
    weights = np.zeros((B, H, Lq, Lk))
    for b, h, i in itertools.product(range(B), range(H), range(Lq)):
        allowed = [j for j in range(Lk) if mask is None or mask[i, j]]
        s = {j: sum(q[b, h, i, t] * k[b, h, j, t] for t in range(d)) / np.sqrt(d) for j in allowed}
        top = max(s.values())
        e = {j: np.exp(val - top) for j, val in s.items()}
        z = sum(e.values())
        for j in allowed:
            weights[b, h, i, j] = e[j] / z
            out[b, h, i] += weights[b, h, i, j] * v[b, h, j]
    return out, weights


def cross_entropy_loop(logits: np.ndarray, targets: np.ndarray) -> float:
    total = 0.0
    for row, t in zip(logits, targets):
        top = max(row)
        lse = top + np.log(sum(np.exp(x - top) for x in row))
        total += lse - row[t]
    return total / len(targets)


# ---------------------------------------------------------------------------
# helpers


def random_attention_params(variant, d_model: int, rng: np.random.Generator, dtype=np.float64,
                            scale: float = 0.5, delta: bool = False) -> dict[str, Tensor]:
    """Attention parameters with every entry random (so u, v, kernels are exercised)."""
    params = init_attention_params(variant, d_model, Rng(0), dtype)
    for name, t in params.items():
        if name.startswith("dwc_") and delta:
            continue
        t.data[...] = rng.normal(size=t.shape) * scale
    return params


def random_model_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float64,
                        scale: float = 0.3):
    params = init_params(config, Rng(0), dtype)
    for name, t in params.items():
        if name.endswith(".gain"):
            t.data[...] = 1.0 + rng.normal(size=t.shape) * 0.1
        else:
            t.data[...] = rng.normal(size=t.shape) * scale
    return params


def share_weights(src: dict[str, Tensor], dst: dict[str, Tensor]) -> None:
    """Copy every parameter present in both mappings (dst keeps its extras)."""
    for name, t in src.items():
        if name in dst:
            dst[name].data[...] = t.data


# ---------------------------------------------------------------------------
# gradient suite


@dataclass
class SuiteResult:
    name: str
    report: GradcheckReport


def _op_cases(rng: np.random.Generator):
    def T(*shape, positive=False, away_from_zero=False):
        x = rng.normal(size=shape)
        if away_from_zero:
            x = np.where(np.abs(x) < 1e-2, 0.5, x)
        if positive:
            x = np.abs(x) + 0.1
        return Tensor(x, requires_grad=True)

    w = rng.normal(size=(3, 5))
    a, b = T(3, 4), T(4, 5)
    yield "matmul", (lambda: ops.sum(ops.mul(ops.matmul(a, b), Tensor(w)))), {"a": a, "b": b}

    x = T(2, 3, 6)
    mask = np.tril(np.ones((3, 6), dtype=bool), k=3)
    wx = rng.normal(size=(2, 3, 6))
    yield "softmax_rows", (lambda: ops.sum(ops.mul(ops.softmax_rows(x, mask), Tensor(wx)))), {"x": x}

    lg = T(5, 7)
    tg = rng.integers(0, 7, size=5)
    yield "cross_entropy", (lambda: ops.cross_entropy(lg, tg)), {"logits": lg}

    cx, ck = T(2, 5, 3), T(3, 3)
    wc = rng.normal(size=(2, 5, 3))
    yield "depthwise_conv1d_causal", (
        lambda: ops.sum(ops.mul(ops.depthwise_conv1d_causal(cx, ck), Tensor(wc)))), {"x": cx, "kernels": ck}

    sx = T(4, 5, away_from_zero=True)
    ws = rng.normal(size=(4, 5))
    yield "squared_relu", (lambda: ops.sum(ops.mul(ops.squared_relu(sx), Tensor(ws)))), {"x": sx}

    lx, lgain, lbias = T(3, 6), T(6), T(6)
    wl = rng.normal(size=(3, 6))
    yield "layer_norm", (
        lambda: ops.sum(ops.mul(ops.layer_norm(lx, lgain, lbias), Tensor(wl)))), {"x": lx, "gain": lgain, "bias": lbias}

    dx = T(4, 6)
    wd = rng.normal(size=(4, 6))
    yield "dropout", (lambda: ops.sum(ops.mul(ops.dropout(dx, 0.3, Rng(5), True), Tensor(wd)))), {"x": dx}

    table = T(6, 4)
    ids = rng.integers(0, 6, size=(2, 5))
    we = rng.normal(size=(2, 5, 4))
    yield "embedding", (lambda: ops.sum(ops.mul(ops.embedding(table, ids), Tensor(we)))), {"table": table}

    rs = T(2, 3, 3, 7)
    wr = rng.normal(size=(2, 3, 3, 5))
    yield "rel_shift", (lambda: ops.sum(ops.mul(ops.rel_shift(rs, 5), Tensor(wr)))), {"scores": rs}

    p1, p2 = T(2, 3, 4), T(2, 2, 4)
    wcat = rng.normal(size=(2, 4, 4))
    yield "concat/slice/transpose/reshape", (lambda: ops.sum(ops.mul(
        ops.reshape(ops.transpose(ops.slice_axis(ops.concat([p1, p2], 1), 1, None, 1), (0, 2, 1)), (2, 4, 4)),
        Tensor(wcat)))), {"a": p1, "b": p2}


def gradcheck_ops(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> list[SuiteResult]:
    rng = np.random.default_rng(seed)
    return [SuiteResult(name, gradcheck(f, params, eps=eps, tol=tol))
            for name, f, params in _op_cases(rng)]


def gradcheck_attention(variant, seed: int = 0, d_model: int = 8, heads: int = 2, L: int = 4,
                        mem: int = 3, eps: float = 1e-5, tol: float = 1e-4) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    cfg = AttentionConfig(d_model, heads, 0.0, mem)
    params = random_attention_params(variant, d_model, rng)
    x = Tensor(rng.normal(size=(2, L, d_model)), requires_grad=True)
    memory = Tensor(rng.normal(size=(2, mem, d_model)), requires_grad=True) if mem else None
    w = Tensor(rng.normal(size=(2, L, d_model)))

    def f():
        y, _ = attention_forward(variant, cfg, params, x, memory)
        return ops.sum(ops.mul(y, w))

    inputs = {"x": x, **({"memory": memory} if memory is not None else {})}
    return gradcheck(f, {**params, **inputs}, eps=eps, tol=tol)


def micro_config(variant) -> ModelConfig:
    return ModelConfig(vocab_size=11, n_layers=2, d_model=8, heads=2, seg_len=4, mem_len=4,
                       variant=variant)


def gradcheck_model(variant, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> GradcheckReport:
    """Full micro model (V=11, d=8, L=4, 2 layers) with a populated memory."""
    rng = np.random.default_rng(seed)
    cfg = micro_config(variant)
    params = random_model_params(cfg, rng)
    tokens = rng.integers(0, cfg.vocab_size, size=(2, 4))
    targets = rng.integers(0, cfg.vocab_size, size=(2, 4))
    memory = [Tensor(rng.normal(size=(2, 3, cfg.d_model))) for _ in range(cfg.n_layers)]

    def f():
        logits, _ = model_forward(tokens, memory, params, cfg)
        return ops.cross_entropy(ops.reshape(logits, (-1, cfg.vocab_size)), targets.reshape(-1))

    return gradcheck(f, params, eps=eps, tol=tol)


def gradcheck_suite(seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> list[SuiteResult]:
    results = gradcheck_ops(seed, eps, tol)
    for v in Variant:
        results.append(SuiteResult(f"attention[{v.value}]", gradcheck_attention(v, seed, eps=eps, tol=tol)))
    for v in Variant:
        results.append(SuiteResult(f"model[{v.value}]", gradcheck_model(v, seed, eps=eps, tol=tol)))
    return results


# ---------------------------------------------------------------------------
# oracle suites


def rel_score_sweep(seeds: int = 100, q_lens=range(1, 9), mem_lens=range(0, 9),
                    heads_set=(1, 2, 4), d_head: int = 4, batch: int = 2,
                    dtype=np.float64) -> dict:
    """Max |shifted - naive| over the whole grid."""
    worst = 0.0
    count = 0
    start = time.perf_counter()
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for lq, m, h in itertools.product(q_lens, mem_lens, heads_set):
            lk = m + lq
            q = rng.normal(size=(batch, h, lq, d_head)).astype(dtype)
            k = rng.normal(size=(batch, h, lk, d_head)).astype(dtype)
            r = rng.normal(size=(h, lk + lq - 1, d_head)).astype(dtype)
            u = rng.normal(size=(h, d_head)).astype(dtype)
            v = rng.normal(size=(h, d_head)).astype(dtype)
            fast = rel_scores_shifted(Tensor(q), Tensor(k), Tensor(r), Tensor(u), Tensor(v)).data
            slow = rel_scores_naive(q, k, r, u, v)
            worst = max(worst, float(np.abs(fast - slow).max()))
            count += 1
    return {"max_abs_err": worst, "instances": count, "seconds": time.perf_counter() - start}


def delta_collapse(d_models=(8, 16), seed: int = 0, L: int = 5, mem: int = 3) -> dict:
    """Max output difference RCMHA vs RMHA and MDHA vs MHA with shared weights and
    delta kernels, over the (heads, p_drop) settings of the variation grid at small widths."""
    worst = {"RCMHA-RMHA": 0.0, "MDHA-MHA": 0.0}
    pairs = {"RCMHA-RMHA": (Variant.RCMHA, Variant.RMHA), "MDHA-MHA": (Variant.MDHA, Variant.MHA)}
    for (code, _, heads, p_drop), d in itertools.product(VARIATIONS, d_models):
        rng = np.random.default_rng([seed, d, heads])
        cfg = AttentionConfig(d, heads, p_drop, mem)
        x = Tensor(rng.normal(size=(2, L, d)))
        memory = Tensor(rng.normal(size=(2, mem, d)))
        for key, (conv_v, plain_v) in pairs.items():
            plain = random_attention_params(plain_v, d, rng)
            conv = random_attention_params(conv_v, d, rng, delta=True)
            share_weights(plain, conv)
            for m in (None, memory):
                y1, _ = attention_forward(conv_v, cfg, conv, x, m)
                y0, _ = attention_forward(plain_v, cfg, plain, x, m)
                worst[key] = max(worst[key], float(np.abs(y1.data - y0.data).max()))
            # whole model as well
            mcfg = ModelConfig(vocab_size=13, n_layers=2, d_model=d, heads=heads, p_drop=p_drop,
                               seg_len=L, mem_len=L, variant=plain_v)
            pm = random_model_params(mcfg, rng)
            pc = init_params(mcfg.replace(variant=conv_v), Rng(1), np.float64)
            share_weights(pm, pc)
            tokens = rng.integers(0, 13, size=(2, L))
            l0, mem0 = model_forward(tokens, None, pm, mcfg)
            l1, mem1 = model_forward(tokens, None, pc, mcfg.replace(variant=conv_v))
            l0b, _ = model_forward(tokens, mem0, pm, mcfg)
            l1b, _ = model_forward(tokens, mem1, pc, mcfg.replace(variant=conv_v))
            worst[key] = max(worst[key], float(np.abs(l1.data - l0.data).max()),
                             float(np.abs(l1b.data - l0b.data).max()))
    return worst


def causality_trials(variant, trials: int = 50, seed: int = 0, L: int = 8) -> int:
    """Number of trials where perturbing a future token changed an earlier logit."""
    rng = np.random.default_rng([seed, list(Variant).index(Variant.parse(variant))])
    cfg = ModelConfig(vocab_size=17, n_layers=2, d_model=16, heads=4, seg_len=L, mem_len=L,
                      variant=variant)
    params = random_model_params(cfg, rng, scale=0.3)
    failures = 0
    for _ in range(trials):
        tokens = rng.integers(0, cfg.vocab_size, size=(2, L))
        memory = [Tensor(rng.normal(size=(2, 3, cfg.d_model))) for _ in range(cfg.n_layers)]
        t = int(rng.integers(0, L - 1))
        perturbed = tokens.copy()
        span = slice(t + 1, L)
        perturbed[:, span] = (tokens[:, span] + rng.integers(1, cfg.vocab_size,
                                                             size=perturbed[:, span].shape)) % cfg.vocab_size
        a, _ = model_forward(tokens, memory, params, cfg)
        b, _ = model_forward(perturbed, memory, params, cfg)
        if not np.array_equal(a.data[:, :t + 1], b.data[:, :t + 1]):
            failures += 1
    return failures
