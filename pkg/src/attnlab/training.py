"""Character corpus, segment batching, Adam, evaluation and the training loop."""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import ops
from .model import Model, ModelConfig, param_count
from .tensor import MemoryMeter, Rng, Tape, Tensor, backward, resolve_dtype

SPLITS = ("train", "valid", "all")


def default_corpus_path() -> Path:
    """Bundled Tiny Shakespeare text."""
    return Path(str(resources.files("attnlab") / "data" / "tinyshakespeare.txt"))


def load_corpus(path=None) -> str:
    path = default_corpus_path() if path is None else Path(path)
    return path.read_text(encoding="utf-8")


@dataclass
class Dataset:
    text: str
    stoi: dict[str, int]
    itos: list[str]
    ids: np.ndarray
    train_frac: float = 0.9

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def encode(self, s: str) -> np.ndarray:
        return np.fromiter((self.stoi[c] for c in s), dtype=np.int64, count=len(s))

    def decode(self, ids) -> str:
        return "".join(self.itos[int(i)] for i in np.asarray(ids).reshape(-1))

    def split(self, name: str) -> np.ndarray:
        cut = int(len(self.ids) * self.train_frac)
        if name == "train":
            return self.ids[:cut]
        if name == "valid":
            return self.ids[cut:]
        if name == "all":
            return self.ids
        raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")


def build_vocab(text: str, train_frac: float = 0.9) -> Dataset:
    """Characters sorted by code point get ids 0..V-1; first ``train_frac`` of the text trains."""
    if not text:
        raise ValueError("cannot build a vocabulary from empty text")
    itos = sorted(set(text))
    stoi = {c: i for i, c in enumerate(itos)}
    lut = np.zeros(max(map(ord, itos)) + 1, dtype=np.int64)
    for c, i in stoi.items():
        lut[ord(c)] = i
    codepoints = np.frombuffer(text.encode("utf-32-le"), dtype=np.uint32)
    return Dataset(text, stoi, itos, lut[codepoints], train_frac)


def segments(dataset: Dataset | np.ndarray, batch: int, seg_len: int,
             split: str = "train") -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (inputs, targets), each [batch, seg_len], targets shifted by one.

    The split is cut into ``batch`` contiguous lanes; segment k of a lane
    starts right where segment k-1 ended, so carried memory lines up.
    """
    ids = dataset.split(split) if isinstance(dataset, Dataset) else np.asarray(dataset)
    if len(ids) < batch * (seg_len + 1):
        raise ValueError(f"corpus split too small: {len(ids)} tokens < "
                         f"batch*(seg_len+1) = {batch * (seg_len + 1)}")
    lane_len = len(ids) // batch
    lanes = ids[:batch * lane_len].reshape(batch, lane_len)
    for s in range((lane_len - 1) // seg_len):
        a = s * seg_len
        yield lanes[:, a:a + seg_len], lanes[:, a + 1:a + seg_len + 1]


def segments_per_epoch(n_tokens: int, batch: int, seg_len: int) -> int:
    return (n_tokens // batch - 1) // seg_len


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)
    return state


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads:
            g *= factor
    return total


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsRecord:
    step: int
    loss: float
    accuracy: float
    ppl: float
    params: int
    peak_mem_bytes: int
    wall_ms: int
    split: str = "train"

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)

    def deterministic(self) -> dict:
        d = asdict(self)
        d.pop("wall_ms")
        return d


def perplexity(loss: float) -> float:
    return math.exp(loss)


def batch_accuracy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Share of positions whose argmax (lowest id on ties) equals the target."""
    return float((logits.argmax(axis=-1) == targets).mean())


def evaluate(model: Callable, dataset: Dataset, split: str = "valid", batch: int = 32,
             seg_len: int = 64, max_batches: int | None = None) -> tuple[float, float, float]:
    """(mean cross-entropy in nats, next-char accuracy, perplexity) over ``split``.

    ``model(tokens, memory)`` must return ``(logits, memory)``; memory is
    threaded across segments and dropout is off.
    """
    total_nll = 0.0
    correct = 0
    count = 0
    memory = None
    for n, (inp, tgt) in enumerate(segments(dataset, batch, seg_len, split)):
        if max_batches is not None and n >= max_batches:
            break
        logits, memory = model(inp, memory)
        ld = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
        logp = ops.log_softmax_np(ld)
        flat_t = tgt.reshape(-1)
        flat = logp.reshape(-1, logp.shape[-1])
        total_nll -= float(flat[np.arange(flat_t.size), flat_t].sum())
        correct += int((ld.argmax(axis=-1) == tgt).sum())
        count += flat_t.size
    if count == 0:
        raise ValueError("evaluation saw no segments")
    loss = total_nll / count
    return loss, correct / count, perplexity(loss)


# ---------------------------------------------------------------------------
# training loop


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, record: MetricsRecord):
        super().__init__(message)
        self.record = record


@dataclass
class RunConfig:
    steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    clip: float = 1.0
    seed: int = 42
    precision: int = 32
    log_every: int = 50
    eval_every: int = 0
    eval_batches: int | None = None
    corpus: str | None = None


@dataclass
class TrainResult:
    model: Model
    records: list[MetricsRecord]
    final: MetricsRecord
    peak_mem_bytes: int
    avg_mem_bytes: int
    wall_ms: int


def train_step(model: Model, inp: np.ndarray, tgt: np.ndarray, memory, opt: AdamState,
               rng: Rng | None, clip: float = 1.0):
    """One forward/backward/Adam update. Returns (loss, accuracy, new_memory)."""
    params = list(model.params.values())
    with Tape() as tape:
        logits, new_memory = model(inp, memory, rng=rng, training=True)
        loss = ops.cross_entropy(ops.reshape(logits, (-1, logits.shape[-1])), tgt.reshape(-1))
    acc = batch_accuracy(logits.data, tgt)
    grads = backward(loss, tape, params)
    clip_grad_norm(grads, clip)
    adam_step(params, grads, opt)
    return float(loss.data), acc, new_memory


def train(model_config: ModelConfig, run_config: RunConfig, rng: Rng | None = None,
          dataset: Dataset | None = None, on_record: Callable[[MetricsRecord], None] | None = None,
          meter: MemoryMeter | None = None) -> TrainResult:
    """Train from scratch; every emitted record goes to ``on_record`` as it is produced.

    Memory is carried across segments and reset when the training split wraps.
    A final validation record closes the stream.
    """
    rng = rng or Rng(run_config.seed)
    dataset = dataset or build_vocab(load_corpus(run_config.corpus))
    if dataset.vocab_size != model_config.vocab_size:
        raise ValueError(f"model vocab {model_config.vocab_size} != corpus vocab {dataset.vocab_size}")
    meter = meter or MemoryMeter()
    records: list[MetricsRecord] = []
    start = time.perf_counter()

    def emit(rec):
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    def now_ms():
        return int((time.perf_counter() - start) * 1000)

    cfg = model_config
    with meter:
        model = Model.init(cfg, rng.child("init"), resolve_dtype(run_config.precision))
        n_params = param_count(model.params)
        opt = AdamState(lr=run_config.lr, betas=run_config.betas, eps=run_config.eps)
        drop_rng = rng.child("dropout")

        def run_eval(step):
            loss, acc, ppl = evaluate(model, dataset, "valid", run_config.batch, cfg.seg_len,
                                      run_config.eval_batches)
            return MetricsRecord(step, loss, acc, ppl, n_params, meter.peak_bytes, now_ms(), "valid")

        batches = None
        memory = None
        for step in range(1, run_config.steps + 1):
            pair = next(batches, None) if batches is not None else None
            if pair is None:
                batches = segments(dataset, run_config.batch, cfg.seg_len, "train")
                pair = next(batches)
                memory = None
            inp, tgt = pair
            try:
                loss, acc, memory = train_step(model, inp, tgt, memory, opt, drop_rng, run_config.clip)
            except FloatingPointError as exc:
                rec = MetricsRecord(step, float("nan"), float("nan"), float("nan"), n_params,
                                    meter.peak_bytes, now_ms())
                emit(rec)
                raise TrainingAborted(f"step {step}: {exc}", rec) from exc
            meter.mark_step()
            if not math.isfinite(loss):
                rec = MetricsRecord(step, loss, acc, float("nan"), n_params, meter.peak_bytes, now_ms())
                emit(rec)
                raise TrainingAborted(f"non-finite loss at step {step}", rec)
            if run_config.log_every and (step % run_config.log_every == 0 or step == 1):
                emit(MetricsRecord(step, loss, acc, perplexity(loss), n_params, meter.peak_bytes,
                                   now_ms()))
            if run_config.eval_every and step % run_config.eval_every == 0 and step != run_config.steps:
                emit(run_eval(step))
        final = run_eval(run_config.steps)
        emit(final)
    return TrainResult(model, records, final, meter.peak_bytes, meter.avg_bytes, now_ms())


def write_jsonl(records: Sequence[MetricsRecord], path, extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            d = asdict(rec)
            if extra:
                d.update(extra)
            fh.write(json.dumps(d) + "\n")
