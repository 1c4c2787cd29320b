"""Tensor, tape, seeded RNG and allocation meter.

A ``Tensor`` wraps a numpy buffer. Differentiable ops (see ``attnlab.ops``)
append an entry to the active ``Tape``; ``backward`` walks the tape in reverse
and accumulates adjoints. Backward closures capture numpy arrays only, never
the output tensor, so the graph has no reference cycles and buffers are freed
deterministically by refcounting. The memory meter relies on that.
"""
from __future__ import annotations

import itertools
import threading
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_ids = itertools.count()
_local = threading.local()


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


_check_finite = True


def set_finite_checks(enabled: bool) -> None:
    global _check_finite
    _check_finite = bool(enabled)


def resolve_dtype(precision) -> np.dtype:
    """Map 32/64/"float32"/np.float64 ... to a float dtype."""
    if precision in (32, "32", "float32", "f32"):
        return np.dtype(np.float32)
    if precision in (64, "64", "float64", "f64"):
        return np.dtype(np.float64)
    try:
        dt = np.dtype(precision)
    except TypeError:
        dt = None
    if dt is None or dt not in FLOAT_DTYPES:
        raise ValueError(f"unsupported precision {precision!r}; use 32 or 64")
    return dt


# ---------------------------------------------------------------------------
# memory metering


class MemoryMeter:
    """Counts bytes held by live ``Tensor`` buffers created while active.

    Only tensor data buffers are counted (not gradients or numpy temporaries
    held by backward closures). Each tensor remembers the meter it was charged
    to, so tensors that outlive a run never touch the next run's counters.
    """

    def __init__(self):
        self.live_bytes = 0
        self.peak_bytes = 0
        self._step_peak = 0
        self.step_peaks: list[int] = []

    def _alloc(self, n: int) -> None:
        self.live_bytes += n
        if self.live_bytes > self.peak_bytes:
            self.peak_bytes = self.live_bytes
        if self.live_bytes > self._step_peak:
            self._step_peak = self.live_bytes

    def _free(self, n: int) -> None:
        self.live_bytes -= n

    def mark_step(self) -> None:
        """Close the current step: store its high-water mark and start a new one."""
        self.step_peaks.append(self._step_peak)
        self._step_peak = self.live_bytes

    @property
    def avg_bytes(self) -> int:
        if not self.step_peaks:
            return self.peak_bytes
        return int(round(sum(self.step_peaks) / len(self.step_peaks)))

    def reset(self) -> None:
        self.live_bytes = 0
        self.peak_bytes = 0
        self._step_peak = 0
        self.step_peaks = []

    def __enter__(self):
        stack = _meter_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _meter_stack().remove(self)
        return False


def _meter_stack() -> list:
    stack = getattr(_local, "meters", None)
    if stack is None:
        stack = _local.meters = []
    return stack


def active_meter() -> MemoryMeter | None:
    stack = _meter_stack()
    return stack[-1] if stack else None


# ---------------------------------------------------------------------------
# tensor


class Tensor:
    """Dense array node in the differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "id", "name", "_meter", "_nbytes")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind == "f" and arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        if requires_grad and arr.dtype not in FLOAT_DTYPES:
            raise TypeError(f"only float tensors can require grad, got {arr.dtype}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.id = next(_ids)
        self.name = name
        meter = active_meter()
        self._meter = meter
        self._nbytes = arr.nbytes
        if meter is not None:
            meter._alloc(arr.nbytes)

    def __del__(self):
        meter = self._meter
        if meter is not None:
            meter._free(self._nbytes)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        name = f" {self.name!r}" if self.name else ""
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor{name}(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the heavy lifting lives in attnlab.ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ---------------------------------------------------------------------------
# tape


@dataclass
class TapeEntry:
    out: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


@dataclass
class Tape:
    """Ordered record of differentiable ops executed while active.

    Use as a context manager; ops record themselves only when at least one
    input requires grad.
    """

    entries: list[TapeEntry] = field(default_factory=list)

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().remove(self)
        return False

    def __len__(self):
        return len(self.entries)

    def clear(self) -> None:
        self.entries.clear()


def _tape_stack() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_tape:
    """Suspend recording inside the block (used by finite differences)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()

    def __exit__(self, *exc):
        _tape_stack().extend(self._saved)
        return False


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` as a tensor and put it on the active tape if needed."""
    if _check_finite and out_data.dtype.kind == "f" and not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op} produced non-finite values (shape {out_data.shape})")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                out.requires_grad = True
                tape.entries.append(TapeEntry(out, tuple(inputs), backward, op))
                break
    return out


def backward(loss: Tensor, tape: Tape, params: Iterable[Tensor] | None = None,
             retain: bool = False) -> list[np.ndarray] | None:
    """Reverse-mode sweep from a scalar ``loss`` over ``tape``.

    Leaf tensors reached by the sweep get ``.grad`` set (overwritten). When
    ``params`` is given, their gradients are returned in order, with zeros for
    parameters the loss does not depend on. The tape is cleared afterwards
    unless ``retain`` is set.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {e.out.id for e in tape.entries}
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.out.id, None)
        if g is None:
            continue
        in_grads = entry.backward(g)
        for inp, gi in zip(entry.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.id)
            grads[inp.id] = gi if prev is None else prev + gi
            if inp.id not in produced:
                leaves[inp.id] = inp
    for key, leaf in leaves.items():
        leaf.grad = grads[key]
    if loss.id not in produced and loss.requires_grad:
        loss.grad = np.ones_like(loss.data)
        leaves[loss.id] = loss
    if not retain:
        tape.clear()
    if params is None:
        return None
    out = []
    for p in params:
        if p.id in leaves:
            out.append(leaves[p.id].grad)
        else:
            out.append(np.zeros_like(p.data))
    return out


# ---------------------------------------------------------------------------
# rng


class Rng:
    """Seeded generator built on numpy's Philox-4x64 counter-based bit generator.

    Philox output depends only on (key, counter), so a given seed yields the
    same stream on every platform. Independent sub-streams come from
    ``child(name)``, which mixes a CRC32 of the name into the seed sequence.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(self.seed)))

    def child(self, name: str) -> "Rng":
        sub = Rng.__new__(Rng)
        sub.seed = self.seed
        seq = np.random.SeedSequence([self.seed, zlib.crc32(name.encode())])
        sub._gen = np.random.Generator(np.random.Philox(seq))
        return sub

    @property
    def state(self) -> dict:
        return self._gen.bit_generator.state

    def uniform(self, low, high, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype, copy=False)

    def normal(self, mean, std, shape, dtype=np.float64) -> np.ndarray:
        return (self._gen.standard_normal(size=shape) * std + mean).astype(dtype, copy=False)

    def random(self, shape, dtype=np.float64) -> np.ndarray:
        return self._gen.random(size=shape, dtype=np.dtype(dtype).type)

    def integers(self, low, high, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)
