"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward, no_tape


@dataclass
class GradcheckReport:
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)
    worst_index: dict[str, tuple] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def lines(self) -> list[str]:
        out = []
        for name, err in self.max_rel_err.items():
            flag = "ok" if err <= self.tol else "FAIL"
            out.append(f"{name:40s} max rel err {err:.3e}  {flag}")
        return out


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from exploding."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], Tensor], p: Tensor, eps: float = 1e-5,
                 max_entries: int | None = None, rng: np.random.Generator | None = None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``p`` (perturbed in place).

    Returns ``(flat_indices, grads)``. With ``max_entries`` a random subset of
    entries is probed.
    """
    flat = p.data.reshape(-1)
    idx = np.arange(flat.size)
    if max_entries is not None and flat.size > max_entries:
        rng = rng or np.random.default_rng(0)
        idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
    out = np.empty(idx.size)
    with no_tape():
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(f().data)
            flat[i] = orig - eps
            fm = float(f().data)
            flat[i] = orig
            out[n] = (fp - fm) / (2 * eps)
    return idx, out


def gradcheck(f: Callable[[], Tensor], params: Mapping[str, Tensor] | Sequence[Tensor],
              eps: float = 1e-5, tol: float = 1e-4, max_entries: int | None = None,
              floor: float = 1e-4) -> GradcheckReport:
    """Compare tape gradients of ``f()`` with central differences, per parameter.

    ``f`` takes no arguments and must read the parameters by reference. All
    parameters should be float64; failures are reported, never raised.
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 parameters; {name} is {p.dtype}")
        p.requires_grad = True
    with Tape() as tape:
        loss = f()
    analytic = backward(loss, tape, list(params.values()))
    report = GradcheckReport(tol=tol)
    rng = np.random.default_rng(0)
    for (name, p), ga in zip(params.items(), analytic):
        idx, gn = numeric_grad(f, p, eps, max_entries, rng)
        err = rel_error(ga.reshape(-1)[idx], gn, floor)
        k = int(np.argmax(err)) if err.size else 0
        report.max_rel_err[name] = float(err[k]) if err.size else 0.0
        report.worst_index[name] = np.unravel_index(idx[k], p.shape) if err.size else ()
    return report
