"""Experiment grid: eight RCMHA width/head/dropout variations plus the four-module comparison.

Runs execute one after another in this process, each under a fresh memory
meter. Outputs per grid:

* ``summary.csv``   one row per run, spec order, deterministic for fixed seeds
* ``runs/<code>.jsonl``  metric history per run (wall-clock lives only here)
* ``plotdata.json`` ``[{"code": ..., "series": [...]}, ...]``
* ``comparison.csv`` the module-comparison rows, when the grid has them
"""
from __future__ import annotations

import csv
import io
import json
import math
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

from .attention import Variant
from .model import ModelConfig
from .tensor import MemoryMeter, Rng
from .training import (Dataset, MetricsRecord, RunConfig, TrainingAborted, build_vocab,
                       load_corpus, train)

SUMMARY_COLUMNS = ("code", "train_steps", "ppl", "accuracy", "loss", "params",
                   "peak_mem_bytes", "avg_mem_bytes", "wall_ms")
MODULE_ORDER = (Variant.MHA, Variant.MDHA, Variant.RMHA, Variant.RCMHA)

VARIATIONS = (
    ("A", 128, 4, 0.0),
    ("B", 128, 8, 0.0),
    ("C", 256, 4, 0.0),
    ("D", 256, 8, 0.0),
    ("E", 256, 8, 0.1),
    ("F", 512, 4, 0.0),
    ("G", 512, 8, 0.0),
    ("H", 512, 8, 0.1),
)
DESK_DEFAULTS = dict(steps=2000, n_layers=2, seg_len=64, mem_len=64, batch=32, seed=42)


@dataclass(frozen=True)
class RunSpec:
    code: str
    variant: Variant
    d_model: int
    heads: int
    p_drop: float
    n_layers: int = 2
    seg_len: int = 64
    mem_len: int = 64
    steps: int = 2000
    batch: int = 32
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, n_layers=self.n_layers, d_model=self.d_model,
                           heads=self.heads, p_drop=self.p_drop, seg_len=self.seg_len,
                           mem_len=self.mem_len, variant=self.variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass(frozen=True)
class ExperimentSpec:
    runs: tuple[RunSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "runs", tuple(self.runs))
        codes = [r.code for r in self.runs]
        dupes = sorted({c for c in codes if codes.count(c) > 1})
        if dupes:
            raise ValueError(f"duplicate run codes: {dupes}")

    def __iter__(self):
        return iter(self.runs)

    def __len__(self):
        return len(self.runs)

    def __getitem__(self, code: str) -> RunSpec:
        for r in self.runs:
            if r.code == code:
                return r
        raise KeyError(code)

    @property
    def codes(self) -> list[str]:
        return [r.code for r in self.runs]


def variation_runs(d_model_div: int = 1, **desk) -> list[RunSpec]:
    """RCMHA at the eight (d_model, heads, p_drop) settings A-H."""
    opts = {**DESK_DEFAULTS, **desk}
    return [RunSpec(code, Variant.RCMHA, d // d_model_div, h, p, **opts) for code, d, h, p in VARIATIONS]


def comparison_runs(d_model: int = 128, heads: int = 4, p_drop: float = 0.0, **desk) -> list[RunSpec]:
    """The four attention modules at the best variation (d=128, h=4, p=0)."""
    opts = {**DESK_DEFAULTS, **desk}
    return [RunSpec(v.value, v, d_model, heads, p_drop, **opts) for v in MODULE_ORDER]


def default_grid(d_model_div: int = 1, **desk) -> ExperimentSpec:
    """8 variations A-H followed by the 4 module-comparison runs (12 total)."""
    return ExperimentSpec(variation_runs(d_model_div, **desk)
                          + comparison_runs(128 // d_model_div, 4, 0.0, **desk))


@dataclass
class RunResult:
    spec: RunSpec
    status: str
    final: MetricsRecord | None = None
    params: int = 0
    peak_mem_bytes: int = 0
    avg_mem_bytes: int = 0
    wall_ms: int = 0
    history_path: str | None = None
    history: list[MetricsRecord] = field(default_factory=list)
    error: str | None = None
    model: object = None  # trained Model, only when run_one(keep_model=True)

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def meter_memory(run: RunSpec, dataset: Dataset, eval_batches: int | None = None) -> tuple[int, int]:
    """(peak, average per-step peak) tensor bytes for one run under a fresh meter."""
    res = run_one(run, dataset, eval_batches=eval_batches)
    return res.peak_mem_bytes, res.avg_mem_bytes


def run_one(run: RunSpec, dataset: Dataset, out_dir: Path | None = None,
            eval_batches: int | None = None, log_every: int = 50, lr: float = 1e-3,
            precision: int = 32, keep_model: bool = False) -> RunResult:
    cfg = run.model_config(dataset.vocab_size)
    rc = RunConfig(steps=run.steps, batch=run.batch, seed=run.seed, lr=lr, precision=precision,
                   log_every=log_every, eval_batches=eval_batches)
    meter = MemoryMeter()
    history: list[MetricsRecord] = []
    history_path = None
    if out_dir is not None:
        (out_dir / "runs").mkdir(parents=True, exist_ok=True)
        history_path = str(out_dir / "runs" / f"{run.code}.jsonl")
    start = time.perf_counter()
    started_at = time.time()
    try:
        result = train(cfg, rc, Rng(run.seed), dataset, history.append, meter)
        out = RunResult(run, "ok", result.final, result.final.params, result.peak_mem_bytes,
                        result.avg_mem_bytes, result.wall_ms, history_path, history,
                        model=result.model if keep_model else None)
        if not all(math.isfinite(x) for x in (out.final.loss, out.final.ppl, out.final.accuracy)):
            out.status, out.error = "aborted", "non-finite final metrics"
    except TrainingAborted as exc:
        out = RunResult(run, "aborted", exc.record, exc.record.params, meter.peak_bytes,
                        meter.avg_bytes, int((time.perf_counter() - start) * 1000),
                        history_path, history, str(exc))
    except Exception as exc:  # one broken run must not stop the grid
        out = RunResult(run, "aborted", None, 0, meter.peak_bytes, meter.avg_bytes,
                        int((time.perf_counter() - start) * 1000), history_path, history,
                        "".join(traceback.format_exception_only(type(exc), exc)).strip())
    if history_path is not None:
        try:
            with open(history_path, "w", encoding="utf-8") as fh:
                for rec in history:
                    d = asdict(rec)
                    d.update(code=run.code, status=out.status,
                             unix_time=round(started_at + rec.wall_ms / 1000.0, 3))
                    fh.write(json.dumps(d) + "\n")
        except OSError as exc:
            out.status, out.error = "aborted", f"history write failed: {exc}"
    return out


def run_experiments(spec: ExperimentSpec | Iterable[RunSpec], corpus=None, out_dir=None,
                    eval_batches: int | None = None, timing: bool = False,
                    log: Callable[[str], None] | None = print, dataset: Dataset | None = None,
                    **run_kw) -> list[RunResult]:
    """Run every spec row in order and write the reports; failures become aborted rows."""
    if not isinstance(spec, ExperimentSpec):
        spec = ExperimentSpec(tuple(spec))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    results: list[RunResult] = []
    if len(spec):
        dataset = dataset or build_vocab(load_corpus(corpus))
    for run in spec:
        if log:
            log(f"[{run.code}] {run.variant.value} d_model={run.d_model} heads={run.heads} "
                f"p_drop={run.p_drop} steps={run.steps}")
        res = run_one(run, dataset, out, eval_batches, **run_kw)
        if log:
            if res.ok:
                f = res.final
                log(f"[{run.code}] ok loss={f.loss:.4f} acc={f.accuracy:.4f} ppl={f.ppl:.4f} "
                    f"peak={res.peak_mem_bytes}")
            else:
                log(f"[{run.code}] aborted: {res.error}")
        results.append(res)
    if out is not None:
        emit_reports(results, out, timing=timing)
    return results


# ---------------------------------------------------------------------------
# reports


def _g(x) -> str:
    return "nan" if x is None else f"{x:.6g}"


def summary_rows(results: Sequence[RunResult], timing: bool = False) -> list[list[str]]:
    rows = []
    for r in results:
        f = r.final
        ok = r.ok and f is not None
        rows.append([
            r.spec.code,
            str(r.spec.steps),
            _g(f.ppl if ok else None),
            _g(f.accuracy if ok else None),
            _g(f.loss if ok else None),
            str(r.params),
            str(r.peak_mem_bytes),
            str(r.avg_mem_bytes),
            str(r.wall_ms) if timing else "",
        ])
    return rows


def write_csv(rows: Sequence[Sequence[str]], path: Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def emit_reports(results: Sequence[RunResult], out_dir, timing: bool = False) -> dict[str, Path]:
    """summary.csv, plotdata.json and (when present) comparison.csv.

    ``wall_ms`` in the CSVs is left empty unless ``timing`` is set, so that the
    summary stays byte-identical across reruns.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"summary": out / "summary.csv", "plotdata": out / "plotdata.json"}
    rows = summary_rows(results, timing)
    write_csv(rows, paths["summary"])

    module_codes = {v.value for v in MODULE_ORDER}
    cmp_rows = [row for row, r in zip(rows, results) if r.spec.code in module_codes]
    if cmp_rows:
        paths["comparison"] = out / "comparison.csv"
        write_csv(cmp_rows, paths["comparison"])

    plot = []
    for r in results:
        series = [{"step": m.step, "split": m.split, "loss": m.loss, "accuracy": m.accuracy,
                   "ppl": m.ppl, "peak_mem_bytes": m.peak_mem_bytes} for m in r.history]
        plot.append({"code": r.spec.code, "variant": r.spec.variant.value,
                     "status": r.status, "series": series})
    paths["plotdata"].write_text(json.dumps(plot, indent=1) + "\n", encoding="utf-8")
    return paths


def read_summary(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
