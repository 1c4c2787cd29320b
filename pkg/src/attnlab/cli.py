"""Command line entry point: ``attnlab {train,bench,compare,gradcheck,oracle}``."""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

from .attention import Variant

# flag name -> (type, default). None defaults are resolved per subcommand.
RUN_FLAGS = {
    "corpus": (str, None),
    "out": (str, "attnlab-out"),
    "seed": (int, None),
    "d_model": (int, None),
    "heads": (int, None),
    "p_drop": (float, None),
    "layers": (int, 2),
    "seg_len": (int, 64),
    "mem_len": (int, None),
    "steps": (int, 2000),
    "batch": (int, 32),
    "variant": (str, None),
    "precision": (int, 32),
    "lr": (float, 1e-3),
    "eval_batches": (int, None),
    "log_every": (int, 50),
    "d_model_div": (int, 1),
}


class UsageError(Exception):
    pass


def read_config(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment; dashes and underscores are equivalent."""
    out = {}
    for n, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in RUN_FLAGS:
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        out[key] = value
    return out


def resolve(args: argparse.Namespace) -> dict:
    """Defaults < config file < command-line flags; seed falls back to $ATTNLAB_SEED."""
    values = {k: default for k, (_, default) in RUN_FLAGS.items()}
    if getattr(args, "config", None):
        for k, v in read_config(args.config).items():
            try:
                values[k] = RUN_FLAGS[k][0](v)
            except ValueError:
                raise UsageError(f"bad value for {k}: {v!r}") from None
    for k in RUN_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    if values["seed"] is None:
        env = os.environ.get("ATTNLAB_SEED")
        try:
            values["seed"] = int(env) if env else 42
        except ValueError:
            raise UsageError(f"ATTNLAB_SEED must be an integer, got {env!r}") from None
    if values["variant"] is not None:
        try:
            values["variant"] = Variant.parse(values["variant"])
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if values["precision"] not in (32, 64):
        raise UsageError("--precision must be 32 or 64")
    if values["mem_len"] is None:
        values["mem_len"] = values["seg_len"]
    return values


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value file; flags override it")
    for key, (typ, _) in RUN_FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)
    p.add_argument("--timing", action="store_true", help="fill wall_ms in summary.csv")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attnlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("train", "single training run"),
                        ("bench", "eight RCMHA variations plus the module comparison (12 runs)"),
                        ("compare", "MHA / MDHA / RMHA / RCMHA at one setting")):
        _add_run_flags(sub.add_parser(name, help=help_))
    g = sub.add_parser("gradcheck", help="finite-difference gradient suites (float64)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=1e-5)
    g.add_argument("--tol", type=float, default=1e-4)
    o = sub.add_parser("oracle", help="naive-vs-fast equivalence suites")
    o.add_argument("--seeds", type=int, default=100)
    return parser


def _desk(v: dict) -> dict:
    return dict(steps=v["steps"], n_layers=v["layers"], seg_len=v["seg_len"],
                mem_len=v["mem_len"], batch=v["batch"], seed=v["seed"])


def _run_kw(v: dict) -> dict:
    return dict(eval_batches=v["eval_batches"], lr=v["lr"], precision=v["precision"],
                log_every=v["log_every"])


def cmd_train(v: dict) -> int:
    from .bench import RunSpec, emit_reports, run_one
    from .model import save_checkpoint
    from .training import build_vocab, load_corpus

    variant = v["variant"] or Variant.RCMHA
    spec = RunSpec(variant.value, variant, v["d_model"] or 128, v["heads"] or 4,
                   v["p_drop"] or 0.0, **_desk(v))
    out = Path(v["out"])
    dataset = build_vocab(load_corpus(v["corpus"]))
    res = run_one(spec, dataset, out, keep_model=True, **_run_kw(v))
    emit_reports([res], out, timing=v["timing"])
    if res.model is not None:
        bin_path, _ = save_checkpoint(res.model.params, out / spec.code)
        print(f"checkpoint: {bin_path}")
    if res.final is not None:
        f = res.final
        print(f"{spec.code}: step {f.step} loss {f.loss:.4f} acc {f.accuracy:.4f} ppl {f.ppl:.4f} "
              f"params {res.params} peak {res.peak_mem_bytes} B")
    if not res.ok:
        print(f"aborted: {res.error}", file=sys.stderr)
        return 1
    return 0


def cmd_grid(v: dict, compare_only: bool) -> int:
    from .bench import comparison_runs, default_grid, run_experiments, ExperimentSpec

    if compare_only:
        spec = ExperimentSpec(comparison_runs(v["d_model"] or 128 // v["d_model_div"],
                                              v["heads"] or 4, v["p_drop"] or 0.0, **_desk(v)))
    else:
        for k in ("d_model", "heads", "p_drop", "variant"):
            if v[k] is not None:
                raise UsageError(f"bench runs the fixed grid; --{k.replace('_', '-')} is not "
                                 f"accepted (use --d-model-div to scale widths)")
        spec = default_grid(v["d_model_div"], **_desk(v))
    results = run_experiments(spec, v["corpus"], v["out"], timing=v["timing"], **_run_kw(v))
    print(f"wrote {Path(v['out']) / 'summary.csv'} ({len(results)} rows)")
    return 0 if all(r.ok for r in results) else 1


def cmd_gradcheck(args) -> int:
    from .verify import gradcheck_suite

    start = time.perf_counter()
    results = gradcheck_suite(args.seed, args.eps, args.tol)
    ok = True
    for r in results:
        flag = "PASS" if r.report.passed else "FAIL"
        ok &= r.report.passed
        print(f"{flag}  {r.name:32s} max rel err {r.report.worst:.3e}")
    print(f"{'all passed' if ok else 'FAILURES'} in {time.perf_counter() - start:.1f}s")
    return 0 if ok else 1


def cmd_oracle(args) -> int:
    import numpy as np

    from . import ops
    from .tensor import Tensor
    from .verify import causality_trials, conv_loop, delta_collapse, matmul_loop, rel_score_sweep

    ok = True

    def line(name, passed, detail):
        nonlocal ok
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name:34s} {detail}")

    sweep = rel_score_sweep(seeds=args.seeds)
    line("rel_scores shifted == naive", sweep["max_abs_err"] <= 1e-10,
         f"max err {sweep['max_abs_err']:.2e} over {sweep['instances']} instances "
         f"({sweep['seconds']:.1f}s)")
    collapse = delta_collapse()
    for key, err in collapse.items():
        line(f"delta-kernel collapse {key}", err <= 1e-12, f"max err {err:.2e}")
    for variant in Variant:
        bad = causality_trials(variant, 50)
        line(f"causality {variant.value}", bad == 0, f"{bad}/50 trials leaked")
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    err = float(np.abs(ops.matmul(Tensor(a), Tensor(b)).data - matmul_loop(a, b)).max())
    line("matmul == loop oracle", err <= 1e-12, f"max err {err:.2e}")
    x, k = rng.normal(size=(2, 7, 5)), rng.normal(size=(5, 3))
    err = float(np.abs(ops.depthwise_conv1d_causal(Tensor(x), Tensor(k)).data - conv_loop(x, k)).max())
    line("depthwise conv == loop oracle", err <= 1e-12, f"max err {err:.2e}")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        if args.command == "oracle":
            return cmd_oracle(args)
        values = resolve(args)
        values["timing"] = args.timing
        if args.command == "train":
            return cmd_train(values)
        return cmd_grid(values, compare_only=args.command == "compare")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"attnlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
