"""Acceptance criteria 1-9, one PASS/FAIL line each (see the terminal summary).

Criteria 6 and 7 train six desk-scale models (about 13 minutes each on one
CPU core); the whole module takes about an hour.
"""
import filecmp
import math
import time

import pytest

from attnlab.attention import Variant
from attnlab.bench import SUMMARY_COLUMNS, VARIATIONS, RunSpec, read_summary, run_one
from attnlab.cli import main
from attnlab.model import ModelConfig, init_params, param_count, param_count_formula
from attnlab.tensor import Rng
from attnlab.verify import causality_trials, delta_collapse, gradcheck_suite, rel_score_sweep

SEEDS = (42, 43, 44)


def test_gradient_verification(verdict):
    start = time.process_time()
    results = gradcheck_suite(seed=0, eps=1e-5, tol=1e-4)
    seconds = time.process_time() - start
    worst = max(r.report.worst for r in results)
    names = {r.name for r in results}
    assert {f"attention[{v.value}]" for v in Variant} <= names
    assert {f"model[{v.value}]" for v in Variant} <= names
    ok = worst <= 1e-4 and seconds <= 120
    assert verdict(1, "gradcheck", ok,
                   f"{len(results)} suites, max rel err {worst:.2e}, {seconds:.1f}s CPU")


def test_relative_scoring_oracle(verdict):
    sweep = rel_score_sweep(seeds=100)
    assert sweep["instances"] == 8 * 9 * 3 * 100
    ok = sweep["max_abs_err"] <= 1e-10 and sweep["seconds"] <= 60
    assert verdict(2, "relative-score oracle", ok,
                   f"max err {sweep['max_abs_err']:.2e} over {sweep['instances']} instances, "
                   f"{sweep['seconds']:.1f}s")


def test_delta_kernel_collapse(verdict):
    worst = delta_collapse(d_models=(8, 16))
    ok = max(worst.values()) <= 1e-12
    assert verdict(3, "delta-kernel collapse", ok,
                   ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_causality(verdict):
    leaks = {v.value: causality_trials(v, trials=50) for v in Variant}
    ok = not any(leaks.values())
    assert verdict(4, "causality", ok, ", ".join(f"{k} {n}/50 leaked" for k, n in leaks.items()))


# ---------------------------------------------------------------------------
# desk-scale training (criteria 5, 6, 7)


@pytest.fixture(scope="session")
def desk_runs(shakespeare):
    runs = {}
    for seed in SEEDS:
        for variant in (Variant.RCMHA, Variant.MHA):
            spec = RunSpec(variant.value, variant, 128, 4, 0.0, seed=seed)
            start = time.process_time()
            res = run_one(spec, shakespeare)
            runs[variant, seed] = (res, time.process_time() - start)
    return runs


@pytest.mark.slow
def test_desk_training_sanity(desk_runs, verdict):
    res, seconds = desk_runs[Variant.RCMHA, 42]
    first = res.history[0]
    final = res.final
    ok = (res.ok and final.split == "valid" and final.loss <= 2.0 and final.accuracy >= 0.40
          and abs(first.loss - math.log(65)) / math.log(65) <= 0.15 and seconds <= 1800)
    assert verdict(6, "desk-scale training", ok,
                   f"step-1 loss {first.loss:.3f} (ln 65 = 4.174), valid loss {final.loss:.4f}, "
                   f"accuracy {final.accuracy:.4f}, {seconds / 60:.1f} min CPU")


@pytest.mark.slow
def test_comparative_ordering(desk_runs, verdict):
    parts, ok = [], True
    for seed in SEEDS:
        rc = desk_runs[Variant.RCMHA, seed][0].final.accuracy
        mha = desk_runs[Variant.MHA, seed][0].final.accuracy
        ok &= rc >= mha - 0.02
        parts.append(f"seed {seed}: RCMHA {rc:.4f} vs MHA {mha:.4f}")
    assert verdict(7, "RCMHA accuracy >= MHA - 0.02", ok, "; ".join(parts))


@pytest.mark.slow
def test_ppl_identity(desk_runs, bench_outputs, verdict):
    reference = ((1.32757, 3.77187), (1.55303, 4.72575), (1.52675, 4.60318))
    worst_ref = max(abs(math.exp(l) - p) / p for l, p in reference)
    rows = [r for res, _ in desk_runs.values() for r in res.history]
    worst_rec = max(abs(r.ppl - math.exp(r.loss)) / r.ppl for r in rows)
    summary = read_summary(bench_outputs[0][0] / "summary.csv")
    worst_csv = max(abs(float(r["ppl"]) - math.exp(float(r["loss"]))) / float(r["ppl"])
                    for r in summary)
    ok = worst_ref < 1e-3 and worst_rec <= 1e-6 and worst_csv < 1e-3
    assert verdict(5, "exp(loss) == ppl", ok,
                   f"reference rows {worst_ref:.1e}, {len(rows)} records {worst_rec:.1e}, "
                   f"{len(summary)} csv rows {worst_csv:.1e} (6 significant digits)")


# ---------------------------------------------------------------------------
# grid and accounting (criteria 8, 9)


@pytest.fixture(scope="session")
def bench_outputs(tmp_path_factory):
    outs = []
    for n in range(2):
        out = tmp_path_factory.mktemp(f"bench{n}")
        code = main(["bench", "--steps", "50", "--d-model-div", "4", "--out", str(out)])
        outs.append((out, code))
    return [o for o, _ in outs], [c for _, c in outs]


@pytest.mark.slow
def test_grid_integrity(bench_outputs, verdict):
    (a, b), codes = bench_outputs
    rows = read_summary(a / "summary.csv")
    header = (a / "summary.csv").read_text().splitlines()[0]
    expected = list("ABCDEFGH") + ["MHA", "MDHA", "RMHA", "RCMHA"]
    identical = filecmp.cmp(a / "summary.csv", b / "summary.csv", shallow=False)
    ok = (codes == [0, 0] and header == ",".join(SUMMARY_COLUMNS)
          and [r["code"] for r in rows] == expected and all(r["ppl"] != "nan" for r in rows)
          and identical)
    assert verdict(8, "grid integrity", ok,
                   f"{len(rows)} rows, exit codes {codes}, byte-identical reruns: {identical}")


def test_param_accounting(verdict):
    parts, ok = [], True
    for code, d, h, p in VARIATIONS:
        cfg = ModelConfig(vocab_size=65, n_layers=2, d_model=d, heads=h, p_drop=p,
                          variant=Variant.RCMHA)
        enumerated = param_count(init_params(cfg, Rng(0)))
        formula = param_count_formula(cfg)
        ok &= enumerated == formula
        parts.append(f"{code} {enumerated}")
    assert verdict(9, "param formula == enumeration", ok, ", ".join(parts))
