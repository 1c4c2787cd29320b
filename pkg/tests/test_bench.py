import math
import os
import subprocess
import sys

import pytest

from attnlab.attention import Variant
from attnlab.bench import (SUMMARY_COLUMNS, ExperimentSpec, RunSpec, default_grid, meter_memory,
                           read_summary, run_experiments)
from attnlab.cli import main
from attnlab.model import load_checkpoint
from attnlab.training import build_vocab

TEXT = "Now is the winter of our discontent made glorious summer by this sun of York.\n" * 60
SMALL = dict(n_layers=1, seg_len=8, mem_len=8, steps=3, batch=2)


@pytest.fixture
def corpus(tmp_path):
    p = tmp_path / "corpus.txt"
    p.write_text(TEXT, encoding="utf-8")
    return p


@pytest.fixture
def dataset():
    return build_vocab(TEXT)


def spec(*rows):
    return ExperimentSpec([RunSpec(code, v, d, h, p, **SMALL) for code, v, d, h, p in rows])


# grid ---------------------------------------------------------------------------------

def test_default_grid_rows():
    g = default_grid()
    assert len(g) == 12
    assert g.codes == list("ABCDEFGH") + ["MHA", "MDHA", "RMHA", "RCMHA"]
    a, h = g["A"], g["H"]
    assert (a.d_model, a.heads, a.p_drop) == (128, 4, 0.0)
    assert (h.d_model, h.heads, h.p_drop) == (512, 8, 0.1)
    assert all(g[v].d_model == 128 and g[v].heads == 4 and g[v].variant is Variant.parse(v)
               for v in ("MHA", "MDHA", "RMHA", "RCMHA"))
    assert all(r.steps == 2000 and r.n_layers == 2 and r.seg_len == 64 for r in g)


def test_scaled_grid():
    g = default_grid(4, steps=50)
    assert g["A"].d_model == 32 and g["H"].d_model == 128 and g["RCMHA"].d_model == 32


def test_duplicate_codes_rejected():
    with pytest.raises(ValueError, match="duplicate"):
        spec(("A", "MHA", 8, 2, 0.0), ("A", "RMHA", 8, 2, 0.0))


# reports ------------------------------------------------------------------------------

def test_empty_spec_gives_header_only(tmp_path):
    assert run_experiments(ExperimentSpec(), out_dir=tmp_path, log=None) == []
    assert (tmp_path / "summary.csv").read_text() == ",".join(SUMMARY_COLUMNS) + "\n"


def test_one_run_csv(tmp_path, corpus):
    results = run_experiments(spec(("X", "RCMHA", 8, 2, 0.0)), corpus, tmp_path, log=None)
    assert results[0].ok
    lines = (tmp_path / "summary.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[0] == ",".join(SUMMARY_COLUMNS)
    row = read_summary(tmp_path / "summary.csv")[0]
    assert row["wall_ms"] == "" and row["train_steps"] == "3"
    assert abs(float(row["ppl"]) - math.exp(float(row["loss"]))) / float(row["ppl"]) <= 1e-4
    assert (tmp_path / "runs" / "X.jsonl").exists()
    assert not (tmp_path / "comparison.csv").exists()


def test_comparison_rows_in_order(tmp_path, corpus):
    rows = [("B", "RCMHA", 8, 2, 0.0)] + [(v, v, 8, 2, 0.0) for v in ("MHA", "MDHA", "RMHA", "RCMHA")]
    run_experiments(spec(*rows), corpus, tmp_path, log=None)
    codes = [r["code"] for r in read_summary(tmp_path / "comparison.csv")]
    assert codes == ["MHA", "MDHA", "RMHA", "RCMHA"]


def test_failed_run_becomes_aborted_row(tmp_path, corpus):
    bad = RunSpec("BAD", "MHA", 8, 2, 0.0, **{**SMALL, "batch": 10_000})
    good = RunSpec("OK", "MHA", 8, 2, 0.0, **SMALL)
    results = run_experiments(ExperimentSpec([bad, good]), corpus, tmp_path, log=None)
    assert [r.status for r in results] == ["aborted", "ok"]
    rows = read_summary(tmp_path / "summary.csv")
    assert rows[0]["ppl"] == "nan" and rows[1]["ppl"] != "nan"


def test_timing_flag_fills_wall_ms(tmp_path, corpus):
    run_experiments(spec(("X", "MHA", 8, 2, 0.0)), corpus, tmp_path, log=None, timing=True)
    assert read_summary(tmp_path / "summary.csv")[0]["wall_ms"].isdigit()


# memory metering -----------------------------------------------------------------------

def test_peaks_are_isolated_from_run_order(dataset):
    rows = [("P", "MHA", 8, 2, 0.0), ("Q", "RCMHA", 16, 2, 0.0), ("R", "RMHA", 8, 4, 0.0)]
    forward = {r.spec.code: r.peak_mem_bytes for r in run_experiments(spec(*rows), log=None, dataset=dataset)}
    backward = {r.spec.code: r.peak_mem_bytes
                for r in run_experiments(spec(*rows[::-1]), log=None, dataset=dataset)}
    assert forward == backward


def test_wider_model_uses_more_memory(dataset):
    small = RunSpec("s", "RCMHA", 32, 4, 0.0, **SMALL)
    large = RunSpec("l", "RCMHA", 128, 4, 0.0, **SMALL)
    (ps, avg_s), (pl, _) = meter_memory(small, dataset), meter_memory(large, dataset)
    assert pl > ps and 0 < avg_s <= ps


# cli ----------------------------------------------------------------------------------

def test_cli_gradcheck_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "attnlab", "gradcheck"], capture_output=True,
                          text=True, timeout=300)
    assert proc.returncode == 0, proc.stdout + proc.stderr
    assert "all passed" in proc.stdout


def test_cli_invalid_variant(capsys, corpus, tmp_path):
    code = main(["train", "--variant", "XMHA", "--corpus", str(corpus), "--out", str(tmp_path)])
    assert code != 0
    assert "MHA, MDHA, RMHA, RCMHA" in capsys.readouterr().err


def test_cli_unknown_flag():
    with pytest.raises(SystemExit) as exc:
        main(["train", "--no-such-flag"])
    assert exc.value.code != 0


def test_cli_bench_rejects_width_flags(capsys):
    assert main(["bench", "--d-model", "64"]) == 2
    assert "--d-model-div" in capsys.readouterr().err


def test_cli_compare_emits_four_rows(corpus, tmp_path):
    out = tmp_path / "cmp"
    code = main(["compare", "--steps", "2", "--d-model", "32", "--layers", "1", "--seg-len", "8",
                 "--batch", "2", "--corpus", str(corpus), "--out", str(out), "--eval-batches", "2"])
    assert code == 0
    assert [r["code"] for r in read_summary(out / "summary.csv")] == ["MHA", "MDHA", "RMHA", "RCMHA"]


def test_cli_train_with_config_file(corpus, tmp_path, monkeypatch):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"# tiny run\nd-model = 16\nheads = 2\nlayers = 1\nseg_len = 8\nsteps = 4\n"
                   f"batch = 2\nvariant = rmha\ncorpus = {corpus}\nsteps = 3\n")
    monkeypatch.setenv("ATTNLAB_SEED", "5")
    out = tmp_path / "train"
    assert main(["train", "--config", str(cfg), "--steps", "2", "--out", str(out)]) == 0
    row = read_summary(out / "summary.csv")[0]
    assert row["code"] == "RMHA" and row["train_steps"] == "2"
    assert (out / "runs" / "RMHA.jsonl").exists()
    params = load_checkpoint(out / "RMHA")
    assert params["embed"].shape == (len(set(TEXT)), 16)


def test_cli_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("widht = 3\n")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "unknown key" in capsys.readouterr().err


def test_seed_env_fallback(monkeypatch):
    from attnlab.cli import build_parser, resolve

    monkeypatch.setenv("ATTNLAB_SEED", "17")
    assert resolve(build_parser().parse_args(["train"]))["seed"] == 17
    assert resolve(build_parser().parse_args(["train", "--seed", "3"]))["seed"] == 3
    monkeypatch.delenv("ATTNLAB_SEED")
    assert resolve(build_parser().parse_args(["train"]))["seed"] == 42
