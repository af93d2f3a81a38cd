import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from steptune import autodiff as ad
from steptune import cli
from steptune.finetune import CSV_COLUMNS
from steptune.models import load_checkpoint


def run(*argv):
    with ad.use_tape(ad.Tape()):
        return cli.main([str(a) for a in argv])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


TINY_DATA = ("--classes", 2, "--per-class", 8, "--frames", 2)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """dataset -> denoiser -> reward -> two fine-tuning runs, all tiny."""
    root = tmp_path_factory.mktemp("pipe")
    d = lambda name: str(root / name)
    assert run("gen-data", "--out", d("data"), *TINY_DATA, "--seed", 1) == 0
    assert run("pretrain", "--data", d("data"), "--out", d("pre"), "--T", 4, "--hidden", 8,
               "--steps", 30, "--batch", 8) == 0
    assert run("train-reward", "--data", d("data"), "--out", d("rew"), "--T", 4, "--hidden", 8,
               "--steps", 30, "--batch", 4) == 0
    common = ("--denoiser", d("pre/denoiser.npz"), "--reward", d("rew/reward.npz"),
              "--updates", 4, "--batch", 4, "--eval-every", 2, "--eval-per-class", 2,
              "--lr", 1e-3)
    for strat in ("easytune", "full"):
        assert run("finetune", *common, "--strategy", strat, "--out", d(f"ft_{strat}")) == 0
    return root, common


# ---------------------------------------------------------------------------
# gen-data

def test_gen_data_round_trip_and_manifest(tmp_path):
    out = tmp_path / "nested" / "data"
    assert run("gen-data", "--out", out, *TINY_DATA) == 0
    assert sorted(os.listdir(out)) == ["manifest.json", "run.json", "test.csv", "train.csv",
                                       "val.csv"]
    man = json.load(open(out / "run.json"))
    assert man["command"] == "gen-data" and man["config"]["classes"] == 2
    assert "data" in man["seeds"] and man["manifest_version"] == 1
    rows = read_rows(out / "train.csv")
    assert len(rows) == 2 * 6 and set(rows[0]) >= {"sample_id", "class", "f0_0", "f1_1"}


def test_gen_data_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / name, *TINY_DATA, "--seed", 5) == 0
    for f in ("train.csv", "val.csv", "test.csv", "manifest.json", "run.json"):
        a = (tmp_path / "a" / f).read_bytes()
        b = (tmp_path / "b" / f).read_bytes()
        if f == "run.json":
            a, b = json.loads(a), json.loads(b)
            a["config"].pop("out"), b["config"].pop("out")
        assert a == b


def test_out_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    assert run("gen-data", "--out", "rel", *TINY_DATA) == 0
    assert (tmp_path / "rel" / "train.csv").is_file()


def test_hard_negative_flag(tmp_path):
    assert run("gen-data", "--out", tmp_path, "--classes", 4, "--per-class", 8,
               "--hard-negative", "0,1") == 0
    grid = json.load(open(tmp_path / "manifest.json"))["generator"]["grid"]
    assert grid[1][0] == grid[0][0]


# ---------------------------------------------------------------------------
# configuration

def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("classes: 3\nper-class: 8\nframes: 2\nnoise_scale: 0.1\n")
    assert run("gen-data", "--out", tmp_path / "d", "--config", cfg, "--classes", 2) == 0
    got = json.load(open(tmp_path / "d" / "run.json"))["config"]
    assert got["classes"] == 2          # flag beats file
    assert got["noise_scale"] == 0.1    # file beats default
    assert got["dims"] == 2             # default


def test_unknown_config_key_is_an_error(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("clases: 3\n")
    assert run("gen-data", "--out", tmp_path / "d", "--config", cfg) == 1
    assert "clases" in capsys.readouterr().err


def test_bad_yaml_is_an_error(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("- just\n- a list\n")
    assert run("gen-data", "--out", tmp_path / "d", "--config", cfg) == 1


def test_derive_seed_is_stable_and_distinct():
    assert cli.derive_seed(0, "data") == cli.derive_seed(0, "data")
    assert cli.derive_seed(0, "data") != cli.derive_seed(0, "model")
    assert cli.derive_seed(0, "data") != cli.derive_seed(1, "data")


# ---------------------------------------------------------------------------
# errors and exit codes

def test_unknown_strategy_exits_with_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("finetune", "--strategy", "adamw")
    assert exc.value.code == 2


def test_missing_inputs_fail_cleanly(tmp_path, capsys):
    assert run("pretrain", "--data", tmp_path / "nope", "--out", tmp_path / "o") == 1
    assert "missing dataset directory" in capsys.readouterr().err
    assert run("finetune", "--denoiser", tmp_path / "x.npz", "--reward", tmp_path / "y.npz",
               "--out", tmp_path / "o") == 1


def test_analyze_on_empty_directory(tmp_path, capsys):
    assert run("analyze", "--run", tmp_path) == 1
    err = capsys.readouterr().err
    assert "run.json" in err and "updates.csv" in err


def test_compare_needs_runs(tmp_path):
    assert run("compare", "--out", tmp_path) == 1
    assert run("compare", "--runs", tmp_path, "--out", tmp_path / "o") == 1


def test_module_entry_point_runs():
    out = subprocess.run([sys.executable, "-m", "steptune", "--version"], capture_output=True,
                         text=True, check=True)
    assert out.stdout.startswith("steptune ")
    bad = subprocess.run([sys.executable, "-m", "steptune", "finetune", "--strategy", "x"],
                         capture_output=True, text=True)
    assert bad.returncode == 2


# ---------------------------------------------------------------------------
# pipeline

def test_pipeline_outputs(pipeline):
    root, _ = pipeline
    run_dir = root / "ft_easytune"
    for f in ("denoiser.npz", "denoiser_mid.npz", "updates.csv", "eval.csv", "run.json"):
        assert (run_dir / f).is_file()
    man = json.load(open(run_dir / "run.json"))
    assert man["config"]["strategy"] == "easytune"
    assert set(man["inputs"]) >= {"denoiser", "reward"}
    assert len(man["inputs"]["denoiser"]["sha256"]) == 64
    ev = read_rows(run_dir / "eval.csv")
    assert [int(r["update"]) for r in ev] == [0, 2, 4]
    rows = read_rows(run_dir / "updates.csv")
    assert tuple(rows[0]) == CSV_COLUMNS
    assert sum(r["t"] == "final" for r in rows) == 4
    model, meta = load_checkpoint(run_dir / "denoiser.npz", expect_kind="denoiser")
    assert meta["extra"]["iteration"] == 4


def test_finetune_is_reproducible(pipeline, tmp_path):
    root, common = pipeline
    assert run("finetune", *common, "--strategy", "easytune", "--out", tmp_path / "again") == 0
    a = np.load(root / "ft_easytune" / "denoiser.npz")
    b = np.load(tmp_path / "again" / "denoiser.npz")
    for k in a.files:
        if k != "__meta__":
            np.testing.assert_array_equal(a[k], b[k])


def test_zero_kl_weight_equals_omitting_it(pipeline, tmp_path):
    root, common = pipeline
    assert run("finetune", *common, "--strategy", "easytune", "--kl-weight", 0,
               "--out", tmp_path / "kl0") == 0
    a = read_rows(root / "ft_easytune" / "updates.csv")
    b = read_rows(tmp_path / "kl0" / "updates.csv")
    assert [r["loss"] for r in a] == [r["loss"] for r in b]
    assert [r["reward"] for r in a] == [r["reward"] for r in b]


def test_draft_k_requires_K(pipeline, tmp_path, capsys):
    _, common = pipeline
    assert run("finetune", *common, "--strategy", "draft-k", "--out", tmp_path / "dk") == 1
    assert run("finetune", *common, "--strategy", "draft-k", "--K", 2,
               "--out", tmp_path / "dk") == 0


def test_analyze_writes_reports(pipeline):
    root, _ = pipeline
    run_dir = root / "ft_full"
    assert run("analyze", "--run", run_dir, "--T-values", "2,3,4") == 0
    an = json.load(open(run_dir / "analysis.json"))
    law = an["memory"]["full_backprop"]
    assert law["slope"] > 0 and law["r2"] == pytest.approx(1.0)
    assert set(an["jacobian"]) == {"0", "2", "4"}
    assert an["descent"] is not None
    mem = read_rows(run_dir / "memory.csv")
    assert [int(r["T"]) for r in mem] == [2, 3, 4]
    jac = read_rows(run_dir / "jacobian.csv")
    assert len(jac) == 3 * 4 * 4  # checkpoints x conditions x T
    assert run("analyze", "--run", root / "ft_easytune", "--T-values", "2,4",
               "--strategies", "easytune,full") == 0
    an = json.load(open(root / "ft_easytune" / "analysis.json"))
    assert an["memory"]["easytune"]["constant"] and not an["memory"]["full_backprop"]["constant"]


def test_analyze_rejects_non_finetune_runs(pipeline):
    root, _ = pipeline
    (root / "pre" / "updates.csv").write_text("iter\n")
    assert run("analyze", "--run", root / "pre") == 1


def test_compare_table(pipeline, tmp_path):
    root, _ = pipeline
    assert run("compare", "--runs", root / "ft_easytune", root / "ft_full",
               "--out", tmp_path / "cmp") == 0
    rows = read_rows(tmp_path / "cmp" / "compare.csv")
    assert [r["strategy"] for r in rows] == ["easytune", "full_backprop"]
    summary = json.load(open(tmp_path / "cmp" / "compare.json"))
    assert len(summary["rows"]) == 2 and np.isfinite(summary["threshold"])
    assert int(rows[1]["peak_nodes"]) > int(rows[0]["peak_nodes"])
