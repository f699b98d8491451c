import csv
import io
import json
import os
import re
import subprocess
import sys

import pytest

from ckt_surrogate import cli
from ckt_surrogate.cli import OUT_ENV, SWEEP_COLUMNS, build_parser, main
from ckt_surrogate.data import Dataset

from conftest import GOLDEN

sys.path.insert(0, GOLDEN)
from make_goldens import SWEEP_CONFIG  # noqa: E402

TINY = """
[model]
d_model = 8
heads = 2
layers = 1
out_heads = 2
[training]
epochs = 2
fc_epochs = 2
fc_members = 2
fc_hidden = [8, 8]
[sizing]
ppo_hidden = [8]
ppo_n_envs = 4
ppo_iterations = 1
refresh_iterations = 1
sampled_envs = 4
finetune_epochs = 1
[report]
bench_batch = 20
bench_repeats = 3
gradcheck_params = 2
gradcheck_metrics = 2
gradcheck_max_entries = 4
gradcheck_batch = 2
"""

OVERFIT = """
[model]
d_model = 16
heads = 2
layers = 2
out_heads = 2
[training]
epochs = 600
batch_size = 20
lr = 3e-3
patience = 0
val_fraction = 0.0
bootstrap_heads = false
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.toml"
    p.write_text(TINY)
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


def test_datagen_empty(tmp_path):
    p = tmp_path / "empty.csv"
    assert run("datagen", "--n", 0, "--path", p, "--quiet") == 0
    ds = Dataset.load(p)
    assert len(ds) == 0 and ds.param_names and ds.metric_names


def test_datagen_reproducible_with_meta(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    run("--seed", 4, "datagen", "--n", 20, "--path", a, "--quiet")
    run("datagen", "--seed", 4, "--n", 20, "--path", b, "--quiet")
    assert a.read_bytes() == b.read_bytes()
    ds = Dataset.load(a)
    assert ds.seed == 4 and "config_hash" in ds.meta and "tool_version" in ds.meta


def test_out_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "envout"))
    assert run("datagen", "--n", 3, "--quiet") == 0
    assert list((tmp_path / "envout").glob("*.csv"))


def test_help_lists_every_flag(capsys):
    parser = build_parser()
    sub = next(a for a in parser._actions if a.dest == "command")
    assert set(sub.choices) == {"datagen", "train", "eval", "sweep", "size", "baseline",
                                "gradcheck", "bench"}
    for name, sp in sub.choices.items():
        text = sp.format_help()
        for action in sp._actions:
            for flag in action.option_strings:
                assert flag in text, (name, flag)
        for flag in ("--config", "--seed", "--out", "--quiet"):
            assert flag in text


def test_error_line(tmp_path, capsys):
    code = run("train", "--dataset", tmp_path / "missing.csv")
    assert code != 0
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("error: ")
    rec = json.loads(err[len("error: "):])
    assert rec["command"] == "train" and rec["type"] == "FileNotFoundError"
    bad = tmp_path / "bad.toml"
    bad.write_text("[model]\nwidth = 3\n")
    assert run("--config", bad, "datagen", "--n", 1) == 2
    assert "unknown configuration key" in capsys.readouterr().err


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "ckt_surrogate.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()


def test_train_eval_identity(tmp_path):
    cfg = tmp_path / "overfit.toml"
    cfg.write_text(OVERFIT)
    data = tmp_path / "d.csv"
    run("--config", cfg, "datagen", "--n", 20, "--path", data, "--quiet")
    assert run("--config", cfg, "--out", tmp_path, "train", "--dataset", data,
               "--name", "m", "--quiet") == 0
    hist = (tmp_path / "m_history.csv").read_text().splitlines()
    assert hist[0].startswith("# config_hash")
    assert run("--config", cfg, "--out", tmp_path, "eval", "--ckpt", tmp_path / "m.ckpt",
               "--dataset", data, "--name", "e.csv", "--quiet") == 0
    rows = [line for line in (tmp_path / "e.csv").read_text().splitlines()
            if not line.startswith("#")]
    rec = dict(zip(*csv.reader(rows)))
    assert float(rec["aggregate_r2"]) > 0.999


def _strip_wall(text):
    out = []
    for row in csv.reader(io.StringIO(text)):
        if row and not row[0].startswith("#") and row[0] != "circuit":
            row[-1] = "<wall>"
        out.append(row)
    return out


def test_sweep_matches_golden(tmp_path):
    cfg = tmp_path / "sweep.toml"
    cfg.write_text(SWEEP_CONFIG)
    assert run("--config", cfg, "--out", tmp_path, "sweep", "--sizes", "30:10",
               "--quiet") == 0
    got = (tmp_path / "sweep.csv").read_text()
    with open(os.path.join(GOLDEN, "sweep_30_10.csv")) as fh:
        want = fh.read()
    assert _strip_wall(got) == _strip_wall(want)


def test_sweep_1500_500_row_format(tmp_path, tiny_cfg):
    assert run("--config", tiny_cfg, "--out", tmp_path, "sweep", "--sizes", "1500:500",
               "--epochs", 1, "--quiet") == 0
    lines = [line for line in (tmp_path / "sweep.csv").read_text().splitlines()
             if not line.startswith("#")]
    rows = list(csv.reader(lines))
    assert rows[0] == SWEEP_COLUMNS
    assert [r[4] for r in rows[1:]] == ["insight", "fc_ensemble"]
    pattern = [r"[a-z0-9_]+", r"synth\d+", r"1500", r"500", r"insight|fc_ensemble",
               r"-?\d+\.\d{6}", r"\d\.\d{6}e[+-]\d\d", r"\d+", r"\d+", r"[0-9a-f]{16}",
               r"\d+\.\d"]
    for r in rows[1:]:
        assert len(r) == len(SWEEP_COLUMNS)
        for v, pat in zip(r, pattern):
            assert re.fullmatch(pat, v), (v, pat)


def test_gradcheck_bench_size_baseline(tmp_path, tiny_cfg, capsys):
    assert run("--config", tiny_cfg, "--out", tmp_path, "gradcheck") == 0
    assert "PASS" in (tmp_path / "gradcheck.txt").read_text()
    assert run("--config", tiny_cfg, "--out", tmp_path, "bench", "--quiet") == 0
    bench = (tmp_path / "bench.txt").read_text()
    assert "speedup" in bench and bench.startswith("# config_hash")
    assert run("--config", tiny_cfg, "--out", tmp_path, "size", "--budget", 3,
               "--topology", "comparator", "--quiet") == 0
    log = [json.loads(line) for line in (tmp_path / "size.jsonl").read_text().splitlines()]
    assert log[0]["event"] == "meta" and "config_hash" in log[0]
    result = (tmp_path / "size_result.txt").read_text()
    assert "real_simulations" in result
    assert run("--config", tiny_cfg, "--out", tmp_path, "baseline", "--budget", 5,
               "--quiet") == 0
    assert (tmp_path / "baseline_result.txt").exists()


def test_bench_function_reports_speedup(tmp_path, tiny_cfg):
    from ckt_surrogate.config import RunConfig
    ck = cli._fresh_checkpoint(RunConfig.load(tiny_cfg))
    res = cli.bench(ck, batch=16, repeats=3)
    assert res["speedup"] == pytest.approx(res["per_sample_batch1_s"] / res["per_sample_batched_s"])
