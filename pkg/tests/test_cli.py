import csv
import json

import numpy as np
import pytest

from calmargin import cli
from calmargin.config import ConfigError, ExperimentConfig, config_from_dict, load_config
from calmargin.trainer import NumericalError, generate_dataset
from test_metrics import ACDC_ECE

TINY = {
    "seed": 0,
    "task": {"size": 12, "n_train": 3, "n_val": 2, "n_test": 3, "min_radius": 2.0, "max_radius": 4.0},
    "schedule": {"epochs": 3, "lr_stages": [[0, 0.01]]},
    "model": {"hidden": 6},
    "losses": [{"kind": "CE"}, {"kind": "MBLS_L1", "margin": 8.0, "lam": 0.1}],
    "noise_grid": [0.0, 0.05],
}


def write_config(tmp_path, data=None, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(TINY if data is None else data))
    return p


def run(*args):
    return cli.main([str(a) for a in args])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- config

def test_config_roundtrip_and_hash():
    cfg = config_from_dict(TINY)
    again = config_from_dict(cfg.to_dict())
    assert cfg.hash() == again.hash()
    moved = config_from_dict({**TINY, "output_dir": "elsewhere"})
    assert moved.hash() == cfg.hash()
    assert config_from_dict({**TINY, "seed": 1}).hash() != cfg.hash()


@pytest.mark.parametrize(
    "bad",
    [
        {"sed": 0},
        {"task": {"size": 12, "colour": 1}},
        {"task": {"seed": 3}},
        {"losses": [{"kind": "CE", "temperature": 2}]},
        {"losses": [{"kind": "NOPE"}]},
        {"losses": [{"kind": "CE"}, {"kind": "CE"}]},
        {"metrics": {"mask_rule": "gt"}},
        {"schedule": {"epochs": 0}},
        {"losses": "CE"},
    ],
)
def test_config_rejects(bad):
    with pytest.raises(ConfigError):
        config_from_dict(bad)


def test_default_config_is_valid():
    cfg = ExperimentConfig()
    assert [l.name for l in cfg.losses] == ["CE", "MBLS_m8"]
    assert cfg.noise_grid == [0.0, 0.01, 0.02, 0.03, 0.04, 0.05]


def test_shipped_config_loads():
    from pathlib import Path

    cfg = load_config(Path(__file__).resolve().parents[1] / "configs" / "default.json")
    assert len(cfg.losses) == 7


# ---------------------------------------------------------------- exit codes

def test_usage_errors(tmp_path):
    assert run("train") == 1  # no --config
    assert run("fly", "--config", "x.json") == 1
    assert run("train", "--config", tmp_path / "missing.json") == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("train", "--config", bad) == 1
    assert run("train", "--config", write_config(tmp_path, {"bogus": 1}, "u.json")) == 1


def test_eval_before_train_is_usage_error(tmp_path):
    assert run("eval", "--config", write_config(tmp_path), "--out", tmp_path / "r") == 1


def test_validation_error_exit(tmp_path):
    rep = tmp_path / "r.csv"
    rep.write_text("method,ece\na,0.1\nb,oops\n")
    assert run("rank", "--reports", rep, "--out", tmp_path / "o") == 2


def test_numerical_failure_exit_and_marker(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("non-finite loss")

    monkeypatch.setattr(cli, "train", boom)
    out = tmp_path / "r"
    assert run("train", "--config", write_config(tmp_path), "--out", out) == 3
    assert (out / "train.partial").exists()
    assert not (out / "manifest_train.json").exists()


# ---------------------------------------------------------------- full pipeline

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp)
    out = tmp / "out"
    codes = {c: run(c, "--config", cfg, "--out", out) for c in ("train", "eval", "calibrate", "perturb", "reliability", "rank")}
    return cfg, out, codes


def test_pipeline_succeeds(pipeline):
    _, out, codes = pipeline
    assert all(v == 0 for v in codes.values()), codes
    for c in codes:
        man = json.loads((out / f"manifest_{c}.json").read_text())
        assert man["status"] == "complete" and man["config_hash"]
        assert not (out / f"{c}.partial").exists()


def test_train_outputs(pipeline):
    _, out, _ = pipeline
    man = json.loads((out / "manifest_train.json").read_text())
    assert set(man["outputs"]) == {"CE", "MBLS_L1"}
    assert set(man["timings"]) == {"CE", "MBLS_L1"}
    rows = read_rows(out / "logs" / "CE.csv")
    assert [int(r["epoch"]) for r in rows] == [0, 1, 2]


def test_eval_outputs(pipeline):
    _, out, _ = pipeline
    summary = read_rows(out / "eval" / "summary.csv")
    assert [r["method"] for r in summary] == ["CE", "MBLS_L1"]
    cases = read_rows(out / "eval" / "cases.csv")
    assert len(cases) == 2 * 3
    reports = json.loads((out / "eval" / "CE" / "reports.json").read_text())
    assert len(reports["cases"]) == 3


def test_calibrate_outputs(pipeline):
    _, out, _ = pipeline
    rows = read_rows(out / "calibrate" / "CE" / "summary.csv")
    assert [r["stage"] for r in rows] == ["pre", "ts"]
    assert rows[0]["dsc"] == rows[1]["dsc"]  # TS never moves the argmax
    fit = json.loads((out / "calibrate" / "CE" / "temperature.json").read_text())["fit"]
    assert fit["nll_after"] <= fit["nll_before"]


def test_perturb_outputs(pipeline):
    _, out, _ = pipeline
    rows = read_rows(out / "perturb" / "MBLS_L1.csv")
    assert [float(r["sigma"]) for r in rows] == [0.0, 0.05]


def test_reliability_outputs(pipeline):
    _, out, _ = pipeline
    rows = read_rows(out / "reliability" / "CE.csv")
    assert len(rows) == 15
    assert sum(int(r["count"]) for r in rows) > 0


def test_rank_outputs(pipeline):
    _, out, _ = pipeline
    rows = read_rows(out / "rank" / "sum_rank.csv")
    assert sorted(float(r["final"]) for r in rows) in ([1.0, 2.0], [1.5, 1.5])
    assert (out / "rank" / "mean_case_rank.csv").exists()


def test_refuses_overwrite_unless_forced(pipeline):
    cfg, out, _ = pipeline
    before = (out / "eval" / "summary.csv").read_bytes()
    assert run("eval", "--config", cfg, "--out", out) == 1
    assert run("eval", "--config", cfg, "--out", out, "--force") == 0
    assert (out / "eval" / "summary.csv").read_bytes() == before


def test_byte_identical_reruns(pipeline, tmp_path, monkeypatch):
    cfg, out, _ = pipeline
    other = tmp_path / "again"
    monkeypatch.setenv(cli.THREADS_ENV, "2")  # concurrency must not change results
    assert run("train", "--config", cfg, "--out", other) == 0
    assert run("eval", "--config", cfg, "--out", other) == 0
    for rel in ("logs/CE.csv", "logs/MBLS_L1.csv", "eval/cases.csv", "eval/summary.csv", "eval/MBLS_L1/cases.csv"):
        assert (out / rel).read_bytes() == (other / rel).read_bytes(), rel
    assert (out / "models/CE/params.calt").read_bytes() == (other / "models/CE/params.calt").read_bytes()


# ---------------------------------------------------------------- rank on fixtures, oracle model

def test_rank_reports_acdc_fixture(tmp_path):
    rep = tmp_path / "acdc.csv"
    rep.write_text("method,ece\n" + "".join(f"{m},{v}\n" for m, v in ACDC_ECE.items()))
    out = tmp_path / "o"
    assert run("rank", "--reports", rep, "--out", out) == 0
    final = {r["method"]: float(r["final"]) for r in read_rows(out / "rank" / "sum_rank.csv")}
    assert final["MbLS"] == 1.0
    assert not (out / "rank" / "mean_case_rank.csv").exists()


def test_rank_reports_with_cases(tmp_path):
    rep = tmp_path / "cases.csv"
    rep.write_text("method,case,dsc,ece\na,c1,0.9,0.1\na,c2,0.8,0.2\nb,c1,0.7,0.3\nb,c2,0.6,0.4\n")
    out = tmp_path / "o"
    assert run("rank", "--reports", rep, "--out", out) == 0
    rows = read_rows(out / "rank" / "mean_case_rank.csv")
    assert {r["method"]: float(r["final"]) for r in rows} == {"a": 1.0, "b": 2.0}


def test_oracle_model_scores_perfect_dsc():
    data = generate_dataset(config_from_dict(TINY).task)
    y = data.train.labels
    logits = 10.0 * np.eye(4)[y]
    probs = np.exp(logits - logits.max(-1, keepdims=True))
    probs /= probs.sum(-1, keepdims=True)
    cases, summary = cli.evaluate_probs("oracle", probs, y)
    assert summary["dsc"] == 1.0
    assert all(r.mean_dsc == 1.0 and r.mean_asd == 0.0 for r in cases)


def test_csv_float_format_is_locale_free():
    assert cli.fmt(0.1) == "0.1"
    assert cli.fmt(np.float64(1e-20)) == "1e-20"
    assert cli.fmt(float("nan")) == "nan"
