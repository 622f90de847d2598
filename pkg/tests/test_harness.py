import json
import math

import numpy as np
import pytest

from rdiv.dgp import counterfactual_truth_exact, proximal_params
from rdiv.errors import ConfigInvariantError, ConfigKeyError, ConfigMissingError, ConfigSyntaxError
from rdiv.harness import config as hc
from rdiv.harness import experiments as hx
from rdiv.harness import report as hr
from rdiv.harness.cli import main


def tiny(experiment="bench", **top):
    doc = {
        "experiment": experiment,
        "replications": 1,
        "record_timing": False,
        "dgp": {"d_S": 3, "d_Q": 3, "d_W": 1, "n": 60, "links": ["Id", "Sigmoid"]},
        "density": {"candidates": [{"components": 1, "parameterization": "linear", "epochs": 3},
                                   {"components": 2, "parameterization": "linear", "epochs": 2}]},
        "estimator": {"alphas": [0.1, 0.0], "mc_batch": 4,
                      "hypothesis": {"width": 4, "hidden_layers": 1},
                      "train": {"epochs": 2, "batch_size": 30}},
        "bias_study": {"dimension": 50, "betas": [1.0, 4.0, 3.0], "iterations": [1, 2]},
        "rate_study": {"dimension": 4, "ns": [200, 800, 3200], "alphas": [1e-3, 1e-2, 1e-1],
                       "large_n": 5000},
        "select": {"n_train": 60, "n_val": 40, "density_components": [10], "density_batch": [30],
                   "stage2_batch": [30], "learning_rates": [1e-3], "epochs": [20], "scale": 0.1},
    }
    doc.update(top)
    return hc.from_dict(doc)


def write_yaml(path, text):
    path.write_text(text)
    return path


# ---------------------------------------------------------------- config

def test_minimal_config_takes_defaults(tmp_path):
    cfg = hc.parse_config(write_yaml(tmp_path / "c.yaml", "experiment: bias-study\n"))
    assert cfg.replications == 20 and cfg.dgp.n == 500 and cfg.estimator.alphas == [0.1, 0.0]
    assert hc.from_dict(hc.to_dict(cfg)) == cfg


def test_empty_file_is_all_defaults(tmp_path):
    assert hc.parse_config(write_yaml(tmp_path / "c.yaml", "")) == hc.ExperimentConfig()


def test_unknown_key_names_the_key(tmp_path):
    with pytest.raises(ConfigKeyError) as err:
        hc.parse_config(write_yaml(tmp_path / "c.yaml", "estimator:\n  alpah: 0.1\n"))
    assert "unknown key 'estimator.alpah'" in str(err.value)
    with pytest.raises(ConfigKeyError, match="unknown key 'alpah'"):
        hc.from_dict({"alpah": 0.1})


def test_invariants_name_the_field():
    with pytest.raises(ConfigInvariantError, match="replications"):
        hc.from_dict({"replications": 0})
    with pytest.raises(ConfigInvariantError, match="estimator.alphas"):
        hc.from_dict({"estimator": {"alphas": [-1.0]}})
    with pytest.raises(ConfigInvariantError, match="dgp.links"):
        hc.from_dict({"dgp": {"links": ["Exp"]}})
    with pytest.raises(ConfigInvariantError, match="dgp"):
        hc.from_dict({"dgp": {"d_S": 3, "d_Q": 4}})
    with pytest.raises(ConfigInvariantError, match="seed: expected an integer"):
        hc.from_dict({"seed": "zero"})


def test_missing_file(tmp_path):
    with pytest.raises(ConfigMissingError):
        hc.parse_config(tmp_path / "nope.yaml")


def test_syntax_error_reports_line(tmp_path):
    with pytest.raises(ConfigSyntaxError) as err:
        hc.parse_config(write_yaml(tmp_path / "c.yaml", "seed: 1\nestimator: [1, 2\nthreads: 2\n"))
    assert err.value.line is not None and "line" in str(err.value)


@pytest.mark.parametrize("name", ["bench", "bias-study", "rate-study", "select"])
def test_shipped_configs_parse(name):
    from pathlib import Path
    cfg = hc.parse_config(Path(__file__).parent.parent / "configs" / f"{name}.yaml")
    assert cfg.experiment == name


# ---------------------------------------------------------------- report

def test_csv_round_trip_is_exact(tmp_path):
    rows = [hr.make_row("bench", "Id", 500, 0.1, 1, r, 20.0 + 0.1 / 3 * r, 20.64927, 1.5, 7 + r)
            for r in range(3)]
    rows.append(hr.failed_row("bench", "Id", 500, 0.1, 1, 3, 20.64927, 2.0, 11, "training-diverged"))
    rows += hr.aggregate(rows)
    hr.write_csv(rows, tmp_path / "r.csv")
    back = hr.read_csv(tmp_path / "r.csv")
    assert len(back) == len(rows)
    for a, b in zip(rows, back):
        for name in hr.FIELDS:
            x, y = getattr(a, name), getattr(b, name)
            assert (isinstance(x, float) and math.isnan(x) and math.isnan(y)) or x == y


def test_aggregate_mean_and_spread():
    rows = [hr.make_row("bench", "Id", 10, 0.1, 1, r, v, 1.0, 0.0, r) for r, v in enumerate([1.0, 2.0, 3.0])]
    mean, spread = hr.aggregate(rows)
    assert mean.replication == "mean" and mean.estimate == pytest.approx(2.0)
    assert spread.replication == "2sd" and spread.estimate == pytest.approx(2.0)
    assert mean.seed == 3 and mean.status == "ok"


def test_aggregate_skips_failed_rows():
    rows = [hr.make_row("bench", "Id", 10, 0.1, 1, 0, 2.0, 1.0, 0.0, 0),
            hr.failed_row("bench", "Id", 10, 0.1, 1, 1, 1.0, 0.0, 1, "unsupported")]
    mean, _ = hr.aggregate(rows)
    assert mean.estimate == 2.0 and mean.seed == 1 and mean.status == "failed:1"


def test_normalized_error_modes():
    assert hr.normalized_error(3.0, 2.0) == (1.0, 0.25)
    assert hr.normalized_error(3.0, -2.0, "linear") == (25.0, 12.5)


# ---------------------------------------------------------------- experiments

def test_derive_seed_is_stable_and_distinct():
    assert hx.derive_seed(0, 1, 2) == hx.derive_seed(0, 1, 2)
    assert len({hx.derive_seed(0, 0, i) for i in range(100)}) == 100
    assert hx.derive_seed(0, 1, 2) != hx.derive_seed(0, 2, 1)


@pytest.fixture(scope="module")
def bench_rows():
    return hx.run_bench(tiny())


def test_bench_row_count(bench_rows):
    cfg = tiny()
    runs = [r for r in bench_rows if r.replication not in ("mean", "2sd")]
    assert len(runs) == len(cfg.dgp.links) * len(cfg.estimator.alphas) * cfg.replications
    assert len(bench_rows) == 3 * len(runs)
    assert [(r.setting, r.alpha) for r in runs] == [("Id", 0.1), ("Id", 0.0), ("Sigmoid", 0.1), ("Sigmoid", 0.0)]
    assert all(r.status == "ok" and np.isfinite(r.estimate) for r in runs)
    truth = counterfactual_truth_exact(proximal_params(3, 3, 1, "Id"))
    assert all(r.truth == truth for r in runs if r.setting == "Id")


def test_bench_is_deterministic_and_thread_invariant(bench_rows, tmp_path):
    hr.write_csv(bench_rows, tmp_path / "a.csv")
    hr.write_csv(hx.run_bench(tiny()), tmp_path / "b.csv")
    hr.write_csv(hx.run_bench(tiny(threads=2)), tmp_path / "c.csv")
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes() == (tmp_path / "c.csv").read_bytes()


def test_bench_seed_changes_results(bench_rows):
    other = hx.run_bench(tiny(seed=5))
    assert other[0].estimate != bench_rows[0].estimate


def test_bias_study_examples():
    rows = hx.run_bias_study(tiny("bias-study"))
    by_key = {(float(r.setting), r.m): r for r in rows}
    for beta, m, expected in ((1.0, 1, 1.0), (4.0, 1, 2.0), (3.0, 2, 3.0)):
        row = by_key[(beta, m)]
        assert row.truth == expected
        assert row.estimate == pytest.approx(expected, rel=0.05)


def test_rate_study_error_decreases():
    summary = []
    rows = hx.run_rate_study(tiny("rate-study", replications=5), summary)
    s = summary[0]
    assert s.slope < 0
    assert [r.experiment for r in rows if r.replication == 0][-2:] == ["rate-study:large-n", "rate-study:slope"]
    assert set(s.tuned_alpha.values()) <= {1e-3, 1e-2, 1e-1}


def test_select_chooses_from_the_grid():
    reports = []
    rows = hx.run_select(tiny("select"), reports)
    chosen = [r for r in rows if r.experiment == "select:chosen" and r.replication == 0]
    candidates = [r for r in rows if r.experiment.startswith("select:") and r.replication == 0]
    assert len(chosen) == 1 and len(candidates) == 1
    report = reports[0]
    assert report["best_erm"]["index"] == 0 and len(report["density_grid"]) == 1


def test_selection_oracle_small():
    out = hx.selection_oracle(0, replications=3)
    for rec in out:
        assert rec["best_index"] == 1
        assert rec["convex_loss"] <= rec["best_loss"] + 1e-12
        assert abs(sum(rec["convex_theta"]) - 1.0) <= 1e-8


# ---------------------------------------------------------------- CLI

def test_cli_writes_csv_and_manifest(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", "bias_study:\n  dimension: 30\n  betas: [1.0]\n  iterations: [1]\n")
    out = tmp_path / "res" / "bias.csv"
    assert main(["bias-study", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    rows = hr.read_csv(out)
    assert len(rows) == 1 and rows[0].experiment == "bias-study" and rows[0].seed == 3
    manifest = json.loads(out.with_suffix(".json").read_text())
    assert manifest["config"]["seed"] == 3 and manifest["rows"] == 1 and manifest["failed_rows"] == 0
    assert "git_describe" in manifest
    assert "1 rows (0 failed)" in capsys.readouterr().out


@pytest.mark.parametrize("text,category", [
    ("estimator:\n  alpah: 0.1\n", "config-unknown-key"),
    ("replications: 0\n", "config-invariant"),
    ("seed: [1\n", "config-syntax"),
])
def test_cli_config_errors(tmp_path, capsys, text, category):
    cfg = write_yaml(tmp_path / "c.yaml", text)
    assert main(["bench", "--config", str(cfg)]) == 1
    assert capsys.readouterr().err.startswith(f"error: {category}:")


def test_cli_missing_config(tmp_path, capsys):
    assert main(["bench", "--config", str(tmp_path / "nope.yaml")]) == 1
    assert capsys.readouterr().err.startswith("error: config-missing:")


def test_cli_override_validation(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "c.yaml", "")
    assert main(["bench", "--config", str(cfg), "--threads", "0"]) == 1
    assert "threads" in capsys.readouterr().err


def test_cli_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["unknown-experiment", "--config", "x.yaml"])
    assert err.value.code == 2
