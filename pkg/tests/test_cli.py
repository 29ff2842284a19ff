import json
import math
import subprocess
import sys

import numpy as np
import pytest
import yaml

from dtm.cli import EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, ConfigError, RunConfig, main
from dtm.protocol import read_table

QUICK_TRAIN = {"lr": 0.05, "batch_size": 32, "max_epochs": 20, "patience": 5}


def write_config(path, **over):
    doc = {"synthetic": {"n": 120, "beta": [1.0, -0.5, 0.0]}, "models": ["SI", "SI-LS_x"],
           "train": QUICK_TRAIN, "splits": {"n_splits": 2}, "bootstrap": 50, "seed": 3,
           "out": str(path.parent / "run")}
    doc.update(over)
    path.write_text(yaml.safe_dump(doc))
    return path


def run(command, cfg, *extra):
    return main([command, "--config", str(cfg), *extra])


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_config(d / "run.yaml")
    out = d / "out"
    assert run("fit", cfg, "--out", str(out)) == EXIT_OK
    assert run("evaluate", cfg, "--out", str(out)) == EXIT_OK
    return cfg, out


def test_fit_writes_one_ensemble_per_split(fitted):
    _, out = fitted
    for model in ("SI", "SI-LS_x"):
        for s in range(2):
            d = out / "fits" / model / f"split{s}"
            assert (d / "ensemble.json").exists() and (d / "member0.dtm").exists()
            assert (d / "member0_history.csv").exists()
    assert len(json.loads((out / "splits.json").read_text())) == 2


def test_si_has_no_discrimination(fitted):
    _, out = fitted
    rows = read_table(out / "metrics.csv")
    auc = [r for r in rows if r["model"] == "SI" and r["metric"] == "auc_error" and r["outcome"] == "binary"]
    assert auc and all(r["estimate"] == 0.5 for r in auc)


def test_reports_parse_back(fitted):
    _, out = fitted
    rows = read_table(out / "metrics.csv")
    summary = json.loads((out / "summary.json").read_text())
    pooled = {(r["model"], r["outcome"], r["metric"]): r for r in rows if r["split"] == "all"}
    for r in summary["metrics"]:
        row = pooled[(r["model"], r["outcome"], r["metric"])]
        for k in ("estimate", "lo", "median", "hi"):
            if r[k] is None:
                assert math.isnan(row[k])
            else:
                assert row[k] == r[k]
    for name in ("relative.csv", "coefficients.csv", "calibration.csv"):
        assert read_table(out / name)
    coefs = read_table(out / "coefficients.csv")
    assert {r["feature"] for r in coefs if r["model"] == "SI-LS_x"} == {"x1", "x2", "x3"}
    rel = [r for r in read_table(out / "relative.csv") if r["model"] == "SI-LS_x"]
    assert all(r["estimate"] == 0.0 for r in rel)


def test_ensemble_command_writes_predictions(fitted):
    cfg, out = fitted
    assert run("ensemble", cfg, "--out", str(out)) == EXIT_OK
    rows = read_table(out / "predictions" / "SI-LS_x.csv")
    assert len(rows) == 2 * 12
    p = np.array([[r[f"p{k}"] for k in range(7)] for r in rows])
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_pipeline_is_deterministic(fitted, tmp_path):
    cfg, out = fitted
    again = tmp_path / "again"
    assert run("fit", cfg, "--out", str(again)) == EXIT_OK
    assert run("evaluate", cfg, "--out", str(again)) == EXIT_OK
    for name in ("metrics.csv", "relative.csv", "coefficients.csv", "calibration.csv", "summary.json"):
        assert (again / name).read_bytes() == (out / name).read_bytes(), name
    a = (out / "fits" / "SI-LS_x" / "split1" / "member0.dtm").read_bytes()
    assert (again / "fits" / "SI-LS_x" / "split1" / "member0.dtm").read_bytes() == a


def test_five_member_ensemble_files(tmp_path):
    cfg = write_config(tmp_path / "e.yaml", models=["SI-LS_x"], ensemble=5, splits={"n_splits": 1},
                       train={**QUICK_TRAIN, "max_epochs": 3, "patience": 3})
    assert run("fit", cfg, "--out", str(tmp_path / "o")) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "o" / "fits" / "SI-LS_x" / "split0").glob("member*.dtm"))
    assert files == [f"member{i}.dtm" for i in range(5)]


def test_binary_model_uses_two_classes(tmp_path):
    cfg = write_config(tmp_path / "b.yaml", models=["CI_B-Binary"], splits={"n_splits": 1},
                       synthetic={"n": 40, "volume_shape": [8, 8, 4], "w_img": 1.0},
                       cnn={"filters": [2, 2, 2, 2], "dense_units": 4},
                       image_train={"max_epochs": 1, "patience": 1, "batch_size": 16})
    assert run("fit", cfg, "--out", str(tmp_path / "o")) == EXIT_OK
    from dtm.ensemble import TransformationEnsemble
    ens = TransformationEnsemble.load(tmp_path / "o" / "fits" / "CI_B-Binary" / "split0")
    assert ens.spec.K == 2


def test_simulate_then_load_from_files(tmp_path):
    cfg = write_config(tmp_path / "s.yaml", synthetic={"n": 60, "seed": 1})
    assert run("simulate", cfg, "--out", str(tmp_path / "sim")) == EXIT_OK
    data = tmp_path / "sim" / "data"
    doc = {"data": {"manifest": str(data / "manifest.csv"), "tabular": str(data / "tabular.csv"),
                    "schema": str(data / "schema.json")}, "model": "SI", "splits": {"n_splits": 1},
           "train": QUICK_TRAIN}
    (tmp_path / "f.yaml").write_text(yaml.safe_dump(doc))
    assert run("fit", tmp_path / "f.yaml", "--out", str(tmp_path / "fit")) == EXIT_OK


def test_config_errors_exit_2(tmp_path, capsys):
    bad = write_config(tmp_path / "u.yaml", colour="blue")
    assert run("fit", bad) == EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err
    nested = write_config(tmp_path / "n.yaml", train={"lr": 0.1, "momentum": 0.9})
    assert run("fit", nested) == EXIT_CONFIG
    assert run("fit", write_config(tmp_path / "m.yaml", models=["SI-LS_q"])) == EXIT_CONFIG
    missing = write_config(tmp_path / "p.yaml", data={"manifest": "nope.csv", "tabular": "nope.csv",
                                                      "schema": "nope.json"})
    assert run("fit", missing) == EXIT_CONFIG
    assert run("fit", tmp_path / "absent.yaml") == EXIT_CONFIG
    assert run("evaluate", write_config(tmp_path / "v.yaml"), "--out", str(tmp_path / "empty")) == EXIT_CONFIG
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"ensemble": 0})


def test_divergence_exits_3(tmp_path, capsys):
    cfg = write_config(tmp_path / "d.yaml", models=["SI-LS_x"], splits={"n_splits": 1},
                       train={"lr": 1e300, "batch_size": 8, "max_epochs": 20, "patience": 20})
    assert run("fit", cfg, "--out", str(tmp_path / "o")) == EXIT_NUMERIC
    assert "diverged" in capsys.readouterr().err


def test_subsample_identical_pair_has_zero_nllr(tmp_path):
    cfg = write_config(tmp_path / "ss.yaml", subsample={"models": ["SI-LS_x", "SI-LS_x"],
                                                        "sizes": [40, 80], "n_splits": 3})
    assert run("subsample", cfg, "--out", str(tmp_path / "o")) == EXIT_OK
    rows = read_table(tmp_path / "o" / "subsample.csv")
    assert len(rows) == 6 and all(r["nllr"] == 0.0 for r in rows)
    means = read_table(tmp_path / "o" / "subsample_means.csv")
    assert [r["size"] for r in means] == [40.0, 80.0]
    small = write_config(tmp_path / "s2.yaml", subsample={"sizes": [5]}, models=["SI-LS_x"])
    assert run("subsample", small, "--out", str(tmp_path / "o2")) == EXIT_CONFIG


def test_effect_curve_command(tmp_path):
    cfg = write_config(tmp_path / "ec.yaml", synthetic={"n": 80, "age_effect": "hinge"},
                       effect_curve={"n_boot": 2, "grid": [-1.0, 0.0, 1.0]})
    assert run("effect-curve", cfg, "--out", str(tmp_path / "o")) == EXIT_OK
    rows = read_table(tmp_path / "o" / "effect_age.csv")
    curves = {r["curve"] for r in rows}
    assert "linear" in curves and len(curves) == 3
    for c in curves:
        vals = [r["value"] for r in rows if r["curve"] == c]
        assert len(vals) == 3 and abs(sum(vals)) < 1e-9


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "dtm", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for sub in ("simulate", "fit", "ensemble", "evaluate", "subsample", "effect-curve"):
        assert sub in res.stdout
