import json
import time

import numpy as np
import pandas as pd
import pytest

from omniest import cli
from omniest.data import design_view, read_csv, to_frame
from omniest.dropout import DropoutSpec, build_weights, fit_dropout_model
from omniest.estimators import fit_omni
from omniest.inference import omni_inference
from omniest.simulation import COVARIATES, generate_replicate, table1_config


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def synthetic(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    ds, _ = generate_replicate(table1_config(n_hospitals=24), 0)
    frame = to_frame(ds)
    h = frame.hospital_id.str[1:].astype(int)
    frame["bed_size"] = np.select([h % 3 == 0, h % 3 == 1], ["small", "medium"], "large")
    path = root / "panel.csv"
    frame.to_csv(path, index=False, float_format="%.17g")
    return ds, frame, path


def run(argv):
    return cli.main([str(a) for a in argv])


def test_simulate_smoke(tmp_path, capsys):
    cfg = write_json(tmp_path / "s.json", table1_config().to_dict())
    start = time.monotonic()
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "o", "--replicates", 2]) == 0
    assert time.monotonic() - start < 5
    out = tmp_path / "o"
    assert {p.name for p in out.iterdir()} == {"report.csv", "report.txt", "failures.csv", "manifest.json"}
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "simulate" and manifest["seed"] == table1_config().seed
    assert len(manifest["inputs"][str(cfg)]) == 64
    assert "OMNI" in capsys.readouterr().out


def test_simulate_deterministic(tmp_path, monkeypatch):
    cfg = write_json(tmp_path / "s.json", table1_config(n_hospitals=15, n_replicates=4).to_dict())
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "a", "--seed", 9]) == 0
    monkeypatch.setenv("OMNIEST_THREADS", "2")
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "b", "--seed", 9]) == 0
    assert (tmp_path / "a/report.csv").read_bytes() == (tmp_path / "b/report.csv").read_bytes()


def test_threads_env_override(monkeypatch):
    monkeypatch.setenv("OMNIEST_THREADS", "3")
    assert cli.resolve_threads(1) == 3
    monkeypatch.setenv("OMNIEST_THREADS", "x")
    with pytest.raises(cli.ConfigInvalid):
        cli.resolve_threads(1)
    monkeypatch.delenv("OMNIEST_THREADS")
    assert cli.resolve_threads(None) == 1


def test_simulate_config_errors(tmp_path, caplog):
    doc = table1_config().to_dict()
    del doc["gamma"]
    cfg = write_json(tmp_path / "s.json", doc)
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "o"]) == 2
    assert "gamma" in caplog.text
    bad = tmp_path / "bad.json"
    bad.write_text('{"n_hospitals": 3,\n  oops}')
    assert run(["simulate", "--config", bad, "--out", tmp_path / "o"]) == 2
    assert "line 2" in caplog.text
    assert run(["simulate", "--config", tmp_path / "missing.json", "--out", tmp_path / "o"]) == 2


def test_estimate_round_trip_matches_in_process(tmp_path, synthetic):
    ds, frame, _ = synthetic
    path = tmp_path / "plain.csv"
    frame.drop(columns=["bed_size"]).to_csv(path, index=False, float_format="%.17g")
    cfg = write_json(tmp_path / "a.json", {"covariates": list(COVARIATES),
                                           "dropout": {"covariates": ["x1"]}, "kmeans": "off"})
    assert run(["estimate", "--data", path, "--config", cfg, "--out", tmp_path / "o"]) == 0

    back = read_csv(path)
    drop = fit_dropout_model(back, DropoutSpec(covariates=("x1",)))
    fit = fit_omni(design_view(back, COVARIATES), build_weights(back, drop))
    ref = omni_inference(fit, drop, kmeans="off").table

    # the CSV path and the in-memory path agree exactly
    direct = fit_omni(design_view(ds, COVARIATES), build_weights(ds, fit_dropout_model(ds, DropoutSpec(("x1",)))))
    np.testing.assert_array_equal(direct.beta, fit.beta)

    got = pd.read_csv(tmp_path / "o/coefficients_OMNI.csv", float_precision="round_trip")
    np.testing.assert_array_equal(got.estimate.to_numpy(), ref.estimate.to_numpy())
    np.testing.assert_array_equal(got.ase.to_numpy(), ref.ase.to_numpy())
    inf = pd.read_csv(tmp_path / "o/inference.csv")
    assert list(inf.columns) == ["coefficient", "estimate", "ase", "lower", "upper", "p_value",
                                 "k_chosen", "silhouette"]
    theta = pd.read_csv(tmp_path / "o/theta.csv")
    assert len(theta) == ds.n_hospitals
    assert (tmp_path / "o/dropout.csv").exists() and (tmp_path / "o/manifest.json").exists()


def test_estimate_three_strata(tmp_path, synthetic):
    _, _, path = synthetic
    cfg = write_json(tmp_path / "a.json", {"covariates": list(COVARIATES), "strata": "bed_size",
                                           "estimators": ["OMNI", "GEE", "WGEE", "CWGEE"],
                                           "dropout": {"covariates": ["x1"]}})
    assert run(["estimate", "--data", path, "--config", cfg, "--out", tmp_path / "o"]) == 0
    out = tmp_path / "o"
    for label in ("small", "medium", "large"):
        for est in ("OMNI", "GEE", "WGEE", "CWGEE"):
            table = pd.read_csv(out / f"coefficients_{est}_{label}.csv")
            assert list(table.columns) == list(cli.COEF_COLUMNS)
    assert len(list(out.glob("manifest*.json"))) == 1


def test_estimate_parallel_strata_identical(tmp_path, synthetic):
    _, _, path = synthetic
    cfg = write_json(tmp_path / "a.json", {"covariates": list(COVARIATES), "strata": "bed_size",
                                           "dropout": {"covariates": ["x1"]}})
    assert run(["estimate", "--data", path, "--config", cfg, "--out", tmp_path / "s"]) == 0
    assert run(["estimate", "--data", path, "--config", cfg, "--out", tmp_path / "p",
                "--parallel", "--threads", 2]) == 0
    for f in (tmp_path / "s").glob("*.csv"):
        assert f.read_bytes() == (tmp_path / "p" / f.name).read_bytes()


def test_strata_must_be_hospital_constant(tmp_path, synthetic, caplog):
    _, frame, _ = synthetic
    bad = frame.copy()
    bad.loc[0, "bed_size"] = "huge"
    path = tmp_path / "bad.csv"
    bad.to_csv(path, index=False)
    cfg = write_json(tmp_path / "a.json", {"covariates": list(COVARIATES), "strata": "bed_size"})
    assert run(["estimate", "--data", path, "--config", cfg, "--out", tmp_path / "o"]) == 3
    assert "StrataNotHospitalConstant" in caplog.text


def test_estimate_data_and_numerical_errors(tmp_path, synthetic, caplog):
    _, frame, _ = synthetic
    broken = frame.drop(columns=["bed_size"]).copy()
    broken.loc[1, "observed"] = 0
    broken.loc[1, "y"] = np.nan
    broken.loc[2, "observed"] = 1
    broken.loc[2, "y"] = 1.0
    path = tmp_path / "broken.csv"
    broken.to_csv(path, index=False)
    cfg = write_json(tmp_path / "a.json", {"covariates": list(COVARIATES)})
    assert run(["estimate", "--data", path, "--config", cfg, "--out", tmp_path / "o"]) == 3

    site = frame.drop(columns=["bed_size"]).copy()
    site["site"] = site.hospital_id.str[1:].astype(float)
    path = tmp_path / "site.csv"
    site.to_csv(path, index=False)
    cfg = write_json(tmp_path / "b.json", {"covariates": [*COVARIATES, "site"]})
    assert run(["estimate", "--data", path, "--config", cfg, "--out", tmp_path / "o2"]) == 4
    assert "site" in caplog.text

    cfg = write_json(tmp_path / "c.json", {"covariates": list(COVARIATES), "weight_scheme": "W9"})
    assert run(["estimate", "--data", path, "--config", cfg, "--out", tmp_path / "o3"]) == 2


def test_estimate_without_dropout_events(tmp_path, synthetic):
    _, frame, _ = synthetic
    full = frame[frame.observed == 1].drop(columns=["bed_size"])
    full = full[full.month == 1].copy()
    path = tmp_path / "k1.csv"
    full.to_csv(path, index=False, float_format="%.17g")
    cfg = write_json(tmp_path / "a.json", {"covariates": ["x1", "x2", "x4"], "kmeans": "off"})
    assert run(["estimate", "--data", path, "--config", cfg, "--out", tmp_path / "o"]) == 0
    d = pd.read_csv(tmp_path / "o/dropout.csv")
    assert (d["pi"] == 1).all()


def coef_file(path, estimator, rows):
    pd.DataFrame([{"estimator": estimator, "coefficient": c, "estimate": e, "ase": 0.1,
                   "lower": e - 0.2, "upper": e + 0.2, "p_value": p} for c, e, p in rows]).to_csv(path, index=False)
    return path


def test_report_merges_and_stars(tmp_path):
    a = coef_file(tmp_path / "a.csv", "OMNI", [("x1", 0.5, 0.04), ("x2", 0.1, 0.3)])
    b = coef_file(tmp_path / "b.csv", "GEE", [("intercept", 1.0, 0.5), ("x1", 0.6, 0.001), ("x2", 0.2, 0.06)])
    out = tmp_path / "m.csv"
    assert run(["report", "--out", out, a, b]) == 0
    merged = pd.read_csv(out, keep_default_na=False)
    assert list(merged.columns) == ["coefficient", "OMNI", "GEE"]
    row = merged.set_index("coefficient")
    assert row.loc["x1", "OMNI"].startswith("0.5000*")
    assert "*" not in row.loc["x2", "OMNI"] and "*" not in row.loc["x2", "GEE"]
    assert row.loc["intercept", "OMNI"] == ""


def test_report_incompatible(tmp_path, caplog):
    a = coef_file(tmp_path / "a.csv", "OMNI", [("x1", 0.5, 0.04)])
    b = coef_file(tmp_path / "b.csv", "GEE", [("z9", 0.6, 0.001)])
    assert run(["report", "--out", tmp_path / "m.csv", a, b]) == 3
    assert "IncompatibleReports" in caplog.text


def test_report_merges_monte_carlo_tables(tmp_path):
    cfg = write_json(tmp_path / "s.json", table1_config(n_hospitals=15, n_replicates=2).to_dict())
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "o"]) == 0
    assert run(["report", "--out", tmp_path / "m.csv", tmp_path / "o/report.csv"]) == 0
    merged = pd.read_csv(tmp_path / "m.csv")
    assert "OMNI cp" in merged.columns and "CWGEE bias_x100" in merged.columns
    coef = coef_file(tmp_path / "c.csv", "OMNI", [("x1", 0.5, 0.04)])
    assert run(["report", "--out", tmp_path / "m2.csv", tmp_path / "o/report.csv", coef]) == 3
