import json

import numpy as np
import pandas as pd
import pytest

from src import cli


@pytest.fixture
def data_csv(tmp_path):
    rng = np.random.default_rng(31)
    x = rng.standard_normal((60, 2))
    y = x @ np.array([0.8, -0.4]) + 0.3 * rng.standard_normal(60)
    frame = pd.DataFrame({"x1": x[:, 0], "x2": x[:, 1], "y1": y})
    frame.loc[3, "x2"] = np.nan
    path = tmp_path / "data.csv"
    frame.to_csv(path, index=False, na_rep="NA")
    return path


def _fit(data_csv, out):
    return cli.main(["fit", "--input", str(data_csv), "--response", "y1", "--k", "1", "--lambda", "0",
                     "--out", str(out), "--threads", "1"])


def test_missing_required_flag_is_a_usage_error(data_csv):
    with pytest.raises(SystemExit) as err:
        cli.main(["fit", "--input", str(data_csv)])
    assert err.value.code == 1


def test_level_outside_the_unit_interval_is_a_usage_error(tmp_path):
    with pytest.raises(SystemExit) as err:
        cli.main(["bootstrap", "--model", "m.json", "--input", "d.csv", "--level", "1.5"])
    assert err.value.code == 1


def test_missing_input_file(tmp_path):
    code = cli.main(["fit", "--input", str(tmp_path / "absent.csv"), "--response", "y1", "--out", str(tmp_path)])
    assert code == 1


def test_fit_then_predict_reproduces_the_fitted_values(data_csv, tmp_path):
    out = tmp_path / "results"
    assert _fit(data_csv, out) == 0
    model = json.loads((out / "model.json").read_text())
    assert model["k"] == 1 and model["lambda"] == 0.0
    assert model["column_names"] == ["x1", "x2", "y1"]
    assert model["aux_model"] is not None
    assert not (out / "cv.csv").exists()
    code = cli.main(["predict", "--model", str(out / "model.json"), "--input", str(data_csv), "--out", str(out)])
    assert code == 0
    fitted = pd.read_csv(out / "fitted.csv")
    predictions = pd.read_csv(out / "predictions.csv")
    assert list(predictions.columns) == ["y1"]
    np.testing.assert_allclose(predictions["y1"], fitted["y1"], rtol=1e-12)


def test_fit_with_grids_writes_the_cv_table(data_csv, tmp_path):
    out = tmp_path / "cv"
    code = cli.main(["fit", "--input", str(data_csv), "--response", "y1", "--k", "1", "--lambda", "0,0.1",
                     "--folds", "3", "--out", str(out), "--threads", "1"])
    assert code == 0
    table = pd.read_csv(out / "cv.csv")
    assert list(table.columns) == ["k", "lambda", "cv", "chosen"]
    assert len(table) == 2 and table["chosen"].sum() == 1


def test_overlapping_columns_are_a_usage_error(data_csv, tmp_path):
    code = cli.main(["fit", "--input", str(data_csv), "--response", "y1", "--predictors", "x1,y1",
                     "--out", str(tmp_path)])
    assert code == 1


def test_constant_predictor_without_penalty_is_a_data_error(tmp_path):
    rng = np.random.default_rng(32)
    path = tmp_path / "constant.csv"
    pd.DataFrame({"x1": np.full(30, 1.0), "x2": rng.standard_normal(30), "y1": rng.standard_normal(30)}).to_csv(
        path, index=False)
    code = cli.main(["fit", "--input", str(path), "--response", "y1", "--k", "1", "--lambda", "0",
                     "--out", str(tmp_path / "out")])
    assert code == 2


def test_bootstrap_is_deterministic(data_csv, tmp_path):
    out = tmp_path / "results"
    assert _fit(data_csv, out) == 0
    runs = []
    for name in ("first", "second"):
        target = tmp_path / name
        code = cli.main(["bootstrap", "--model", str(out / "model.json"), "--input", str(data_csv),
                         "--B", "4", "--H", "2", "--level", "0.95", "--seed", "3", "--out", str(target),
                         "--threads", "2"])
        assert code == 0
        runs.append(target)
    summary = json.loads((runs[0] / "bootstrap_summary.json").read_text())
    assert summary["level"] == 0.95
    if summary["B"] == 4:
        assert summary["ranks"] == [1, 4]
    assert [i["contrast"] for i in summary["intervals"]] == ["x1->y1", "x2->y1"]
    first = pd.read_csv(runs[0] / "bootstrap_replicates.csv")
    second = pd.read_csv(runs[1] / "bootstrap_replicates.csv")
    assert list(first.columns) == ["contrast", "replicate", "value"]
    pd.testing.assert_frame_equal(first, second)


def test_diagnose_writes_the_tables(data_csv, tmp_path):
    out = tmp_path / "results"
    assert _fit(data_csv, out) == 0
    code = cli.main(["diagnose", "--model", str(out / "model.json"), "--input", str(data_csv),
                     "--n-sim", "100", "--out", str(out), "--threads", "1"])
    assert code == 0
    outlier_map = pd.read_csv(out / "outlier_map.csv")
    assert len(outlier_map) == 60
    cellmap_x = pd.read_csv(out / "cellmap_X.csv", keep_default_na=False)
    assert len(cellmap_x) == 120
    assert "missing" in set(cellmap_x["flag"])


def test_influence_writes_a_labelled_surface(tmp_path):
    code = cli.main(["influence", "--n", "60", "--grid-limit", "5", "--grid-points", "2", "--draws", "1",
                     "--out", str(tmp_path), "--threads", "1"])
    assert code == 0
    table = pd.read_csv(tmp_path / "influence.csv")
    assert list(table.columns) == ["method", "kind", "c1", "c2", "if_value", "label"]
    assert len(table) == 16
    assert set(table["label"]) == {"finite-sample surrogate"}


def test_simulate_writes_results_and_a_stable_manifest(tmp_path):
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps({"n": 30, "p": 2, "q": 1, "reps": 1, "n_test": 20, "k": 1, "lam": 0.0}))
    hashes = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["simulate", "--scenario", str(scenario), "--out", str(out), "--threads", "1"]) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["study"] == "mse"
        assert (out / "simulate_mse.csv").exists()
        hashes.append((manifest["input_hash"], manifest["results_hash"]))
    assert hashes[0] == hashes[1]


def test_invalid_scenario_is_a_data_error(tmp_path):
    scenario = tmp_path / "scenario.json"
    scenario.write_text(json.dumps({"kind": "cellwise", "gamma": 0.0}))
    assert cli.main(["simulate", "--scenario", str(scenario), "--out", str(tmp_path)]) == 2
