from __future__ import annotations

import json

import numpy as np
import pytest

from countdfm.errors import DataFormatError, DomainError, ParameterError
from countdfm.estimation import fit
from countdfm.harness import io
from countdfm.harness.cli import main
from countdfm.harness.experiment import ExperimentConfig, run_experiment
from countdfm.harness.metrics import (
    ForecastRecord,
    compute_metrics,
    forecast_scores,
    last_baseline,
    marginal_baseline,
    relative_bias,
    relative_loss,
    rmfe_counts,
    rmfe_latent,
    sensitivity,
)
from countdfm.model import preset_marginals, preset_params, simulate

# ---------------------------------------------------------------------------- io


def test_fmt():
    assert io.fmt(3) == "3"
    assert io.fmt(np.int64(-2)) == "-2"
    assert io.fmt(0.1234567891) == "0.123457"
    assert io.fmt(12345678.0) == "1.23457e+07"


def test_load_csv_roundtrip(tmp_path):
    X = np.array([[0, 1], [2, 3]])
    io.write_counts(tmp_path / "x.csv", X)
    Y, names = io.load_csv(tmp_path / "x.csv")
    assert np.array_equal(X, Y) and names == ["x1", "x2"]
    assert Y.dtype == np.int64


@pytest.mark.parametrize(
    "text,needle",
    [
        ("", "empty"),
        ("a,b\n", "no data"),
        ("1,2\n3,4\n", "header"),
        ("a,b\n1,2\n3\n", "row 3"),
        ("a,b\n1,2\n3,x\n", "row 3"),
    ],
)
def test_load_csv_errors(tmp_path, text, needle):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(DataFormatError, match=needle):
        io.load_csv(p)


def test_model_json_roundtrip(tmp_path):
    P = preset_params("1", 6, 2, seed=0)
    m = preset_marginals("poisson", 6)
    X = simulate(P, m, 150, seed=1).X
    fm = fit(X, "poisson", 2, 1)
    io.save_model(tmp_path / "m.json", fm)
    back = io.load_model(tmp_path / "m.json")
    assert np.array_equal(back.params.Lambda, fm.params.Lambda)
    assert back.marginals == fm.marginals
    assert np.allclose(back.R_Z0_forecast, fm.R_Z0_forecast)
    assert all(np.array_equal(a, b) for a, b in zip(back.observed_support, fm.observed_support))
    data = json.loads((tmp_path / "m.json").read_text())
    assert data["schema_version"] == 1


def test_load_json_errors(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    with pytest.raises(DataFormatError):
        io.load_json(p)


# ---------------------------------------------------------------------------- metrics


def test_relative_loss_and_bias():
    a = np.array([[1.0, 0.0], [0.0, 1.0]])
    est = [a + 0.1, a - 0.1]
    assert relative_loss(est, a) == pytest.approx(np.linalg.norm(np.full((2, 2), 0.1)) / np.sqrt(2))
    assert relative_bias(est, a) == pytest.approx(0.0)
    assert relative_bias([a + 0.1], a) == pytest.approx(0.4 / 2)
    with pytest.raises(DomainError):
        relative_loss(est, np.zeros((2, 2)))


def test_rmfe_and_sensitivity():
    hist = np.array([[1.0, 1.0], [1.0, 1.0]])
    particles = np.zeros((1, 3, 2))
    truth = np.array([[1.0, 1.0]])
    assert rmfe_latent(particles, truth, hist)[0] == pytest.approx(1.0)
    assert rmfe_counts(np.array([[0, 0]]), np.array([[1, 1]]), hist)[0] == pytest.approx(1.0)
    assert np.array_equal(sensitivity(np.array([[1, 2], [0, 0]]), np.array([[1, 3], [0, 0]])), [0.5, 1.0])


def test_baselines():
    hist = np.array([[0, 2], [1, 2], [1, 3], [0, 3]])
    assert np.array_equal(last_baseline(hist, 2), [[0, 3], [0, 3]])
    # ties go to the smaller value
    assert np.array_equal(marginal_baseline(hist, 1), [[0, 2]])


def test_forecast_scores_use_window_for_marginal():
    rec = ForecastRecord(
        point=np.array([[1]]), holdout=np.array([[1]]), history=np.array([[0], [0], [0], [1]]), window=np.array([[1], [1]])
    )
    s = forecast_scores(rec)
    assert s["sens"][0] == 1.0 and s["sens_last"][0] == 1.0 and s["sens_marginal"][0] == 1.0
    rep = compute_metrics(forecasts=[rec, rec])
    assert rep.sens[0] == 1.0 and rep.rmfe_y is None


def test_compute_metrics_needs_truth():
    with pytest.raises(DomainError):
        compute_metrics({"Lambda": [np.eye(2)]}, {})


# ---------------------------------------------------------------------------- experiment


def test_config_roundtrip(tmp_path):
    cfg = ExperimentConfig(d=6, replications=2, rank_methods=["bcv_pc"])
    io.save_json(tmp_path / "c.json", cfg.to_dict())
    from countdfm.harness import load_config

    back = load_config(tmp_path / "c.json")
    assert back == cfg and back.rank_methods == ["BCV_PC"]
    with pytest.raises(ParameterError):
        ExperimentConfig.from_dict({"bogus": 1})
    with pytest.raises(ParameterError):
        ExperimentConfig(lag_methods=["XYZ"])


def test_zero_replications_write_headers(tmp_path):
    cfg = ExperimentConfig(d=6, replications=0, forecast=True, rank_methods=["ED"])
    rep = run_experiment(cfg, tmp_path)
    assert (tmp_path / "estimation.csv").read_text() == "parameter,loss,bias,replications\n"
    assert (tmp_path / "forecast.csv").read_text().startswith("h,RMFE_Y,RMFE_Z,RMFE_X,Sens,Sens_Last,Sens_Marginal")
    assert (tmp_path / "rank_selection.csv").read_text() == "method,1,2,3,4,5,6,7,8,replications\n"
    assert rep.n_ok == 0


def test_experiment_small_and_deterministic(tmp_path):
    cfg = ExperimentConfig(
        family="poisson", d=6, T=80, replications=2, seed=5, forecast=True, N=50, n_qmc=32, lag_methods=["AIC"], threads=1
    )
    a = run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    assert a.n_failed == 0
    for name in a.files.values():
        assert (tmp_path / "a" / name.name).read_bytes() == (tmp_path / "b" / name.name).read_bytes()
    rows = (tmp_path / "a" / "estimation.csv").read_text().splitlines()
    assert [r.split(",")[0] for r in rows[1:]] == ["theta", "Lambda", "Sigma_eps", "Psi", "Sigma_eta"]


def test_failed_replication_is_recorded(tmp_path, caplog):
    # r = d - 1 with a tiny sample: the factor step cannot succeed on every draw
    cfg = ExperimentConfig(family="bernoulli", d=3, r=2, T=4, replications=2, seed=0, threads=1)
    rep = run_experiment(cfg, tmp_path)
    text = (tmp_path / "replications.csv").read_text()
    assert text.startswith("replication,status,message\n")
    assert rep.n_failed >= 1 and "failed" in text


# ---------------------------------------------------------------------------- cli


def test_cli_pipeline(tmp_path, capsys):
    x = tmp_path / "x.csv"
    assert main(["simulate", "--family", "negbin", "--d", "6", "--T", "200", "--seed", "3", "--out", str(x)]) == 0
    m = tmp_path / "m.json"
    assert main(["fit", str(x), "--family", "negbin", "--r", "2", "--out", str(m)]) == 0
    s = tmp_path / "s.csv"
    assert main(["select", str(x), "--family", "negbin", "--method", "ic1", "--r-max", "3", "--out", str(s)]) == 0
    assert capsys.readouterr().out.strip() in {"1", "2", "3"}
    f = tmp_path / "f.csv"
    pt = tmp_path / "pt.csv"
    rc = main(["forecast", str(x), "--model", str(m), "--H", "2", "--N", "50", "--n-qmc", "32", "--out", str(f), "--point-out", str(pt)])
    assert rc == 0
    assert f.read_text().startswith("series,h,value,prob\n")
    assert pt.read_text().startswith("h,x1,")


def test_cli_exit_codes(tmp_path):
    assert main(["bogus"]) == 1
    assert main(["fit", "nope.csv", "--family", "poisson", "--r", "1", "--out", str(tmp_path / "m.json")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("a,b\n1,x\n")
    assert main(["fit", str(bad), "--family", "poisson", "--r", "1", "--out", str(tmp_path / "m.json")]) == 2
    flat = tmp_path / "flat.csv"
    flat.write_text("a,b,c\n" + "0,1,0\n1,1,0\n" * 5)
    assert main(["fit", str(flat), "--family", "bernoulli", "--r", "1", "--out", str(tmp_path / "m.json")]) == 2
    assert main(["select", str(flat), "--family", "bernoulli", "--method", "BCV", "--out", str(tmp_path / "s.csv")]) == 1
