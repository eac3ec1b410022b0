import json
import math
import os
from pathlib import Path

import pytest

from gestkit import cli
from gestkit._io import dumps_json

GOLDEN = Path(__file__).parent / "golden" / "facet_report.json"
EXPECTED_KEYS = {
    "tool", "config", "seed", "input", "sample_flow", "group_summary", "balance", "weights",
    "gest", "msm", "triangulation", "evalues", "bootstrap", "ground_truth",
}


def run(args, capsys=None):
    code = cli.main([str(a) for a in args])
    err = capsys.readouterr().err if capsys else ""
    return code, err


@pytest.fixture(scope="module")
def preset_report(tmp_path_factory):
    out = tmp_path_factory.mktemp("report")
    assert cli.main(["report", "--preset", "facet", "--out", str(out)]) == 0
    return out, json.loads((out / "report.json").read_text())


def test_report_contents(preset_report):
    out, rep = preset_report
    assert set(rep) == EXPECTED_KEYS
    assert abs(rep["gest"]["psi_hat"] - 0.25) <= 0.02
    assert abs(rep["msm"]["risk_difference"] - 0.25) <= 0.02
    tri = rep["triangulation"]
    assert tri["discrepancy_pp"] < 2.0
    assert tri["discrepancy_pp"] == abs(tri["gest_rd"] - tri["iptw_rd"]) * 100.0
    assert rep["gest"]["grid"]["n_points"] == 101
    assert rep["config"]["grid"] == [0.0, 0.5, 0.005]
    assert rep["bootstrap"] is None
    assert [s["stage"] for s in rep["sample_flow"]][-1] == "Modelling Dataset"
    for name in ("report.json", "gest_curve.csv", "weights_raw_hist.csv", "weights_trunc_hist.csv", "sample_flow.json"):
        assert (out / name).exists()
    assert not (out / "bootstrap_hist.csv").exists()
    assert not [p for p in out.iterdir() if p.name.startswith(".")]


def _assert_same_shape(got, want, path="report"):
    if isinstance(want, dict):
        assert isinstance(got, dict) and set(got) == set(want), path
        for k in want:
            _assert_same_shape(got[k], want[k], f"{path}.{k}")
    elif isinstance(want, list):
        assert isinstance(got, list) and len(got) == len(want), path
        for i, (g, w) in enumerate(zip(got, want)):
            _assert_same_shape(g, w, f"{path}[{i}]")
    elif isinstance(want, float) and not isinstance(want, bool):
        assert isinstance(got, (int, float)), path
        assert got == pytest.approx(want, rel=1e-9, abs=1e-12, nan_ok=True), path
    else:
        assert got == want, path


def test_golden_report(preset_report):
    _, rep = preset_report
    if os.environ.get("GESTKIT_REGEN_GOLDEN"):
        GOLDEN.parent.mkdir(exist_ok=True)
        GOLDEN.write_text(dumps_json(rep), encoding="utf-8")
    rep.pop("tool")
    golden = json.loads(GOLDEN.read_text())
    golden.pop("tool")
    _assert_same_shape(rep, golden)


def test_report_bytes_identical_across_runs(tmp_path):
    args = ["report", "--preset", "facet", "--n", "3000", "--bootstrap", "100", "--jack-groups", "20"]
    assert cli.main(args + ["--out", str(tmp_path / "a")]) == 0
    assert cli.main(args + ["--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    for name in ("report.json", "bootstrap_hist.csv", "gest_curve.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_then_estimate_csv(tmp_path, capsys):
    sim = tmp_path / "sim"
    assert cli.main(["simulate", "--preset", "facet", "--n", "2000", "--out", str(sim)]) == 0
    truth = json.loads((sim / "ground_truth.json").read_text())
    assert truth["config"]["n"] == 2000
    est = tmp_path / "est"
    code = cli.main([
        "estimate", "--input", str(sim / "panel.csv"),
        "--covariates", "cum_subjects_enrolled,current_term_load", "--out", str(est),
    ])
    assert code == 0
    rep = json.loads((est / "estimates.json").read_text())
    assert abs(rep["gest"]["psi_hat"] - 0.25) < 0.08
    assert rep["gest"]["risk_difference_pp"] == pytest.approx(100 * rep["gest"]["psi_hat"])


def test_simulate_cohort_flow(tmp_path):
    assert cli.main(["simulate", "--preset", "facet", "--cohort", "--out", str(tmp_path)]) == 0
    flow = json.loads((tmp_path / "expected_flow.json").read_text())
    assert [s["n"] for s in flow] == [24_133, 22_537, 16_868, 16_868]


def test_diagnose_subcommand(tmp_path):
    assert cli.main(["diagnose", "--preset", "facet", "--n", "3000", "--out", str(tmp_path)]) == 0
    d = json.loads((tmp_path / "diagnostics.json").read_text())
    assert d["balance"]["positivity"]["passed"]
    assert d["balance"]["table"][-1]["value"] == 0


def test_config_file_and_flag_override(tmp_path):
    conf = tmp_path / "run.conf"
    conf.write_text("preset = facet\nn = 2500   # small\ngrid = 0.0,0.4,0.01\nseed = 7\n", encoding="utf-8")
    out = tmp_path / "o"
    assert cli.main(["report", "--config", str(conf), "--seed", "8", "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["config"]["n"] == 2500
    assert rep["config"]["grid"] == [0.0, 0.4, 0.01]
    assert rep["seed"] == 8
    assert rep["gest"]["grid"]["n_points"] == 41


def test_exit_code_config_error(tmp_path, capsys):
    code, err = run(["report", "--out", tmp_path], capsys)
    assert code == 2
    conf = tmp_path / "bad.conf"
    conf.write_text("colour = blue\n", encoding="utf-8")
    code, err = run(["report", "--config", conf, "--out", tmp_path], capsys)
    assert code == 2 and "colour" in err
    code, _ = run(["report", "--preset", "facet", "--grid", "0.5,0.1,0.01", "--out", tmp_path], capsys)
    assert code == 2


def test_exit_code_data_error(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("unit_id,treatment,outcome,x\nu1,2,0,1\nu2,0,1,2\n", encoding="utf-8")
    code, err = run(["estimate", "--input", path, "--covariates", "x", "--out", tmp_path], capsys)
    assert code == 3
    assert "panel.load_panel" in err and "row 0" in err


def test_exit_code_estimation_error(tmp_path, capsys):
    code, err = run(["estimate", "--preset", "facet", "--n", "3000", "--grid", "0.3,0.5,0.005", "--out", tmp_path],
                    capsys)
    assert code == 4
    assert "gest.g_estimate" in err


def test_invalid_risk_is_config_error(tmp_path, capsys):
    code, _ = run(["simulate", "--preset", "facet", "--psi-true", "0.6", "--out", tmp_path], capsys)
    assert code == 2


def test_bootstrap_subcommand_defaults_to_1000(tmp_path, monkeypatch):
    seen = {}

    def fake_bca(panel, estimator, B, **kw):
        seen["B"] = B
        raise cli.bootstrap.EstimatorFailure("stop here")

    monkeypatch.setattr(cli.bootstrap, "bca", fake_bca)
    assert cli.main(["bootstrap", "--preset", "facet", "--n", "2000", "--out", str(tmp_path)]) == 4
    assert seen["B"] == 1000


def test_triangulation_arithmetic():
    t = cli.triangulation(0.253, 0.274)
    assert t["discrepancy_pp"] == pytest.approx(2.1)
    assert t["discrepancy_pct"] == pytest.approx(0.021 / 0.274 * 100)
    assert cli.triangulation(0.1, 0.0)["discrepancy_pct"] is None
    assert not math.isnan(t["discrepancy_pp"])
