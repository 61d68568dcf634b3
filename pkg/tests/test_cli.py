import json

import pytest

from cateshap.cli import main

FAST_HP = ["--eta", "0.3", "--max-depth", "2", "--n-rounds", "20"]


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "s2.csv"
    assert main(["simulate", "--scenario", "S2", "--n", "300", "--seed", "4", "--out", str(path)]) == 0
    return path


def test_simulate_writes_oracle(data):
    assert data.read_text().splitlines()[0].startswith("y,a,x1,x2_2,x2_3,x3")
    assert (data.parent / "s2_oracle.csv").read_text().startswith("instance_id,tau")


def test_fit_and_shap(data, tmp_path, capsys):
    model = tmp_path / "m.json"
    assert main(["fit", "--data", str(data), "--learner", "R", "--propensity", "known", "--p-rct", "0.75",
                 "--model-out", str(model), "--tau-out", str(tmp_path / "tau.csv")] + FAST_HP) == 0
    for strategy in ("2", "3"):
        out = tmp_path / f"shap{strategy}.csv"
        assert main(["shap", "--data", str(data), "--model", str(model), "--strategy", strategy,
                     "--out", str(out), "--summary-out", str(tmp_path / "sum.csv")] + FAST_HP) == 0
        assert out.read_text().startswith("instance_id,feature,phi")
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 1 + 2 * 5 and lines[0].startswith("R-learner fitted")


def test_shap_strategy2_on_t_learner_is_config_error(data, tmp_path):
    model = tmp_path / "t.json"
    assert main(["fit", "--data", str(data), "--learner", "T", "--model-out", str(model)] + FAST_HP) == 0
    assert main(["shap", "--data", str(data), "--model", str(model), "--strategy", "2",
                 "--out", str(tmp_path / "x.csv")]) == 1


def test_data_error_exit_code(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,a,x1\n1,2,0\n0,1,1\n")
    assert main(["fit", "--data", str(bad), "--learner", "T", "--model-out", str(tmp_path / "m.json")]) == 2


def test_bench_config_and_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"iterations": 1, "learners": ["S"], "n_values": [200], "tuning": "fixed",
                               "fixed_hp": {"n_rounds": 10}, "test_n": 200}))
    out = tmp_path / "out"
    assert main(["bench", "--config", str(cfg), "--out-dir", str(out)]) == 0
    assert {p.name for p in out.iterdir()} == {"records.csv", "summary.csv", "timings.csv", "metadata.json"}
    assert main(["bench", "--config", str(cfg), "--learners", "T", "--strategies", "2"]) == 1
    assert main(["bench", "--config", str(tmp_path / "missing.json")]) == 1


def test_bench_with_failed_cells_exits_3(tmp_path):
    assert main(["bench", "--iterations", "1", "--learners", "CF", "--n-values", "100", "--test-n", "100",
                 "--cf-params", '{"min_per_arm": 40}', "--out-dir", str(tmp_path)]) == 3


def test_oracle_and_cost_probe(tmp_path, capsys):
    assert main(["oracle", "--scenario", "S2", "--n-mc", "20000", "--out", str(tmp_path / "o.json")]) == 0
    assert json.loads((tmp_path / "o.json").read_text())["prevalence"] > 0
    capsys.readouterr()
    assert main(["cost-probe", "--p", "15", "--grid", "2,40", "--n", "100", "--n-explain", "3",
                 "--background", "5", "--repeats", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "method,n_coalitions,seconds,mode" and len(lines) == 4
