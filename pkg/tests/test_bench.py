import json
import math

import numpy as np
import pytest

from cateshap.bench import (BenchConfig, ConfigError, MetricRecord, aggregate, compact_grid, cost_probe, emit,
                            iteration_seed, run_benchmark, tune_once, write_outputs)

FAST = dict(tuning="fixed", fixed_hp={"eta": 0.3, "max_depth": 2, "n_rounds": 20}, test_n=500,
            cf_params={"num_trees": 20})


def _rec(i, top):
    return MetricRecord(i, "S2", 1000, 1.0, "S", "3", top1=top)


def test_smoke_single_record():
    recs = run_benchmark(BenchConfig(n_values=(500,), iterations=1, learners=("S",), **FAST))
    assert len(recs) == 1
    r = recs[0]
    assert r.status == "ok"
    assert all(math.isfinite(getattr(r, m)) for m in ("top1", "net3", "margin", "cor_tau_tauhat", "max_P",
                                                       "max_NP", "p_win", "cor3", "cor4"))


def test_rerun_is_byte_identical(tmp_path):
    cfg = BenchConfig(n_values=(300,), iterations=2, learners=("T", "R", "CF"), strategies=(2, 3),
                      out_dir=str(tmp_path / "a"), **FAST)
    a = write_outputs(cfg, run_benchmark(cfg), {})["records"].read_bytes()
    b = write_outputs(BenchConfig(**{**cfg.to_dict(), "out_dir": str(tmp_path / "b")}), run_benchmark(cfg), {})
    assert a == b["records"].read_bytes()
    labels = [(r.learner, r.strategy) for r in run_benchmark(cfg) if r.iteration == 0]
    assert labels == [("T", "3"), ("R", "2"), ("R", "3"), ("CF", "3"), ("CF", "vip")]


def test_aggregate_standard_error():
    row = aggregate([_rec(0, 0.0), _rec(1, 1.0)])[0]
    assert row["top1_mean"] == 0.5
    assert row["top1_se"] == pytest.approx(0.3536, abs=1e-4)
    const = aggregate([_rec(i, 1.0) for i in range(5)])[0]
    assert const["top1_se"] == 0.0
    failed = MetricRecord(2, "S2", 1000, 1.0, "S", "3", status="failed", error="boom")
    row = aggregate([_rec(0, 1.0), failed])[0]
    assert (row["n_ok"], row["n_failed"], row["top1_mean"]) == (1, 1, 1.0)


def test_failed_cells_are_reported_not_raised():
    cfg = BenchConfig(n_values=(100,), iterations=1, learners=("CF", "S"), **{**FAST, "cf_params": {"min_per_arm": 40}})
    recs = run_benchmark(cfg)
    cf = [r for r in recs if r.learner == "CF"]
    assert cf and all(r.status == "failed" and "min_per_arm" in r.error for r in cf)
    assert [r.status for r in recs if r.learner == "S"] == ["ok"]


@pytest.mark.parametrize("kw,msg", [
    (dict(strategies=(2,), learners=("T",)), "strategy 2"),
    (dict(learners=("Q",)), "unknown learners"),
    (dict(iterations=0), "iterations"),
    (dict(fixed_hp={"eta": 5}), "eta"),
    (dict(grid="huge"), "unknown grid"),
])
def test_config_errors(kw, msg):
    with pytest.raises(ConfigError, match=msg):
        BenchConfig(**kw)
    with pytest.raises(ConfigError, match="unknown config keys"):
        BenchConfig.from_dict({"iterationz": 3})


def test_emit_formats(tmp_path):
    recs = [_rec(0, 1.0), _rec(1, 0.0)]
    emit(recs, tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert data[1]["top1"] == 0.0 and data[0]["net3"] is None
    emit(aggregate(recs), tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0].startswith("scenario,n,beta,learner,strategy")
    with pytest.raises(ValueError):
        emit(recs, tmp_path / "r.xml")


def test_tune_once_and_seeds():
    assert iteration_seed(20240601, 0) != iteration_seed(20240601, 1)
    grid = [{"eta": 0.3, "max_depth": 1, "n_rounds": 10}, {"eta": 0.3, "max_depth": 2, "n_rounds": 10}]
    cfg = BenchConfig(n_values=(200,), iterations=1, learners=("T",), tuning="once", grid=grid, test_n=200)
    tuned = tune_once(cfg)
    assert set(tuned[("S2", 200, 1.0, "T")]) == {"m0", "m1", "surrogate"}
    assert len(compact_grid()) == 16


def test_worker_count_does_not_change_records(tmp_path):
    cfg = BenchConfig(n_values=(200,), iterations=3, learners=("S", "DR"), **FAST)
    one = run_benchmark(cfg)
    many = run_benchmark(BenchConfig(**{**cfg.to_dict(), "workers": 3}))
    assert one == many


def test_cost_probe_shape():
    rows = cost_probe(p=20, n_c_grid=(2, 50), n=200, n_explain=5, background=10, repeats=1)
    assert [r.method for r in rows] == ["tree_shap", "kernel_shap", "kernel_shap"]
    assert all(r.mode == "sampled" for r in rows[1:])
    assert cost_probe(p=6, n_c_grid=(2,), n=100, n_explain=3, background=5, repeats=1)[1].mode == "exact"
    assert np.all([r.seconds > 0 for r in rows])
