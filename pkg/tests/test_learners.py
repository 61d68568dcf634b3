import numpy as np
import pytest

from cateshap.core import Dataset, DataError
from cateshap.gbt import Hyperparams
from cateshap.learners import (CVTuner, CateModel, FixedTuner, RecordingTuner, build_s_matrix, dr_pseudo_outcomes,
                               export_tau_csv, fit_learner, fit_propensity, ipw_pseudo_outcomes, load_model,
                               r_pseudo_outcomes, save_model, shap_strategy1, shap_strategy2, shap_strategy3)
from cateshap.shapley import summary_shap
from cateshap.simgen import Scenario, simulate

HP = Hyperparams(eta=0.3, max_depth=2, n_rounds=30)


def _null_data(n=400, seed=0, effect=None):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 4))
    a = rng.integers(0, 2, n)
    tau = np.zeros(n) if effect is None else effect(X)
    y = X[:, 0] + tau * a + 0.5 * rng.normal(size=n)
    return Dataset(X, ("x1", "x2", "x3", "x4"), a, y, oracle_tau=tau)


def test_pseudo_outcome_examples():
    psi, w = r_pseudo_outcomes([2.0], [1], [1.0], [0.75])
    assert psi[0] == pytest.approx(4.0) and w[0] == pytest.approx(0.0625)
    psi, w = r_pseudo_outcomes([1.0], [0], [0.0], [0.5])
    assert psi[0] == pytest.approx(-2.0) and w[0] == pytest.approx(0.25)
    assert r_pseudo_outcomes([3.0], [1], [3.0], [0.4])[0][0] == 0.0
    assert dr_pseudo_outcomes([2.0], [1], [0.0], [1.0], [0.5])[0] == pytest.approx(3.0)
    np.testing.assert_allclose(dr_pseudo_outcomes([0.3, 1.7], [0, 1], [0.3, 0.1], [2.0, 1.7], [0.2, 0.6]),
                               [1.7, 1.6])
    assert ipw_pseudo_outcomes([2.0], [1], [0.5])[0] == pytest.approx(4.0)
    assert ipw_pseudo_outcomes([0.0], [0], [0.5])[0] == 0.0
    with pytest.raises(ValueError):
        ipw_pseudo_outcomes([1.0], [1], [1.0])


def test_s_matrix():
    W = build_s_matrix([[1.0, 2.0], [1.0, 2.0]], [1, 0])
    np.testing.assert_array_equal(W[0], [1, 2, 1, 0, 0, 1, 2])
    np.testing.assert_array_equal(W[1, 5:], [0, 0])
    assert build_s_matrix(np.zeros((3, 19)), [0, 1, 0]).shape == (3, 58)


def test_propensity_modes():
    ds = _null_data(n=2000)
    known = fit_propensity(ds, "known_constant", p_rct=0.75)
    np.testing.assert_array_equal(known.predict(ds.features), 0.75)
    est = fit_propensity(ds, "estimated", rng=np.random.default_rng(1),
                         hp=Hyperparams(eta=0.05, n_rounds=20, max_depth=1, min_child_weight=25))
    p = est.predict(ds.features)
    assert np.all(np.abs(p - ds.treatment.mean()) < 0.05)
    assert abs(p.mean() - ds.treatment.mean()) < 0.05
    assert np.all((est.training(ds.features) >= 0.025) & (est.training(ds.features) <= 0.975))


def test_s3_estimated_propensity_mean():
    ds = simulate(Scenario("S3", 1000, seed=2))
    est = fit_propensity(ds, "estimated", rng=np.random.default_rng(0), hp=Hyperparams(n_rounds=50, max_depth=2))
    assert est.predict(ds.features).mean() == pytest.approx(0.25, abs=0.02)


def test_single_arm_fold_is_rejected():
    rng = np.random.default_rng(0)
    a = np.zeros(60, dtype=int)
    a[:3] = 1
    ds = Dataset(rng.normal(size=(60, 2)), ("x1", "x2"), a, rng.normal(size=60))
    with pytest.raises(DataError, match="single treatment arm"):
        fit_learner("R", ds, HP, np.random.default_rng(0), K=5)


@pytest.mark.parametrize("kind", ["T", "S", "X", "R", "DR"])
def test_null_effect_is_small(kind):
    ds = _null_data()
    prop = fit_propensity(ds, "known_constant", p_rct=0.5)
    model = fit_learner(kind, ds, HP, np.random.default_rng(3), propensity=prop)
    tau = model.predict_cate(ds.features)
    assert abs(tau.mean()) < 0.25
    assert model.kind == kind


def test_s_learner_arm_relabel_flips_sign():
    ds = _null_data(effect=lambda X: np.where(X[:, 2] > 0, 1.0, -1.0))
    flipped = Dataset(ds.features, ds.feature_names, 1 - ds.treatment, ds.outcome)
    a = fit_learner("S", ds, HP, np.random.default_rng(4)).predict_cate(ds.features)
    b = fit_learner("S", flipped, HP, np.random.default_rng(4)).predict_cate(ds.features)
    assert np.corrcoef(a, -b)[0, 1] > 0.9


def test_x_learner_weighting():
    ds = _null_data(effect=lambda X: X[:, 1])
    model = fit_learner("X", ds, HP, np.random.default_rng(0), propensity=fit_propensity(ds, "known_constant", p_rct=0.5))
    X = ds.features
    t0, t1 = model.stage_models["tau0"].predict(X), model.stage_models["tau1"].predict(X)
    np.testing.assert_allclose(model.predict_cate(X), 0.5 * t0 + 0.5 * t1)
    one = CateModel("X", model.stage_models, propensity=fit_propensity(ds, "known_constant", p_rct=0.5),
                    metadata={})
    same = dict(model.stage_models, tau0=model.stage_models["tau1"])
    np.testing.assert_allclose(CateModel("X", same, propensity=one.propensity).predict_cate(X), t1)


def test_dr_known_vs_estimated_propensity():
    ds = _null_data(n=800, effect=lambda X: 2 * (X[:, 2] > 0))
    known = fit_learner("DR", ds, HP, np.random.default_rng(5), propensity=fit_propensity(ds, "known_constant", p_rct=0.5))
    est = fit_learner("DR", ds, HP, np.random.default_rng(5),
                      propensity=fit_propensity(ds, "estimated", rng=np.random.default_rng(6),
                                                hp=Hyperparams(n_rounds=10, max_depth=1, eta=0.1)))
    assert np.corrcoef(known.predict_cate(ds.features), est.predict_cate(ds.features))[0, 1] > 0.95


def test_t_learner_toy_surrogate_ranks_x3():
    ds = simulate(Scenario("TLEARN_TOY", 600, seed=0))
    model = fit_learner("T", ds, Hyperparams(eta=0.1, max_depth=2, n_rounds=200), np.random.default_rng(0))
    _, sm = shap_strategy3(model, ds.features, Hyperparams(eta=0.1, max_depth=2, n_rounds=200),
                           np.random.default_rng(1), feature_names=ds.feature_names)
    assert np.argmax(summary_shap(sm).importance) == 2
    assert sm.local_accuracy_gap() < 1e-8


def test_strategies_on_constant_surface():
    ds = _null_data()
    ds = Dataset(ds.features, ds.feature_names, ds.treatment, np.ones(ds.n))
    prop = fit_propensity(ds, "known_constant", p_rct=0.5)
    model = fit_learner("R", ds, HP, np.random.default_rng(0), propensity=prop)
    assert np.ptp(model.predict_cate(ds.features)) == 0
    assert np.all(shap_strategy1(model, ds.features[:20], ds.features[:5]).phi == 0)
    assert np.all(shap_strategy2(model, ds.features).phi == 0)
    assert np.all(shap_strategy3(model, ds.features, HP)[1].phi == 0)


def test_strategy2_local_accuracy_and_guard():
    ds = _null_data(effect=lambda X: X[:, 3])
    prop = fit_propensity(ds, "known_constant", p_rct=0.5)
    model = fit_learner("DR", ds, HP, np.random.default_rng(0), propensity=prop)
    sm = shap_strategy2(model, ds.features)
    np.testing.assert_allclose(sm.base_value + sm.phi.sum(axis=1), model.predict_cate(ds.features), atol=1e-8)
    with pytest.raises(ValueError, match="no final"):
        shap_strategy2(fit_learner("T", ds, HP, np.random.default_rng(0)), ds.features)


def test_tuners_record_stages():
    ds = _null_data(n=200)
    rec = RecordingTuner(FixedTuner(HP, {"m1": Hyperparams(n_rounds=5)}))
    model = fit_learner("T", ds, rec, np.random.default_rng(0))
    assert set(rec.chosen) == {"m0", "m1"} and rec.chosen["m1"].n_rounds == 5
    assert len(model.stage_models["m1"].trees) == 5
    cv = CVTuner((Hyperparams(max_depth=1, n_rounds=20), Hyperparams(max_depth=2, n_rounds=20)), K=3)
    hp = cv("m", ds.features, ds.outcome, None, "squared", np.random.default_rng(0))
    assert hp.n_rounds <= 20


@pytest.mark.parametrize("kind", ["T", "X", "DR", "CF"])
def test_model_json_round_trip(tmp_path, kind):
    ds = _null_data(n=200, effect=lambda X: X[:, 1])
    prop = fit_propensity(ds, "known_constant", p_rct=0.5)
    from cateshap.cforest import CFParams
    model = fit_learner(kind, ds, HP, np.random.default_rng(0), propensity=prop, cf_params=CFParams(num_trees=10))
    save_model(model, tmp_path / "m.json")
    back = load_model(tmp_path / "m.json")
    np.testing.assert_array_equal(back.predict_cate(ds.features), model.predict_cate(ds.features))
    export_tau_csv(tmp_path / "tau.csv", model.predict_cate(ds.features), ds.oracle_tau)
    assert (tmp_path / "tau.csv").read_text().startswith("instance_id")
