import numpy as np
import pytest

from cateshap.gbt import (Hyperparams, RegressionTree, TreeEnsemble, fit_gbt, gain_vip, predict,
                          tune_cv)
from cateshap.simgen import Scenario, simulate


def _stump(feature=0, thr=0.0, lo=-1.0, hi=1.0):
    return RegressionTree.from_nodes([
        dict(feature=feature, threshold=thr, left=1, right=2, cover=2.0, gain=1.0),
        dict(value=lo, cover=1.0), dict(value=hi, cover=1.0)])


def _ens(trees, base=0.0, eta=1.0, p=2):
    return TreeEnsemble(trees=tuple(trees), base_score=base, learning_rate=eta, loss="squared", feature_count=p)


def test_constant_targets():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(80, 3))
    ens = fit_gbt(X, np.full(80, 2.5), hp=Hyperparams(n_rounds=20, subsample=0.8), rng=rng)
    np.testing.assert_allclose(predict(ens, rng.normal(size=(10, 3))), 2.5)


def test_sin_toy_recovers_curve_and_vip():
    train = simulate(Scenario("SIN_TOY", 400, seed=1))
    test = simulate(Scenario("SIN_TOY", 2000, seed=1, draw=1))
    ens = fit_gbt(train.features, train.outcome, hp=Hyperparams(eta=0.1, max_depth=2, n_rounds=150),
                  rng=np.random.default_rng(0))
    truth = np.sin(np.pi * test.features[:, 0])
    r2 = 1 - np.mean((predict(ens, test.features) - truth) ** 2) / np.var(truth)
    assert r2 > 0.5
    assert np.argmax(gain_vip(ens)) == 0


def test_predict_hand_built_trees():
    leaf = RegressionTree.leaf(3.0)
    np.testing.assert_allclose(predict(_ens([leaf]), np.zeros((4, 2))), 3.0)
    ens = _ens([_stump()], base=0.2, eta=0.5)
    assert predict(ens, [[0.5, 0.0]])[0] == pytest.approx(0.7)
    assert predict(ens, [[-0.5, 0.0]])[0] == pytest.approx(-0.3)
    twice = _ens([_stump(), _stump()], base=0.2, eta=0.5)
    assert predict(twice, [[0.5, 0.0]])[0] == pytest.approx(0.2 + 2 * 0.5)


def test_predict_rejects_wrong_width():
    with pytest.raises(ValueError):
        predict(_ens([_stump()]), np.zeros((2, 5)))


def test_zero_weight_rows_are_ignored():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(120, 3))
    y = X[:, 0] + rng.normal(size=120)
    w = np.ones(120)
    w[::3] = 0.0
    hp = Hyperparams(n_rounds=30)
    a = fit_gbt(X, y, w, hp, rng=np.random.default_rng(1))
    b = fit_gbt(X[w > 0], y[w > 0], None, hp, rng=np.random.default_rng(1))
    np.testing.assert_allclose(predict(a, X), predict(b, X))


def test_logistic_returns_probabilities():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(300, 2))
    y = (X[:, 0] + 0.3 * rng.normal(size=300) > 0).astype(float)
    ens = fit_gbt(X, y, hp=Hyperparams(n_rounds=40), loss="logistic", rng=rng)
    p = predict(ens, X)
    assert np.all((p > 0) & (p < 1))
    assert np.mean((p > 0.5) == (y == 1)) > 0.85


def test_input_validation():
    X = np.zeros((5, 1))
    with pytest.raises(ValueError, match="weights"):
        fit_gbt(X, np.zeros(5), -np.ones(5))
    with pytest.raises(ValueError, match="logistic"):
        fit_gbt(X, np.arange(5.0), loss="logistic")
    with pytest.raises(ValueError, match="weighted_squared"):
        fit_gbt(X, np.zeros(5), loss="weighted_squared")
    with pytest.raises(ValueError):
        Hyperparams(eta=0.0)


def test_gain_vip():
    assert np.all(gain_vip(_ens([RegressionTree.leaf(1.0)], p=4)) == 0)
    np.testing.assert_array_equal(gain_vip(_ens([_stump(3), _stump(3, 1.0)], p=5)), [0, 0, 0, 1, 0])


def test_early_stopping_truncates():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 2))
    y = rng.normal(size=200)
    ens = fit_gbt(X[:150], y[:150], hp=Hyperparams(eta=0.3, max_depth=4, n_rounds=300), rng=rng,
                  eval_set=(X[150:], y[150:]), early_stopping_rounds=10)
    assert len(ens.trees) < 300


def test_ensemble_json_round_trip():
    rng = np.random.default_rng(6)
    X = rng.normal(size=(100, 3))
    ens = fit_gbt(X, X[:, 1] ** 2, hp=Hyperparams(n_rounds=10), rng=rng)
    back = TreeEnsemble.from_json(ens.to_json())
    np.testing.assert_array_equal(predict(back, X), predict(ens, X))


def test_tune_cv_examples():
    rng = np.random.default_rng(7)
    X = rng.uniform(-1, 1, size=(400, 4))
    y = np.sign(X[:, 0]) * np.sign(X[:, 1]) + 0.1 * rng.normal(size=400)
    only = Hyperparams(max_depth=2, n_rounds=10)
    assert tune_cv(X, y, grid=[only], rng=np.random.default_rng(0)) == only
    grid = [Hyperparams(max_depth=1, n_rounds=50, eta=0.3), Hyperparams(max_depth=6, n_rounds=50, eta=0.3)]
    assert tune_cv(X, y, grid=grid, rng=np.random.default_rng(0)).max_depth == 6
    a = tune_cv(X, y, grid=grid, rng=np.random.default_rng(3), select_rounds=True)
    b = tune_cv(X, y, grid=grid, rng=np.random.default_rng(3), select_rounds=True)
    assert a == b and a.n_rounds <= 50
