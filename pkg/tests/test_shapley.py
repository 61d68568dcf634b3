import numpy as np
import pytest

from cateshap.gbt import Hyperparams, RegressionTree, TreeEnsemble, fit_gbt, predict
from cateshap.shapley import (ShapMatrix, brute_force_shap, kernel_shap, marginal_value_function, minmax,
                              summary_shap, tree_shap, tree_value_function)


def random_ensemble(rng, p, n_trees=3, depth=3, n=60):
    X = rng.normal(size=(n, p))
    y = X @ rng.normal(size=p) + np.sin(X[:, 0] * 2) + 0.3 * rng.normal(size=n)
    hp = Hyperparams(eta=0.5, max_depth=depth, n_rounds=n_trees, min_child_weight=1.0)
    return fit_gbt(X, y, hp=hp, rng=rng), X


def test_two_player_game():
    vals = {frozenset(): 0.0, frozenset({0}): 1.0, frozenset({1}): 2.0, frozenset({0, 1}): 4.0}
    np.testing.assert_allclose(brute_force_shap(vals.__getitem__, 2), [1.5, 2.5])


def test_additive_game_and_symmetry():
    c = np.array([0.5, -2.0, 3.0, 0.0])
    np.testing.assert_allclose(brute_force_shap(lambda S: sum(c[j] for j in S), 4), c)
    sym = brute_force_shap(lambda S: float(len(S & {0, 1}) == 2) + 0.3 * (2 in S), 3)
    assert sym[0] == pytest.approx(sym[1])


def test_single_leaf_tree():
    ens = TreeEnsemble((RegressionTree.leaf(2.0),), 0.0, 1.0, "squared", 3)
    sm = tree_shap(ens, np.zeros((4, 3)))
    assert np.all(sm.phi == 0) and sm.base_value == pytest.approx(2.0)


def test_stump_closed_form():
    a, b, nl, nr = -1.0, 3.0, 30.0, 10.0
    tree = RegressionTree.from_nodes([dict(feature=0, threshold=0.0, left=1, right=2, cover=nl + nr),
                                      dict(value=a, cover=nl), dict(value=b, cover=nr)])
    ens = TreeEnsemble((tree,), 0.0, 1.0, "squared", 3)
    sm = tree_shap(ens, [[-1.0, 5.0, 5.0]])
    assert sm.phi[0, 0] == pytest.approx(a - (nl * a + nr * b) / (nl + nr))
    assert np.all(sm.phi[0, 1:] == 0)


def test_tree_shap_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(10):
        p = int(rng.integers(2, 7))
        ens, X = random_ensemble(rng, p)
        sm = tree_shap(ens, X[:5])
        for i in range(5):
            oracle = brute_force_shap(tree_value_function(ens, X[i]), p)
            np.testing.assert_allclose(sm.phi[i], oracle, atol=1e-9)
        np.testing.assert_allclose(sm.base_value + sm.phi.sum(axis=1), predict(ens, X[:5]), atol=1e-8)


def test_kernel_linear_surface():
    rng = np.random.default_rng(2)
    bg = rng.normal(size=(50, 2))
    X = rng.normal(size=(6, 2))
    sm = kernel_shap(lambda Z: 2 * Z[:, 0] + 3 * Z[:, 1], bg, X)
    np.testing.assert_allclose(sm.phi[:, 0], 2 * (X[:, 0] - bg[:, 0].mean()), atol=1e-9)
    np.testing.assert_allclose(sm.phi[:, 1], 3 * (X[:, 1] - bg[:, 1].mean()), atol=1e-9)


def test_kernel_constant_surface():
    sm = kernel_shap(lambda Z: np.full(len(Z), 4.0), np.zeros((10, 4)), np.ones((3, 4)))
    assert np.all(sm.phi == 0) and sm.base_value == 4.0
    with pytest.warns(RuntimeWarning, match="constant"):
        sm = kernel_shap(lambda Z: np.full(len(Z), 4.0), np.zeros((10, 15)), np.ones((3, 15)),
                         mode="sampled", n_coalitions=64)
    assert sm.degenerate and np.all(sm.phi == 0)


def test_kernel_exact_matches_marginal_oracle():
    rng = np.random.default_rng(5)
    ens, X = random_ensemble(rng, 5, n_trees=4, n=40)
    f = lambda Z: predict(ens, Z)
    sm = kernel_shap(f, X, X[:4], mode="exact")
    for i in range(4):
        np.testing.assert_allclose(sm.phi[i], brute_force_shap(marginal_value_function(f, X, X[i]), 5), atol=1e-6)


def test_kernel_sampled_rejects_too_few_coalitions():
    with pytest.raises(ValueError, match="at least"):
        kernel_shap(lambda Z: Z[:, 0], np.zeros((3, 20)), np.ones((1, 20)), mode="sampled", n_coalitions=4)


def test_summary_and_minmax():
    sm = ShapMatrix(np.array([[1.0, -1.0, 0.0], [-3.0, 1.0, 0.0]]), 0.0, np.zeros(2), ("a", "b", "c"))
    s = summary_shap(sm)
    np.testing.assert_allclose(s.importance, [2, 1, 0])
    np.testing.assert_allclose(s.normalized, [1, 0.5, 0])
    assert np.all(minmax([3.0, 3.0]) == 0)


def test_shap_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    sm = ShapMatrix(rng.normal(size=(5, 3)), 0.125, rng.normal(size=5), ("x1", "x2", "x3"))
    sm.to_csv(tmp_path / "s.csv")
    back = ShapMatrix.from_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.phi, sm.phi)
    assert back.base_value == sm.base_value and back.feature_names == sm.feature_names
