"""Classical-regressor contracts: exact OLS recovery, residual
orthogonality, kNN tie handling, forest purity and bounds, seeding,
out-of-bag behavior, and model-file round trips."""

import numpy as np
import pytest

from foresight.baselines import (
    BASELINES,
    ForestRegressor,
    KNNRegressor,
    LinearRegressor,
    load_baseline,
    save_baseline,
)
from foresight.errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    UsageError,
)


def linear_data(n=200, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, (n, 2))
    y = 2.0 * x[:, 0] - 3.0 * x[:, 1] + 1.0
    if noise:
        y = y + rng.normal(0, noise, n)
    return x, y


# -- linear ------------------------------------------------------------------


def test_mlr_recovers_exact_plane():
    x, y = linear_data()
    m = LinearRegressor().fit(x, y)
    np.testing.assert_allclose(m.coef_, [2.0, -3.0], atol=1e-8)
    np.testing.assert_allclose(m.intercept_, 1.0, atol=1e-8)
    np.testing.assert_allclose(m.predict(x), y, atol=1e-8)


def test_mlr_residuals_orthogonal_to_columns():
    x, y = linear_data(noise=0.5, seed=3)
    m = LinearRegressor().fit(x, y)
    resid = y - m.predict(x)
    assert abs(resid.mean()) < 1e-8
    for c in range(2):
        assert abs(resid @ x[:, c]) / len(y) < 1e-8


def test_mlr_zero_features_predicts_mean():
    y = np.array([1.0, 2.0, 6.0])
    m = LinearRegressor().fit(np.empty((3, 0)), y)
    np.testing.assert_allclose(m.predict(np.empty((2, 0))), [3.0, 3.0])


def test_mlr_rank_deficient_falls_back_to_ridge():
    rng = np.random.default_rng(1)
    a = rng.normal(0, 1, 50)
    x = np.column_stack([a, 2.0 * a])  # collinear
    y = 3.0 * a + 1.0
    with pytest.warns(UserWarning, match="ridge"):
        m = LinearRegressor().fit(x, y)
    np.testing.assert_allclose(m.predict(x), y, atol=1e-4)


def test_mlr_input_validation():
    with pytest.raises(DataError):
        LinearRegressor().fit(np.array([[np.nan]]), np.array([1.0]))
    with pytest.raises(DimensionError):
        LinearRegressor().fit(np.zeros((3, 2)), np.zeros(4))
    m = LinearRegressor().fit(*linear_data(20))
    with pytest.raises(DimensionError):
        m.predict(np.zeros((2, 5)))


# -- knn ---------------------------------------------------------------------


def test_knn_exact_match_k1():
    x, y = linear_data(30, seed=2)
    m = KNNRegressor(k=1).fit(x, y)
    np.testing.assert_array_equal(m.predict(x[:7]), y[:7])


def test_knn_midpoint_two_points():
    x = np.array([[0.0], [2.0]])
    y = np.array([10.0, 20.0])
    m = KNNRegressor(k=2).fit(x, y)
    np.testing.assert_allclose(m.predict([[1.0]]), [15.0])


def test_knn_k_equals_n_is_global_mean():
    x, y = linear_data(12, seed=4)
    m = KNNRegressor(k=12).fit(x, y)
    np.testing.assert_allclose(m.predict([[0.0, 0.0], [5.0, 5.0]]),
                               y.mean(), rtol=1e-12)


def test_knn_distance_ties_break_by_row_index():
    x = np.array([[1.0], [-1.0], [1.0]])  # rows 0 and 2 identical
    y = np.array([5.0, 99.0, 7.0])
    m = KNNRegressor(k=1).fit(x, y)
    assert m.predict([[1.0]])[0] == 5.0
    m2 = KNNRegressor(k=2).fit(x, y)
    assert m2.predict([[1.0]])[0] == 6.0  # rows 0 and 2, never row 1


def test_knn_k_validation():
    x, y = linear_data(5)
    with pytest.raises(UsageError):
        KNNRegressor(k=6).fit(x, y)
    with pytest.raises(ConfigurationError):
        KNNRegressor(k=0).fit(x, y)


def test_knn_chunking_invariant():
    x, y = linear_data(100, seed=5, noise=1.0)
    q = np.random.default_rng(6).normal(0, 1, (37, 2))
    a = KNNRegressor(k=5, chunk=8).fit(x, y).predict(q)
    b = KNNRegressor(k=5, chunk=1024).fit(x, y).predict(q)
    np.testing.assert_array_equal(a, b)


# -- forest ------------------------------------------------------------------


def test_rf_constant_target():
    x = np.random.default_rng(0).normal(0, 1, (40, 3))
    y = np.full(40, 4.5)
    m = ForestRegressor(trees=5, seed=1).fit(x, y)
    np.testing.assert_array_equal(m.predict(x), np.full(40, 4.5))
    assert all(len(t.feature) == 1 for t in m.trees_)


def test_rf_single_tree_full_purity():
    rng = np.random.default_rng(7)
    x = rng.normal(0, 1, (24, 2))
    y = rng.normal(0, 1, 24)
    m = ForestRegressor(trees=1, min_leaf=1, bootstrap=False,
                        max_features=2, seed=0).fit(x, y)
    np.testing.assert_allclose(m.predict(x), y, atol=1e-12)


def test_rf_predictions_bounded_by_targets():
    rng = np.random.default_rng(8)
    x = rng.normal(0, 1, (120, 4))
    y = rng.uniform(3.0, 9.0, 120)
    m = ForestRegressor(trees=20, seed=2).fit(x, y)
    q = rng.normal(0, 3, (300, 4))
    p = m.predict(q)
    assert p.min() >= y.min() - 1e-12
    assert p.max() <= y.max() + 1e-12


def test_rf_seed_determinism():
    x, y = linear_data(80, seed=9, noise=0.3)
    q = np.random.default_rng(10).normal(0, 1, (25, 2))
    a = ForestRegressor(trees=8, seed=3).fit(x, y).predict(q)
    b = ForestRegressor(trees=8, seed=3).fit(x, y).predict(q)
    c = ForestRegressor(trees=8, seed=4).fit(x, y).predict(q)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_rf_worker_count_does_not_change_model():
    x, y = linear_data(60, seed=11, noise=0.3)
    q = np.random.default_rng(12).normal(0, 1, (20, 2))
    a = ForestRegressor(trees=6, seed=5, workers=1).fit(x, y).predict(q)
    b = ForestRegressor(trees=6, seed=5, workers=4).fit(x, y).predict(q)
    np.testing.assert_array_equal(a, b)


def test_rf_learns_structure():
    rng = np.random.default_rng(13)
    x = rng.uniform(-1, 1, (400, 3))
    y = np.where(x[:, 0] > 0, 10.0, 2.0) + rng.normal(0, 0.1, 400)
    m = ForestRegressor(trees=30, seed=6).fit(x, y)
    q = np.array([[0.5, 0.0, 0.0], [-0.5, 0.0, 0.0]])
    p = m.predict(q)
    assert p[0] > 8.0 and p[1] < 4.0


def test_rf_oob_finite_and_stable_with_more_trees():
    rng = np.random.default_rng(14)
    x = rng.uniform(-1, 1, (300, 3))
    y = x[:, 0] * 5.0 + rng.normal(0, 0.2, 300)
    small, big = [], []
    for seed in (0, 1, 2):
        small.append(ForestRegressor(trees=10, seed=seed).fit(x, y).oob_rmse_)
        big.append(ForestRegressor(trees=100, seed=seed).fit(x, y).oob_rmse_)
    assert all(np.isfinite(v) and v >= 0 for v in small + big)
    assert np.mean(big) <= np.mean(small) + 0.05


def test_rf_min_rows_guard():
    x = np.zeros((8, 2))
    y = np.zeros(8)
    with pytest.raises(UsageError):
        ForestRegressor(min_leaf=5).fit(x, y)


def test_rf_no_bootstrap_has_no_oob():
    x, y = linear_data(30, seed=15)
    m = ForestRegressor(trees=3, bootstrap=False, seed=0).fit(x, y)
    assert m.oob_rmse_ is None


# -- protocol and files ------------------------------------------------------


def test_estimators_follow_sklearn_protocol():
    for name, cls in BASELINES.items():
        est = cls()
        params = est.get_params()
        assert isinstance(params, dict)
        est.set_params(**params)
    assert KNNRegressor(k=9).get_params()["k"] == 9


def test_sklearn_score_works():
    x, y = linear_data(50, seed=16)
    assert LinearRegressor().fit(x, y).score(x, y) > 0.999999


@pytest.mark.parametrize("kind", ["mlr", "knn", "rf"])
def test_model_file_round_trip(tmp_path, kind):
    x, y = linear_data(60, seed=17, noise=0.2)
    q = np.random.default_rng(18).normal(0, 1, (15, 2))
    if kind == "mlr":
        model = LinearRegressor().fit(x, y)
    elif kind == "knn":
        model = KNNRegressor(k=3).fit(x, y)
    else:
        model = ForestRegressor(trees=5, seed=7).fit(x, y)
    path = tmp_path / f"{kind}.model"
    save_baseline(path, model)
    back = load_baseline(path)
    np.testing.assert_array_equal(back.predict(q), model.predict(q))
    if kind == "rf":
        assert back.oob_rmse_ == model.oob_rmse_


def test_model_file_rejects_foreign(tmp_path):
    from foresight.container import save_container
    path = tmp_path / "notamodel.bin"
    save_container(path, {"kind": "checkpoint"}, {"z": np.zeros(2)})
    with pytest.raises(DataError):
        load_baseline(path)
