"""Pixelwise classical regressors: ordinary least squares, k-nearest
neighbors, and a random forest built on variance-reduction CART trees.

All three follow the scikit-learn estimator protocol (fit returns self,
fitted attributes carry a trailing underscore, get_params works), so
they compose with standard tooling; the forest is implemented here
rather than wrapped because its split rules, seeding, and file format
are part of this toolkit's reproducibility contract.
"""

import math
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin

from . import container
from .errors import ConfigurationError, DataError, DimensionError, UsageError

RIDGE_LAMBDA = 1e-8


def _check_table(x, y=None):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"feature matrix must be 2-D, got {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("feature matrix contains non-finite values")
    if y is None:
        return x
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 1 or y.size != x.shape[0]:
        raise DimensionError(
            f"target shape {y.shape} does not match {x.shape[0]} rows"
        )
    if not np.isfinite(y).all():
        raise DataError("target vector contains non-finite values")
    if y.size == 0:
        raise DataError("empty training table")
    return x, y


class LinearRegressor(BaseEstimator, RegressorMixin):
    """Ordinary least squares with intercept; silently ill-posed designs
    fall back to a tiny ridge penalty instead of failing."""

    def fit(self, X, y):
        x, y = _check_table(X, y)
        n, d = x.shape
        design = np.column_stack([np.ones(n), x])
        coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
        if rank < d + 1:
            warnings.warn(
                f"design matrix rank {rank} < {d + 1}; solving with"
                f" ridge penalty {RIDGE_LAMBDA:g}",
                stacklevel=2,
            )
            gram = design.T @ design + RIDGE_LAMBDA * np.eye(d + 1)
            coef = np.linalg.solve(gram, design.T @ y)
        self.intercept_ = float(coef[0])
        self.coef_ = coef[1:]
        self.n_features_in_ = d
        return self

    def predict(self, X):
        x = _check_table(X)
        if x.shape[1] != self.n_features_in_:
            raise DimensionError(
                f"{x.shape[1]} features, model fitted with"
                f" {self.n_features_in_}"
            )
        return self.intercept_ + x @ self.coef_


class KNNRegressor(BaseEstimator, RegressorMixin):
    """Mean target of the k Euclidean-nearest training rows; exact
    distance ties resolve toward the lower training-row index."""

    def __init__(self, k=5, chunk=1024):
        self.k = k
        self.chunk = chunk

    def fit(self, X, y):
        x, y = _check_table(X, y)
        if self.k < 1:
            raise ConfigurationError(f"k must be positive, got {self.k}")
        if self.k > x.shape[0]:
            raise UsageError(
                f"k={self.k} exceeds the {x.shape[0]} training rows"
            )
        self.x_ = x.copy()
        self.y_ = y.copy()
        self.n_features_in_ = x.shape[1]
        return self

    def predict(self, X):
        x = _check_table(X)
        if x.shape[1] != self.n_features_in_:
            raise DimensionError(
                f"{x.shape[1]} features, model fitted with"
                f" {self.n_features_in_}"
            )
        sq_train = (self.x_ * self.x_).sum(axis=1)
        out = np.empty(x.shape[0])
        for start in range(0, x.shape[0], self.chunk):
            q = x[start:start + self.chunk]
            d2 = (q * q).sum(axis=1)[:, None] - 2.0 * (q @ self.x_.T)
            d2 += sq_train[None, :]
            near = np.argsort(d2, axis=1, kind="stable")[:, :self.k]
            out[start:start + self.chunk] = self.y_[near].mean(axis=1)
        return out


# -- random forest -----------------------------------------------------------


class _Tree:
    """CART regression tree in flat arrays; feature -1 marks a leaf."""

    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self):
        self.feature = []
        self.threshold = []
        self.left = []
        self.right = []
        self.value = []

    def add_node(self):
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def freeze(self):
        self.feature = np.asarray(self.feature, dtype=np.int64)
        self.threshold = np.asarray(self.threshold)
        self.left = np.asarray(self.left, dtype=np.int64)
        self.right = np.asarray(self.right, dtype=np.int64)
        self.value = np.asarray(self.value)
        return self

    def predict(self, x):
        node = np.zeros(x.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            cur = node[idx]
            go_left = x[idx, self.feature[cur]] <= self.threshold[cur]
            node[idx] = np.where(go_left, self.left[cur], self.right[cur])
            active = self.feature[node] >= 0
        return self.value[node]


def _best_split(x, y, features, min_leaf):
    """Exhaustive variance-reduction search over the given features.

    Returns (feature, threshold, left_row_mask) or None when no split
    leaves both children with min_leaf rows.
    """
    n = y.size
    best = None
    best_score = -np.inf
    for f in features:
        col = x[:, f]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        ys = y[order]
        csum = np.cumsum(ys)
        total = csum[-1]
        sizes = np.arange(1, n)
        # split after position i: left = first i+1 rows
        left_sum = csum[:-1]
        score = left_sum**2 / sizes + (total - left_sum)**2 / (n - sizes)
        valid = (xs[:-1] < xs[1:]) & (sizes >= min_leaf) & (n - sizes >= min_leaf)
        if not valid.any():
            continue
        score = np.where(valid, score, -np.inf)
        i = int(np.argmax(score))
        if score[i] > best_score:
            best_score = score[i]
            best = (f, 0.5 * (xs[i] + xs[i + 1]))
    if best is None:
        return None
    f, thr = best
    return f, thr, x[:, f] <= thr


def _grow_tree(x, y, rows, max_features, min_leaf, rng):
    tree = _Tree()
    stack = [(rows, tree.add_node())]
    d = x.shape[1]
    while stack:
        idx, node = stack.pop()
        ys = y[idx]
        tree.value[node] = float(ys.mean())
        if idx.size < 2 * min_leaf or np.ptp(ys) == 0.0:
            continue
        feats = rng.choice(d, size=max_features, replace=False)
        found = _best_split(x[idx], ys, feats, min_leaf)
        if found is None:
            continue
        f, thr, go_left = found
        tree.feature[node] = int(f)
        tree.threshold[node] = float(thr)
        left = tree.add_node()
        right = tree.add_node()
        tree.left[node] = left
        tree.right[node] = right
        stack.append((idx[go_left], left))
        stack.append((idx[~go_left], right))
    return tree.freeze()


class ForestRegressor(BaseEstimator, RegressorMixin):
    """Bootstrap ensemble of CART trees with per-node feature subsets.

    max_features defaults to ceil(d/3); per-tree RNG streams derive from
    the master seed, so results are independent of worker count. With
    bootstrap enabled, out-of-bag predictions give oob_rmse_ for free.
    """

    def __init__(self, trees=100, max_features=None, min_leaf=5,
                 bootstrap=True, seed=0, workers=1):
        self.trees = trees
        self.max_features = max_features
        self.min_leaf = min_leaf
        self.bootstrap = bootstrap
        self.seed = seed
        self.workers = workers

    def fit(self, X, y):
        x, y = _check_table(X, y)
        n, d = x.shape
        if self.trees < 1 or self.min_leaf < 1:
            raise ConfigurationError(
                f"trees/min_leaf must be positive, got"
                f" {self.trees}/{self.min_leaf}"
            )
        if n < 2 * self.min_leaf:
            raise UsageError(
                f"{n} rows cannot populate two leaves of {self.min_leaf}"
            )
        mf = self.max_features
        if mf is None:
            mf = math.ceil(d / 3)
        if not 1 <= mf <= d:
            raise ConfigurationError(
                f"max_features {mf} outside 1..{d}"
            )
        seeds = np.random.SeedSequence(self.seed).spawn(self.trees)

        def build(t):
            rng = np.random.default_rng(seeds[t])
            if self.bootstrap:
                rows = rng.integers(0, n, size=n)
            else:
                rows = np.arange(n)
            tree = _grow_tree(x, y, rows, mf, self.min_leaf, rng)
            return tree, rows

        if self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                built = list(pool.map(build, range(self.trees)))
        else:
            built = [build(t) for t in range(self.trees)]

        self.trees_ = [tree for tree, _ in built]
        self.n_features_in_ = d
        self.y_range_ = (float(y.min()), float(y.max()))

        if self.bootstrap:
            oob_sum = np.zeros(n)
            oob_cnt = np.zeros(n)
            for tree, rows in built:
                out = np.ones(n, dtype=bool)
                out[rows] = False
                if out.any():
                    oob_sum[out] += tree.predict(x[out])
                    oob_cnt[out] += 1.0
            covered = oob_cnt > 0
            if covered.any():
                resid = oob_sum[covered] / oob_cnt[covered] - y[covered]
                self.oob_rmse_ = float(np.sqrt((resid * resid).mean()))
            else:
                self.oob_rmse_ = float("nan")
        else:
            self.oob_rmse_ = None
        return self

    def predict(self, X):
        x = _check_table(X)
        if x.shape[1] != self.n_features_in_:
            raise DimensionError(
                f"{x.shape[1]} features, model fitted with"
                f" {self.n_features_in_}"
            )
        acc = np.zeros(x.shape[0])
        for tree in self.trees_:
            acc += tree.predict(x)
        return acc / len(self.trees_)


BASELINES = {
    "mlr": LinearRegressor,
    "knn": KNNRegressor,
    "rf": ForestRegressor,
}


# -- model files -------------------------------------------------------------


def save_baseline(path, model):
    """Serialize a fitted baseline with the checkpoint container format."""
    if isinstance(model, LinearRegressor):
        kind = "mlr"
        arrays = {
            "coef": model.coef_,
            "intercept": np.asarray([model.intercept_]),
        }
        extra = {}
    elif isinstance(model, KNNRegressor):
        kind = "knn"
        arrays = {"x": model.x_, "y": model.y_}
        extra = {"k": model.k}
    elif isinstance(model, ForestRegressor):
        kind = "rf"
        arrays = {}
        for t, tree in enumerate(model.trees_):
            arrays[f"tree{t}/feature"] = tree.feature
            arrays[f"tree{t}/threshold"] = tree.threshold
            arrays[f"tree{t}/left"] = tree.left
            arrays[f"tree{t}/right"] = tree.right
            arrays[f"tree{t}/value"] = tree.value
        extra = {
            "trees": len(model.trees_),
            "oob_rmse": model.oob_rmse_,
            "y_range": list(model.y_range_),
            "params": model.get_params(),
        }
    else:
        raise UsageError(f"not a saveable baseline: {type(model).__name__}")
    meta = {
        "kind": "baseline",
        "version": 1,
        "model": kind,
        "n_features": int(model.n_features_in_),
    }
    meta.update(extra)
    container.save_container(path, meta, arrays)


def load_baseline(path):
    meta, arrays = container.load_container(path)
    if meta.get("kind") != "baseline":
        raise DataError(f"{path} is not a baseline model file")
    kind = meta["model"]
    if kind == "mlr":
        model = LinearRegressor()
        model.coef_ = arrays["coef"]
        model.intercept_ = float(arrays["intercept"][0])
    elif kind == "knn":
        model = KNNRegressor(k=int(meta["k"]))
        model.x_ = arrays["x"]
        model.y_ = arrays["y"]
    elif kind == "rf":
        model = ForestRegressor(**meta["params"])
        model.trees_ = []
        for t in range(int(meta["trees"])):
            tree = _Tree()
            tree.feature = arrays[f"tree{t}/feature"]
            tree.threshold = arrays[f"tree{t}/threshold"]
            tree.left = arrays[f"tree{t}/left"]
            tree.right = arrays[f"tree{t}/right"]
            tree.value = arrays[f"tree{t}/value"]
            model.trees_.append(tree)
        model.oob_rmse_ = meta["oob_rmse"]
        model.y_range_ = tuple(meta["y_range"])
    else:
        raise DataError(f"{path}: unknown baseline model {kind!r}")
    model.n_features_in_ = int(meta["n_features"])
    return model
