"""Random forest with Gini importances, used for feature selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .transforms import FeatureMask

LEAF = -1


@dataclass(frozen=True)
class DecisionTree:
    """Flat node arrays. ``feature[i] == LEAF`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    impurity_decrease: np.ndarray
    histogram: np.ndarray  # [nodes, n_classes] training counts reaching each node

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.histogram.shape[1])

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of ``X``."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] != LEAF
        while active.any():
            idx = np.nonzero(active)[0]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] != LEAF
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.histogram[self.apply(X)], axis=1)

    def feature_totals(self, d: int) -> np.ndarray:
        inner = self.feature != LEAF
        return np.bincount(self.feature[inner], weights=self.impurity_decrease[inner], minlength=d)


@dataclass(frozen=True)
class RandomForest:
    trees: tuple[DecisionTree, ...]
    importances: np.ndarray
    rng_seed: int

    @property
    def n_classes(self) -> int:
        return self.trees[0].n_classes


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 12
    features_per_split: int | None = None  # None means ceil(sqrt(d))
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ConfigError("features_per_split must be >= 1")


def _best_split(X: np.ndarray, Y1: np.ndarray, features: np.ndarray):
    """Best Gini split over ``features``; returns (feature, threshold, score) or None.

    ``score`` is sum(cL^2)/nL + sum(cR^2)/nR, which is larger for purer children.
    """
    n = X.shape[0]
    cols = X[:, features]
    order = np.argsort(cols, axis=0, kind="stable")
    vals = np.take_along_axis(cols, order, axis=0)
    # cumulative class counts for the left side: [n-1, k, C]
    left = np.cumsum(Y1[order], axis=0)[:-1]
    total = left[-1] + Y1[order[-1]]
    right = total[None] - left
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    score = (left**2).sum(axis=2) / n_left + (right**2).sum(axis=2) / (n - n_left)
    valid = vals[1:] > vals[:-1]
    if not valid.any():
        return None
    score = np.where(valid, score, -np.inf)
    flat = int(np.argmax(score))
    pos, j = divmod(flat, len(features))
    lo, hi = vals[pos, j], vals[pos + 1, j]
    thr = lo + (hi - lo) / 2.0
    if not thr < hi:
        thr = lo
    return int(features[j]), float(thr), float(score[pos, j])


def fit_tree(X: np.ndarray, y: np.ndarray, n_classes: int, max_depth: int, features_per_split: int, rng) -> DecisionTree:
    """Grow one tree on (X, y). Impurity decreases are weighted by node size / len(y)."""
    m, d = X.shape
    Y1 = np.eye(n_classes)[y]
    feature, threshold, left, right, decrease, hist = [], [], [], [], [], []

    def new_node(counts):
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        decrease.append(0.0)
        hist.append(counts)
        return len(feature) - 1

    root = new_node(Y1.sum(axis=0))
    stack = [(root, np.arange(m), 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = hist[node]
        n = idx.shape[0]
        if depth >= max_depth or n < 2 or np.count_nonzero(counts) < 2:
            continue
        perm = rng.permutation(d)
        found = None
        # draw features_per_split at a time until something is splittable
        for start in range(0, d, features_per_split):
            found = _best_split(X[idx], Y1[idx], perm[start : start + features_per_split])
            if found is not None:
                break
        if found is None:
            continue
        f, thr, score = found
        parent_gini_n = n - float((counts**2).sum()) / n
        child_gini_n = n - score
        gain = max(parent_gini_n - child_gini_n, 0.0) / m
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node], decrease[node] = f, thr, gain
        left[node] = new_node(Y1[li].sum(axis=0))
        right[node] = new_node(Y1[ri].sum(axis=0))
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))

    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        impurity_decrease=np.asarray(decrease, dtype=np.float64),
        histogram=np.asarray(hist, dtype=np.float64),
    )


def fit_forest(
    X: np.ndarray,
    y: np.ndarray,
    n_trees: int = 100,
    max_depth: int = 12,
    features_per_split: int | None = None,
    seed: int = 0,
) -> RandomForest:
    """Bootstrap-aggregated Gini trees.

    Importances are the per-feature impurity decrease summed within each tree,
    averaged over trees, then normalized to sum to one.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ConfigError(f"expected X [m, d] and y [m], got {X.shape} and {y.shape}")
    params = ForestParams(n_trees, max_depth, features_per_split, seed)
    m, d = X.shape
    if m < 2:
        raise DataError("need at least 2 samples")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite feature values")
    classes = np.unique(y)
    if classes.size < 2:
        raise DataError("need at least 2 distinct labels to fit a forest")
    if np.any(classes < 0) or not np.issubdtype(y.dtype, np.integer):
        raise ConfigError("labels must be non-negative integers")
    n_classes = int(classes.max()) + 1
    k = min(d, features_per_split or math.ceil(math.sqrt(d)))

    trees = []
    totals = np.zeros(d)
    for child in np.random.SeedSequence(seed).spawn(params.n_trees):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, m, size=m)
        tree = fit_tree(X[boot], y[boot], n_classes, params.max_depth, k, rng)
        trees.append(tree)
        totals += tree.feature_totals(d)
    totals /= params.n_trees
    s = totals.sum()
    # every bootstrap can come out single-class on tiny inputs; fall back to uniform
    importances = totals / s if s > 0 else np.full(d, 1.0 / d)
    return RandomForest(tuple(trees), importances, seed)


def predict(forest: RandomForest, X: np.ndarray) -> np.ndarray:
    """Majority vote across trees; ties go to the lowest class index."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    votes = np.zeros((X.shape[0], forest.n_classes), dtype=np.int64)
    rows = np.arange(X.shape[0])
    for tree in forest.trees:
        np.add.at(votes, (rows, tree.predict(X)), 1)
    out = np.argmax(votes, axis=1)
    return out[0] if single else out


def select_from_importances(importances: np.ndarray) -> FeatureMask:
    imp = np.asarray(importances, dtype=np.float64)
    keep = np.nonzero(imp >= imp.mean() - 1e-12)[0]
    return FeatureMask(tuple(int(i) for i in keep))


def rf_select(X: np.ndarray, y: np.ndarray, params: ForestParams | None = None) -> FeatureMask:
    """Keep features whose importance is at least the mean importance."""
    p = params or ForestParams()
    forest = fit_forest(X, y, p.n_trees, p.max_depth, p.features_per_split, p.seed)
    return select_from_importances(forest.importances)
