"""Imputation metrics, downstream random-forest accuracy, and the
count-of-wins / unified-average-ranking aggregation statistics.

All imputation metrics run exclusively over initially-missing cells with
known ground truth, on the z-scored scale.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

UNDEFINED = None  # marker for metrics with empty support

LOWER_IS_BETTER = {"rmse": True, "mae": True, "cat_accuracy": False,
                   "downstream_accuracy": False}


@dataclass
class MetricReport:
    dataset: str
    mechanism: str
    rate: float
    method: str
    seed: int
    rmse: float = None
    mae: float = None
    cat_accuracy: float = None
    downstream_accuracy: float = None
    train_seconds: float = None
    inference_seconds: float = None
    extra: dict = field(default_factory=dict)


def _numeric_support(truth, imputed, eval_mask, numeric_idx):
    cells = []
    for j in numeric_idx:
        missing = (eval_mask[:, j] == 0) & np.isfinite(truth[:, j])
        cells.append((truth[missing, j], imputed[missing, j]))
    if not cells:
        return np.array([]), np.array([])
    t = np.concatenate([c[0] for c in cells])
    p = np.concatenate([c[1] for c in cells])
    return t, p


def rmse(truth, imputed, eval_mask, numeric_idx):
    t, p = _numeric_support(truth, imputed, eval_mask, numeric_idx)
    if t.size == 0:
        return UNDEFINED
    return float(np.sqrt(((t - p) ** 2).mean()))


def mae(truth, imputed, eval_mask, numeric_idx):
    t, p = _numeric_support(truth, imputed, eval_mask, numeric_idx)
    if t.size == 0:
        return UNDEFINED
    return float(np.abs(t - p).mean())


def cat_accuracy(truth, imputed, eval_mask, categorical_idx):
    hits, total = 0, 0
    for j in categorical_idx:
        missing = (eval_mask[:, j] == 0) & np.isfinite(truth[:, j])
        hits += int((imputed[missing, j] == truth[missing, j]).sum())
        total += int(missing.sum())
    if total == 0:
        return UNDEFINED
    return hits / total


# -- random forest ------------------------------------------------------

class _TreeNode:
    __slots__ = ("feature", "threshold", "left", "right", "prediction")

    def __init__(self, prediction=None):
        self.feature = None
        self.threshold = None
        self.left = None
        self.right = None
        self.prediction = prediction


def _gini(counts):
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts / total
    return 1.0 - (p ** 2).sum()


def _best_split(x, y, feature_ids, num_classes, rng):
    n = len(y)
    parent_counts = np.bincount(y, minlength=num_classes)
    best = (None, None, _gini(parent_counts))
    for f in feature_ids:
        order = np.argsort(x[:, f], kind="stable")
        xs, ys = x[order, f], y[order]
        left = np.zeros(num_classes)
        right = parent_counts.astype(np.float64).copy()
        for i in range(n - 1):
            left[ys[i]] += 1
            right[ys[i]] -= 1
            if xs[i + 1] <= xs[i]:
                continue
            score = (i + 1) / n * _gini(left) + (n - i - 1) / n * _gini(right)
            if score < best[2] - 1e-12:
                best = (f, 0.5 * (xs[i] + xs[i + 1]), score)
    return best[0], best[1]


def _grow(x, y, depth, max_depth, n_features, num_classes, rng):
    counts = np.bincount(y, minlength=num_classes)
    node = _TreeNode(prediction=int(counts.argmax()))
    if depth >= max_depth or len(np.unique(y)) < 2 or len(y) < 2:
        return node
    feature_ids = rng.choice(x.shape[1], size=n_features, replace=False)
    feature, threshold = _best_split(x, y, feature_ids, num_classes, rng)
    if feature is None:
        return node
    go_left = x[:, feature] <= threshold
    if not go_left.any() or go_left.all():
        return node
    node.feature, node.threshold = feature, threshold
    node.left = _grow(x[go_left], y[go_left], depth + 1, max_depth, n_features, num_classes, rng)
    node.right = _grow(x[~go_left], y[~go_left], depth + 1, max_depth, n_features, num_classes, rng)
    return node


def _predict_tree(node, x):
    out = np.empty(len(x), dtype=np.int64)
    stack = [(node, np.arange(len(x)))]
    while stack:
        nd, rows = stack.pop()
        if nd.feature is None:
            out[rows] = nd.prediction
            continue
        go_left = x[rows, nd.feature] <= nd.threshold
        stack.append((nd.left, rows[go_left]))
        stack.append((nd.right, rows[~go_left]))
    return out


@dataclass
class RandomForest:
    trees: list
    num_classes: int


def one_hot_features(values, schema):
    """Numeric columns pass through; categoricals expand to indicators."""
    parts = []
    for j, col in enumerate(values.T):
        if schema[j].kind == "numerical":
            parts.append(col[:, None])
        else:
            card = schema[j].cardinality
            onehot = np.zeros((len(col), card))
            idx = np.clip(col.astype(np.int64), 0, card - 1)
            onehot[np.arange(len(col)), idx] = 1.0
            parts.append(onehot)
    return np.concatenate(parts, axis=1) if parts else np.zeros((len(values), 0))


def rf_fit(x, y, n_trees=100, max_depth=12, seed=0) -> RandomForest:
    """Bagged CART forest: gini splits, sqrt(d) features per split."""
    y = np.asarray(y, dtype=np.int64)
    num_classes = int(y.max()) + 1 if len(y) else 1
    if len(np.unique(y)) < 2:
        warnings.warn("single-class training target; forest is a constant predictor")
    n_features = max(1, int(np.sqrt(x.shape[1])))
    seeds = np.random.SeedSequence(seed).spawn(n_trees)
    trees = []
    for s in seeds:
        rng = np.random.default_rng(s)
        rows = rng.integers(0, len(y), size=len(y))
        trees.append(_grow(x[rows], y[rows], 0, max_depth, n_features, num_classes, rng))
    return RandomForest(trees, num_classes)


def rf_predict(forest: RandomForest, x):
    votes = np.zeros((len(x), forest.num_classes), dtype=np.int64)
    for tree in forest.trees:
        pred = _predict_tree(tree, x)
        votes[np.arange(len(x)), pred] += 1
    return votes.argmax(axis=1)


def downstream_accuracy(imputed_train, y_train, imputed_test, y_test, schema,
                        n_trees=100, max_depth=12, seed=0):
    x_train = one_hot_features(imputed_train, schema)
    x_test = one_hot_features(imputed_test, schema)
    forest = rf_fit(x_train, y_train, n_trees, max_depth, seed)
    return float((rf_predict(forest, x_test) == np.asarray(y_test)).mean())


# -- aggregation --------------------------------------------------------

METRIC_NAMES = ("rmse", "mae", "cat_accuracy", "downstream_accuracy")


def _grouped(reports):
    groups = {}
    for r in reports:
        groups.setdefault((r.dataset, r.mechanism, r.rate), []).append(r)
    return groups


def count_of_wins(reports):
    """Per-method tally of best-metric finishes across groups; ties credit
    every tied method."""
    wins = {}
    for group in _grouped(reports).values():
        for metric in METRIC_NAMES:
            scored = [(r.method, getattr(r, metric)) for r in group
                      if getattr(r, metric) is not None]
            if len(scored) < 2:
                continue
            values = [v for _, v in scored]
            best = min(values) if LOWER_IS_BETTER[metric] else max(values)
            for method, v in scored:
                wins.setdefault(method, 0)
                if v == best:
                    wins[method] += 1
    return wins


def _average_ranks(values, lower_better):
    """Competition-free ranks, 1 = best; ties get the average rank."""
    arr = np.asarray(values, dtype=np.float64)
    keyed = arr if lower_better else -arr
    order = np.argsort(keyed, kind="stable")
    ranks = np.empty(len(arr))
    i = 0
    while i < len(arr):
        j = i
        while j + 1 < len(arr) and keyed[order[j + 1]] == keyed[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def unified_average_ranking(reports):
    """Mean and standard deviation of per-(metric, rate) average ranks.

    Ranks are computed per dataset/mechanism/rate group and metric, then
    averaged over datasets; the summary aggregates across metrics and
    noise levels.  Methods absent from a group are excluded from it.
    """
    per_cell = {}  # (metric, mechanism, rate) -> {method: [ranks]}
    for (dataset, mechanism, rate), group in _grouped(reports).items():
        for metric in METRIC_NAMES:
            scored = [(r.method, getattr(r, metric)) for r in group
                      if getattr(r, metric) is not None]
            if len(scored) < 2:
                continue
            ranks = _average_ranks([v for _, v in scored], LOWER_IS_BETTER[metric])
            cell = per_cell.setdefault((metric, mechanism, rate), {})
            for (method, _), rank in zip(scored, ranks):
                cell.setdefault(method, []).append(rank)
    summary = {}  # method -> list of per-cell average ranks
    for cell in per_cell.values():
        for method, ranks in cell.items():
            summary.setdefault(method, []).append(float(np.mean(ranks)))
    return {method: {"mean_rank": float(np.mean(r)), "std_rank": float(np.std(r)),
                     "cells": len(r)}
            for method, r in summary.items()}
