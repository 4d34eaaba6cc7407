"""CART classification tree: greedy Gini splits at midpoints, depth-limited."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DimensionMismatch, EmptyData


@dataclass
class TreeModel:
    # parallel node arrays; leaves have feature == -1
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # (n_nodes, C) class frequencies at each node
    n_features: int
    max_depth: int
    min_leaf: int = 1

    @property
    def n_classes(self) -> int:
        return self.value.shape[1]

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)


def _gini(counts):
    n = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / n[..., None]
    return np.where(n > 0, 1.0 - np.sum(p * p, axis=-1), 0.0)


def _best_split(x, y_onehot, min_leaf):
    """(feature, threshold, weighted child impurity) of the best split or None.

    Ties keep the lowest feature index, then the lowest threshold.
    """
    n = x.shape[0]
    best = None
    total = y_onehot.sum(axis=0)
    for f in range(x.shape[1]):
        order = np.argsort(x[:, f], kind="stable")
        xs = x[order, f]
        left = np.cumsum(y_onehot[order], axis=0)[:-1]  # left counts after position i
        # candidate cut between i and i+1 only where the value changes
        valid = xs[1:] > xs[:-1]
        n_left = np.arange(1, n)
        valid &= (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        right = total - left
        imp = (n_left * _gini(left) + (n - n_left) * _gini(right)) / n
        imp = np.where(valid, imp, np.inf)
        k = int(np.argmin(imp))
        if best is None or imp[k] < best[2]:
            thr = xs[k] + (xs[k + 1] - xs[k]) / 2.0
            best = (f, float(thr), float(imp[k]))
    return best


def tree_fit(x, y, n_classes: int | None = None, max_depth: int = 5, min_leaf: int = 1, seed: int = 0) -> TreeModel:
    """Grow a tree on integer class labels ``y``.

    ``seed`` is accepted for interface uniformity; the search is exhaustive
    and deterministic.
    """
    del seed
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyData("tree_fit needs a non-empty (N, F) matrix")
    if max_depth < 1:
        raise ValueError("max_depth must be >= 1")
    if min_leaf < 1:
        raise ValueError("min_leaf must be >= 1")
    n_classes = int(n_classes or y.max() + 1)
    onehot = np.eye(n_classes)[y]
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(idx, depth):
        node = len(feature)
        counts = onehot[idx].sum(axis=0)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(counts)
        if depth >= max_depth or np.count_nonzero(counts) < 2 or idx.size < 2 * min_leaf:
            return node
        split = _best_split(x[idx], onehot[idx], min_leaf)
        if split is None:
            return node
        f, thr, _ = split
        go_left = x[idx, f] <= thr
        feature[node] = f
        threshold[node] = thr
        left[node] = grow(idx[go_left], depth + 1)
        right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(x.shape[0]), 0)
    return TreeModel(
        np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64), np.array(value), x.shape[1], max_depth, min_leaf,
    )


def tree_leaves(model: TreeModel, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.n_features:
        raise DimensionMismatch(f"input has {x.shape[1]} features, tree expects {model.n_features}")
    node = np.zeros(x.shape[0], dtype=np.int64)
    active = model.feature[node] >= 0
    while active.any():
        i = np.flatnonzero(active)
        n = node[i]
        go_left = x[i, model.feature[n]] <= model.threshold[n]
        node[i] = np.where(go_left, model.left[n], model.right[n])
        active = model.feature[node] >= 0
    return node


def tree_predict_proba(model: TreeModel, x) -> np.ndarray:
    counts = model.value[tree_leaves(model, x)]
    return counts / counts.sum(axis=1, keepdims=True)


def tree_predict(model: TreeModel, x):
    """Class index (lowest on ties) and leaf distribution for each row."""
    proba = tree_predict_proba(model, x)
    return np.argmax(proba, axis=1), proba
