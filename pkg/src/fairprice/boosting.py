"""Least-squares gradient boosting of depth-limited regression trees.

Used for the indirect ratebook: a tree ensemble regressed on individually
optimized coefficients, clipped at prediction to the same interior band of
the coefficient bounds that the other methods emit from.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fairprice.models import interior_bounds

@dataclass
class RegressionTree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return self.value[node]
            rows = np.flatnonzero(internal)
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def depth(self) -> int:
        def walk(i):
            return 0 if self.feature[i] < 0 else 1 + max(walk(self.left[i]), walk(self.right[i]))
        return walk(0)

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(np.asarray(d["feature"], dtype=np.int64), np.asarray(d["threshold"], dtype=np.float64),
                   np.asarray(d["left"], dtype=np.int64), np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=np.float64))


def _best_split(X: np.ndarray, r: np.ndarray, min_leaf: int):
    """Greedy variance-reduction split; returns (gain, feature, threshold) or None."""
    n = len(r)
    total = r.sum()
    best = None
    base = total * total / n
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs, rs = X[order, j], r[order]
        csum = np.cumsum(rs)[:-1]
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        # SSE reduction = sum_L^2/n_L + sum_R^2/n_R - sum^2/n
        gain = csum ** 2 / n_left + (total - csum) ** 2 / (n - n_left) - base
        gain = np.where(valid, gain, -np.inf)
        k = int(np.argmax(gain))
        if best is None or gain[k] > best[0]:
            best = (float(gain[k]), j, 0.5 * (xs[k] + xs[k + 1]))
    return best


def fit_tree(X: np.ndarray, r: np.ndarray, max_depth: int, min_leaf: int = 1,
             min_gain: float = 1e-14) -> RegressionTree:
    feature, threshold, left, right, value = [], [], [], [], []

    def grow(idx, depth):
        node = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(r[idx].mean()))
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            return node
        split = _best_split(X[idx], r[idx], min_leaf)
        if split is None or split[0] <= min_gain:
            return node
        _, j, thr = split
        mask = X[idx, j] <= thr
        feature[node], threshold[node] = j, thr
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(len(r)), 0)
    return RegressionTree(np.array(feature, dtype=np.int64), np.array(threshold),
                          np.array(left, dtype=np.int64), np.array(right, dtype=np.int64), np.array(value))


@dataclass
class BoostedTreeModel:
    init: float
    shrinkage: float
    max_depth: int
    bounds: tuple[float, float]
    trees: list[RegressionTree] = field(default_factory=list)
    train_mse: list[float] = field(default_factory=list)

    def raw_predict(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        out = np.full(len(X), self.init)
        for tree in self.trees[:n_trees]:
            out += self.shrinkage * tree.predict(X)
        return out

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.clip(self.raw_predict(X), *interior_bounds(self.bounds))

    def to_dict(self) -> dict:
        return {"kind": "boosted_trees", "init": self.init, "shrinkage": self.shrinkage,
                "max_depth": self.max_depth, "bounds": list(self.bounds),
                "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, d: dict) -> "BoostedTreeModel":
        return cls(d["init"], d["shrinkage"], d["max_depth"], tuple(d["bounds"]),
                   [RegressionTree.from_dict(t) for t in d["trees"]])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "BoostedTreeModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_indirect_ratebook(X: np.ndarray, targets: np.ndarray, trees: int = 300, depth: int = 5,
                          shrinkage: float = 0.1, bounds=(1.2, 1.6), min_leaf: int = 1) -> BoostedTreeModel:
    """Boost regression trees on individually optimized coefficients."""
    targets = np.asarray(targets, dtype=np.float64)
    a, b = bounds
    if np.any(targets < a - 1e-12) or np.any(targets > b + 1e-12):
        raise ValueError("ratebook targets must lie within the coefficient bounds")
    model = BoostedTreeModel(float(targets.mean()), shrinkage, depth, (float(a), float(b)))
    pred = np.full(len(targets), model.init)
    for _ in range(trees):
        resid = targets - pred
        if np.max(np.abs(resid)) < 1e-12:
            break
        tree = fit_tree(X, resid, depth, min_leaf)
        model.trees.append(tree)
        pred = pred + shrinkage * tree.predict(X)
        model.train_mse.append(float(np.mean((targets - pred) ** 2)))
    return model


def predict_indirect(model: BoostedTreeModel, X: np.ndarray) -> np.ndarray:
    return model.predict(X)
