"""Bagged variance-reduction regression trees, built from scratch on numpy.

Training rows are put into a canonical lexicographic order before any random
draw and per-tree bootstrap generators derive from (seed, tree index) alone,
so a fitted forest is invariant to the order training rows arrive in.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 100
    max_depth: int | None = None
    min_leaf: int = 1
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ParameterError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.min_leaf < 1:
            raise ParameterError(f"min_leaf must be >= 1, got {self.min_leaf}")


@dataclass
class _Tree:
    feature: np.ndarray   # split feature per node, -1 for leaves
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray     # leaf prediction (mean of labels)


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Split minimizing left+right squared error; None when no valid split."""
    n = len(y)
    if n < 2 * min_leaf:
        return None
    order = np.argsort(x, axis=0, kind="stable")
    xs = np.take_along_axis(x, order, axis=0)
    ys = y[order]
    c1 = np.cumsum(ys, axis=0)
    c2 = np.cumsum(ys * ys, axis=0)
    tot1, tot2 = c1[-1], c2[-1]
    c1, c2 = c1[:-1], c2[:-1]
    n_left = np.arange(1, n, dtype=np.float64)[:, None]
    n_right = n - n_left
    score = (c2 - c1 * c1 / n_left) + ((tot2 - c2) - (tot1 - c1) ** 2 / n_right)
    invalid = (xs[1:] == xs[:-1]) | (n_left < min_leaf) | (n_right < min_leaf)
    score = np.where(invalid, np.inf, score)
    flat = int(np.argmin(score))
    pos, feat = divmod(flat, x.shape[1])
    if not np.isfinite(score[pos, feat]):
        return None
    threshold = 0.5 * (xs[pos, feat] + xs[pos + 1, feat])
    return feat, threshold


def _fit_tree(x: np.ndarray, y: np.ndarray, max_depth: int | None, min_leaf: int) -> _Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0.0)
        return len(feature) - 1

    stack = [(np.arange(len(y)), 0, new_node())]
    while stack:
        idx, depth, node = stack.pop()
        y_node = y[idx]
        value[node] = float(y_node.mean())
        if len(idx) < 2 * min_leaf or np.all(y_node == y_node[0]):
            continue
        if max_depth is not None and depth >= max_depth:
            continue
        split = _best_split(x[idx], y_node, min_leaf)
        if split is None:
            continue
        feat, thr = split
        feature[node] = feat
        threshold[node] = float(thr)
        go_left = x[idx, feat] <= thr
        left[node] = new_node()
        right[node] = new_node()
        stack.append((idx[go_left], depth + 1, left[node]))
        stack.append((idx[~go_left], depth + 1, right[node]))

    return _Tree(
        feature=np.array(feature, dtype=np.int64),
        threshold=np.array(threshold, dtype=np.float64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        value=np.array(value, dtype=np.float64),
    )


def _tree_predict(tree: _Tree, x: np.ndarray) -> np.ndarray:
    node = np.zeros(len(x), dtype=np.int64)
    out = np.empty(len(x), dtype=np.float64)
    active = np.arange(len(x))
    while active.size:
        nd = node[active]
        at_leaf = tree.feature[nd] < 0
        done = active[at_leaf]
        out[done] = tree.value[node[done]]
        active = active[~at_leaf]
        if active.size == 0:
            break
        nd = node[active]
        go_left = x[active, tree.feature[nd]] <= tree.threshold[nd]
        node[active] = np.where(go_left, tree.left[nd], tree.right[nd])
    return out


def _canonical_order(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    keys = [y] + [x[:, j] for j in range(x.shape[1] - 1, -1, -1)]
    return np.lexsort(np.vstack(keys))


@dataclass
class RandomForest:
    cfg: ForestConfig
    n_features: int
    trees: list[_Tree] = field(default_factory=list)

    def predict(self, features: np.ndarray) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_features:
            raise ParameterError(
                f"{x.shape[1]} features, forest was trained on {self.n_features}"
            )
        acc = np.zeros(len(x), dtype=np.float64)
        for tree in self.trees:
            acc += _tree_predict(tree, x)
        return acc / len(self.trees)


def train_forest(features: np.ndarray, labels: np.ndarray, cfg: ForestConfig) -> RandomForest:
    """Fit a bagged ensemble; per-tree bootstrap draws derive from (seed, tree)."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ParameterError("features must be 2-d with one label per row")
    if len(y) < 2:
        raise ParameterError(f"need at least 2 training rows, got {len(y)}")
    order = _canonical_order(x, y)
    x, y = x[order], y[order]

    forest = RandomForest(cfg=cfg, n_features=x.shape[1])
    n = len(y)
    for tree_idx in range(cfg.n_trees):
        if cfg.bootstrap:
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, tree_idx)))
            idx = rng.integers(0, n, size=n)
            forest.trees.append(_fit_tree(x[idx], y[idx], cfg.max_depth, cfg.min_leaf))
        else:
            forest.trees.append(_fit_tree(x, y, cfg.max_depth, cfg.min_leaf))
    return forest


def forest_predict(forest: RandomForest, features: np.ndarray) -> np.ndarray:
    """Mean prediction over all trees."""
    return forest.predict(features)
