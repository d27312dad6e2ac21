"""Random-forest regression built on exhaustive-search CART trees.

Defaults are pinned explicitly (100 trees, unlimited depth,
min_samples_split=2, all features per split, bootstrap on) so behavior is
toolkit-independent. Split search is vectorized over all features at once:
per node, one stable argsort of the sample block plus prefix sums yields
the SSE of every candidate midpoint threshold. Ties break on the lowest
feature index, then the lowest threshold, which makes trees invariant to
training-row order when bootstrap is off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateData


@dataclass
class ForestHyperparams:
    n_trees: int = 100
    max_depth: int | None = None
    min_samples_split: int = 2
    bootstrap: bool = True


@dataclass
class Tree:
    feature: np.ndarray    # split feature per node, -1 for leaves
    threshold: np.ndarray
    left: np.ndarray       # child node ids, -1 for leaves
    right: np.ndarray
    value: np.ndarray      # leaf mean (mean of node samples everywhere)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            idx = np.flatnonzero(active)
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active = self.feature[node] >= 0
        return self.value[node]


@dataclass
class ForestModel:
    trees: list[Tree]
    tree_seeds: list[int]
    hp: ForestHyperparams = field(default_factory=ForestHyperparams)

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        out = np.zeros(X.shape[0])
        for t in self.trees:
            out += t.predict(X)
        return out / len(self.trees)


def _best_split(X: np.ndarray, y: np.ndarray):
    """Minimum-SSE split over every feature and midpoint threshold.

    Returns (feature, threshold) or None when no feature admits a valid
    split (all values tied)."""
    n, F = X.shape
    order = np.argsort(X, axis=0, kind="stable")
    Xs = np.take_along_axis(X, order, axis=0)
    ys = y[order]                                  # (n, F)
    cs = np.cumsum(ys, axis=0)
    css = np.cumsum(ys * ys, axis=0)
    total, total_sq = cs[-1], css[-1]

    k = np.arange(1, n)[:, None].astype(np.float64)  # left sizes
    sse_left = css[:-1] - cs[:-1] ** 2 / k
    sse_right = (total_sq - css[:-1]) - (total - cs[:-1]) ** 2 / (n - k)
    score = sse_left + sse_right
    valid = Xs[1:] > Xs[:-1]
    score[~valid] = np.inf

    per_feat_pos = np.argmin(score, axis=0)        # first min: lowest threshold
    per_feat_score = score[per_feat_pos, np.arange(F)]
    if not np.isfinite(per_feat_score).any():
        return None
    f = int(np.argmin(per_feat_score))             # first min: lowest feature
    pos = int(per_feat_pos[f])
    thr = 0.5 * (Xs[pos, f] + Xs[pos + 1, f])
    return f, float(thr)


def fit_tree(X: np.ndarray, y: np.ndarray,
             hp: ForestHyperparams | None = None) -> Tree:
    hp = hp or ForestHyperparams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    features, thresholds, lefts, rights, values = [], [], [], [], []
    stack = [(np.arange(len(y)), 0, None, None)]  # (rows, depth, parent, side)
    while stack:
        rows, depth, parent, side = stack.pop()
        node_id = len(features)
        if parent is not None:
            (lefts if side == "L" else rights)[parent] = node_id
        yn = y[rows]
        features.append(-1)
        thresholds.append(0.0)
        lefts.append(-1)
        rights.append(-1)
        values.append(yn.mean())
        if len(rows) < hp.min_samples_split or np.ptp(yn) == 0.0:
            continue
        if hp.max_depth is not None and depth >= hp.max_depth:
            continue
        split = _best_split(X[rows], yn)
        if split is None:
            continue  # identical rows with differing y: leaf keeps the mean
        f, thr = split
        features[node_id] = f
        thresholds[node_id] = thr
        go_left = X[rows, f] <= thr
        stack.append((rows[~go_left], depth + 1, node_id, "R"))
        stack.append((rows[go_left], depth + 1, node_id, "L"))
    return Tree(
        feature=np.array(features, dtype=np.int64),
        threshold=np.array(thresholds),
        left=np.array(lefts, dtype=np.int64),
        right=np.array(rights, dtype=np.int64),
        value=np.array(values),
    )


def fit_forest(X: np.ndarray, y: np.ndarray,
               hp: ForestHyperparams | None = None,
               seed: int = 0) -> ForestModel:
    """Per-tree bootstrap (N draws with replacement) with seeds derived from
    the master seed, then unpruned CART growth."""
    hp = hp or ForestHyperparams()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if n < 2:
        raise DegenerateData("need at least 2 training rows")
    if not np.isfinite(X).all():
        raise DegenerateData("non-finite feature values")
    seeds = [int(s.generate_state(1)[0]) & 0x7FFFFFFF
             for s in np.random.SeedSequence(seed).spawn(hp.n_trees)]
    trees = []
    for ts in seeds:
        if hp.bootstrap:
            rng = np.random.default_rng(ts)
            rows = rng.integers(0, n, size=n)
        else:
            rows = np.arange(n)
        trees.append(fit_tree(X[rows], y[rows], hp))
    return ForestModel(trees=trees, tree_seeds=seeds, hp=hp)
