"""CART regression trees, random forests and gradient boosted trees.

Split search is exact: every midpoint between consecutive distinct values of
every candidate feature is scored by the reduction in the sum of squared
errors. Ties go to the lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from volfit.errors import EmptyData, ShapeMismatch

# relative gain below which a split is treated as no improvement
MIN_GAIN = 1e-12

LEAF = -1


@dataclass
class Tree:
    """Flat array encoding of a fitted tree.

    Node ``i`` is a leaf when ``feature[i] == -1``; otherwise rows with
    ``x[feature[i]] <= threshold[i]`` go to ``left[i]`` and the rest to ``right[i]``.
    ``value[i]`` is the mean training target of the rows reaching node ``i``.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    n_features: int

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == LEAF))

    def depth(self) -> int:
        d = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] != LEAF:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeMismatch(f"expected {self.n_features} features")
        node = np.zeros(X.shape[0], dtype=np.intp)
        rows = np.arange(X.shape[0])
        active = self.feature[node] != LEAF
        while active.any():
            r, n = rows[active], node[active]
            go_left = X[r, self.feature[n]] <= self.threshold[n]
            node[r] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] != LEAF
        return node

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]


def resolve_max_features(max_features, p: int) -> int:
    """``'third'`` rounds p/3 up, ``'sqrt'`` rounds to nearest; both at least 1."""
    if max_features is None or max_features in ("all", "p"):
        return p
    if max_features in ("third", "p/3"):
        return max(1, math.ceil(p / 3))
    if max_features in ("sqrt", "sqrt(p)"):
        return max(1, int(round(math.sqrt(p))))
    if isinstance(max_features, float):
        return max(1, min(p, math.ceil(max_features * p)))
    return max(1, min(p, int(max_features)))


def _best_split(Xn, yn, min_leaf):
    """Best (gain, column, threshold) over the columns of ``Xn``; gain 0 if none."""
    n = yn.size
    yc = yn - yn.mean()
    total = yc.sum()
    order = np.argsort(Xn, axis=0, kind="stable")
    xs = np.take_along_axis(Xn, order, axis=0)
    cs = np.cumsum(yc[order], axis=0)[:-1]
    n_left = np.arange(1, n)[:, None]
    n_right = n - n_left
    gain = cs**2 / n_left + (total - cs) ** 2 / n_right - total**2 / n
    valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n_right >= min_leaf)
    gain = np.where(valid, gain, -np.inf)
    pos = np.argmax(gain, axis=0)
    col_gain = gain[pos, np.arange(gain.shape[1])]
    j = int(np.argmax(col_gain))
    g = col_gain[j]
    sse = float(np.dot(yc, yc))
    if not np.isfinite(g) or g <= MIN_GAIN * sse:
        return 0.0, -1, 0.0
    i = pos[j]
    lo, hi = xs[i, j], xs[i + 1, j]
    thr = (lo + hi) / 2.0
    if not lo <= thr < hi:
        thr = lo
    return float(g), j, float(thr)


def fit_tree(X, y, min_samples_leaf: int = 1, max_features=None, rng=None,
             max_depth: int | None = None) -> Tree:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.size:
        raise ShapeMismatch("X must be n x p and y of length n")
    n, p = X.shape
    if n == 0:
        raise EmptyData("cannot grow a tree on zero rows")
    if n < min_samples_leaf:
        raise EmptyData(f"{n} rows cannot satisfy min_samples_leaf={min_samples_leaf}")
    k = resolve_max_features(max_features, p)
    if k < p and rng is None:
        rng = np.random.default_rng(0)
    feature, threshold, left, right, value, count = [], [], [], [], [], []

    def new_node(idx):
        feature.append(LEAF)
        threshold.append(np.nan)
        left.append(LEAF)
        right.append(LEAF)
        value.append(float(y[idx].mean()))
        count.append(idx.size)
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        if idx.size < 2 * min_samples_leaf or (max_depth is not None and depth >= max_depth):
            continue
        feats = np.arange(p) if k == p else np.sort(rng.choice(p, size=k, replace=False))
        gain, j, thr = _best_split(X[np.ix_(idx, feats)], y[idx], min_samples_leaf)
        if j < 0:
            continue
        f = int(feats[j])
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        # right first so the left subtree is expanded (and numbered) first
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return Tree(np.array(feature, dtype=np.intp), np.array(threshold), np.array(left, dtype=np.intp),
                np.array(right, dtype=np.intp), np.array(value), np.array(count), p)


@dataclass(frozen=True)
class ForestSpec:
    n_trees: int = 500
    min_samples_leaf: int = 1
    max_features: object = "third"
    rng_seed: int = 0
    bootstrap: bool = True


@dataclass
class RandomForest:
    trees: list
    spec: ForestSpec

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if not self.trees:
            raise EmptyData("forest has no trees")
        acc = np.zeros(X.shape[0])
        for t in self.trees:
            acc += t.predict(X)
        return acc / len(self.trees)


def _tree_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def fit_random_forest(X, y, spec: ForestSpec = ForestSpec(), workers: int = 1) -> RandomForest:
    """Bagged trees with per-split feature subsampling.

    Tree ``i`` draws its bootstrap sample and feature subsets from a stream
    derived from ``(rng_seed, i)``, so results do not depend on ``workers``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 2:
        raise EmptyData("a forest needs at least two rows")
    n = X.shape[0]

    def grow(i):
        rng = _tree_rng(spec.rng_seed, i)
        idx = rng.integers(0, n, size=n) if spec.bootstrap else np.arange(n)
        return fit_tree(X[idx], y[idx], spec.min_samples_leaf, spec.max_features, rng)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
        trees = list(ex.map(grow, range(spec.n_trees)))
    return RandomForest(trees, spec)


@dataclass(frozen=True)
class GbtSpec:
    depth: int = 1
    n_trees: int = 100
    learning_rate: float = 0.1
    rng_seed: int = 0


@dataclass
class GradientBoosting:
    base: float
    trees: list
    spec: GbtSpec
    train_mse: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def predict(self, X, n_trees: int | None = None) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.full(X.shape[0], self.base)
        for t in self.trees[: n_trees if n_trees is not None else len(self.trees)]:
            out += self.spec.learning_rate * t.predict(X)
        return out


def fit_gbt(X, y, spec: GbtSpec = GbtSpec()) -> GradientBoosting:
    """Least-squares boosting: start at mean(y), add ``lr * tree(residuals)``.

    ``train_mse[k]`` is the training MSE after ``k`` trees.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.shape[0] < 2:
        raise EmptyData("boosting needs at least two rows")
    base = float(y.mean())
    F = np.full(y.size, base)
    trees = []
    mse = [float(np.mean((y - F) ** 2))]
    for _ in range(spec.n_trees):
        t = fit_tree(X, y - F, 1, None, None, max_depth=spec.depth)
        F = F + spec.learning_rate * t.predict(X)
        trees.append(t)
        mse.append(float(np.mean((y - F) ** 2)))
    return GradientBoosting(base, trees, spec, np.array(mse))
