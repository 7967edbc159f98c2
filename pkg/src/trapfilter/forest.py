"""Random forest of Gini CART trees over reconstruction-error features.

Class 0 is "empty", class 1 is "animal". A sample goes left when
``x[feature] <= threshold``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import BadThreshold, DimensionMismatch, SingleClass

LEAF = -1


def gini(n_empty: float, n_animal: float) -> float:
    n = n_empty + n_animal
    if n == 0:
        return 0.0
    p = n_animal / n
    return 1.0 - p * p - (1.0 - p) * (1.0 - p)


@dataclass
class Tree:
    """Array-backed binary tree; node 0 is the root."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray  # (n_nodes, 2) training class counts reaching each node

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def is_leaf(self, i: int) -> bool:
        return self.feature[i] == LEAF

    def depth(self) -> int:
        def d(i):
            return 0 if self.is_leaf(i) else 1 + max(d(self.left[i]), d(self.right[i]))
        return d(0)

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        active = self.feature[node] != LEAF
        while active.any():
            r = rows[active]
            n = node[r]
            go_left = X[r, self.feature[n]] <= self.threshold[n]
            node[r] = np.where(go_left, self.left[n], self.right[n])
            active = self.feature[node] != LEAF
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        c = self.counts[self.leaf_index(X)]
        return c[:, 1] / c.sum(axis=1)

    def to_dict(self, i: int = 0) -> dict:
        if self.is_leaf(i):
            return {"class_counts": [int(self.counts[i, 0]), int(self.counts[i, 1])]}
        return {
            "feature_index": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_dict(int(self.left[i])),
            "right": self.to_dict(int(self.right[i])),
        }

    @classmethod
    def from_dict(cls, root: dict) -> "Tree":
        b = _TreeBuilder()

        def walk(node):
            if "class_counts" in node:
                return b.add_leaf(node["class_counts"])
            i = b.add_node(node["feature_index"], node["threshold"], (0, 0))
            b.left[i] = walk(node["left"])
            b.right[i] = walk(node["right"])
            b.counts[i] = [a + c for a, c in zip(b.counts[b.left[i]], b.counts[b.right[i]])]
            return i

        walk(root)
        return b.build()


class _TreeBuilder:
    def __init__(self):
        self.feature, self.threshold, self.left, self.right, self.counts = [], [], [], [], []

    def add_node(self, feature, threshold, counts):
        self.feature.append(int(feature))
        self.threshold.append(float(threshold))
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.counts.append(list(counts))
        return len(self.feature) - 1

    def add_leaf(self, counts):
        return self.add_node(LEAF, 0.0, counts)

    def build(self) -> Tree:
        return Tree(np.array(self.feature, dtype=np.int64), np.array(self.threshold, dtype=np.float64),
                    np.array(self.left, dtype=np.int64), np.array(self.right, dtype=np.int64),
                    np.array(self.counts, dtype=np.int64).reshape(-1, 2))


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    max_depth: int | None = None
    mtry: int | None = None  # None -> ceil(sqrt(d))
    min_samples_leaf: int = 1
    bootstrap: bool = True
    workers: int = 1

    def resolved_mtry(self, d: int) -> int:
        return min(d, self.mtry if self.mtry else math.ceil(math.sqrt(d)))


@dataclass
class ForestModel:
    trees: list[Tree]
    feature_dim: int
    params: ForestParams = field(default_factory=ForestParams)
    seed: int = 0

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def to_dict(self) -> dict:
        p = self.params
        return {
            "feature_dim": self.feature_dim,
            "seed": self.seed,
            "params": {"n_trees": p.n_trees, "max_depth": p.max_depth, "mtry": p.mtry,
                       "min_samples_leaf": p.min_samples_leaf, "bootstrap": p.bootstrap},
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ForestModel":
        return cls([Tree.from_dict(t) for t in d["trees"]], int(d["feature_dim"]),
                   ForestParams(**d["params"]), int(d["seed"]))


def best_split(X: np.ndarray, y: np.ndarray, features, min_samples_leaf: int = 1):
    """Lowest weighted-Gini split among ``features``.

    Returns ``(feature, threshold, weighted_gini)`` or None when no feature
    admits a split leaving ``min_samples_leaf`` on both sides. Ties go to the
    lowest feature index, then the lowest threshold.
    """
    n = y.size
    best = None
    for f in sorted(int(f) for f in features):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        ys = y[order]
        animals_left = np.cumsum(ys)[:-1]
        n_left = np.arange(1, n)
        # only cut between distinct values
        ok = xs[1:] > xs[:-1]
        ok &= (n_left >= min_samples_leaf) & (n - n_left >= min_samples_leaf)
        if not ok.any():
            continue
        a_l = animals_left[ok].astype(np.float64)
        n_l = n_left[ok].astype(np.float64)
        a_r = ys.sum() - a_l
        n_r = n - n_l
        e_l = n_l - a_l
        e_r = n_r - a_r
        # n * weighted gini = n - sum over children of (a^2 + e^2) / n_child
        score = n - (a_l * a_l + e_l * e_l) / n_l - (a_r * a_r + e_r * e_r) / n_r
        j = int(np.argmin(score))
        cut = np.flatnonzero(ok)[j]
        weighted = float(score[j] / n)
        if best is None or weighted < best[2]:
            best = (f, float((xs[cut] + xs[cut + 1]) / 2.0), weighted)
    return best


def build_tree(X: np.ndarray, y: np.ndarray, params: ForestParams, rng: np.random.Generator) -> Tree:
    """Grow one CART tree.

    Each node draws ``mtry`` candidate features; if none of them can split,
    the remaining features are tried before giving up (a node is only made a
    leaf when it is pure, at the depth limit, or genuinely unsplittable). A
    split that leaves the Gini impurity unchanged is still taken when nothing
    better exists, otherwise XOR-like layouts could never be separated.
    """
    d = X.shape[1]
    mtry = params.resolved_mtry(d)
    b = _TreeBuilder()

    def grow(idx, depth):
        ys = y[idx]
        n_animal = int(ys.sum())
        counts = (idx.size - n_animal, n_animal)
        if n_animal in (0, idx.size) or (params.max_depth is not None and depth >= params.max_depth) \
                or idx.size < 2 * params.min_samples_leaf:
            return b.add_leaf(counts)
        perm = rng.permutation(d)
        split = best_split(X[idx], ys, perm[:mtry], params.min_samples_leaf)
        if split is None and mtry < d:
            split = best_split(X[idx], ys, perm[mtry:], params.min_samples_leaf)
        if split is None:
            return b.add_leaf(counts)
        f, thr, _ = split
        node = b.add_node(f, thr, counts)
        mask = X[idx, f] <= thr
        b.left[node] = grow(idx[mask], depth + 1)
        b.right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(y.size), 0)
    return b.build()


def _prepare(data):
    X = np.asarray([np.asarray(fv, dtype=np.float64) for fv, _ in data])
    y = np.asarray([int(lab) for _, lab in data], dtype=np.int64)
    return X, y


def train_forest(data, params: ForestParams = ForestParams(), seed: int = 0) -> ForestModel:
    """Fit ``params.n_trees`` trees on (feature vector, label) pairs."""
    data = list(data)
    try:
        X, y = _prepare(data)
    except ValueError as exc:
        raise DimensionMismatch("feature vectors differ in length") from exc
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionMismatch("need a non-empty list of equal-length vectors")
    if np.unique(y).size < 2:
        raise SingleClass("training data must contain both classes")
    if params.n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    n = y.size
    seeds = np.random.SeedSequence(seed).spawn(params.n_trees)

    def one(ss):
        rng = np.random.default_rng(ss)
        idx = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        return build_tree(X[idx], y[idx], params, rng)

    if params.workers > 1:
        with ThreadPoolExecutor(params.workers) as pool:
            trees = list(pool.map(one, seeds))
    else:
        trees = [one(ss) for ss in seeds]
    return ForestModel(trees, X.shape[1], params, seed)


def _matrix(model: ForestModel, fv) -> np.ndarray:
    X = np.asarray(fv, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    if X.shape[1] != model.feature_dim:
        raise DimensionMismatch(f"feature vector has length {X.shape[1]}, forest expects {model.feature_dim}")
    return X


def predict_proba_many(model: ForestModel, X) -> np.ndarray:
    X = _matrix(model, X)
    total = np.zeros(X.shape[0])
    for t in model.trees:
        total += t.predict_proba(X)
    return total / model.n_trees


def predict_proba(model: ForestModel, fv) -> float:
    """Mean over trees of the animal fraction in the reached leaf."""
    return float(predict_proba_many(model, fv)[0])


def check_threshold(threshold: float) -> float:
    if not 0.0 <= threshold <= 1.0:
        raise BadThreshold(f"threshold must lie in [0, 1], got {threshold}")
    return threshold


def predict(model: ForestModel, fv, threshold: float = 0.5) -> int:
    """1 (animal) iff the probability reaches ``threshold``."""
    check_threshold(threshold)
    return int(predict_proba(model, fv) >= threshold)
