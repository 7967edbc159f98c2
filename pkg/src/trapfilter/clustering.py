"""Lloyd K-Means over image feature vectors plus cluster diagnostics."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, ModeMismatch, SingleCluster, TooFewPoints
from .imageio import equalize, histogram_features, to_grayscale

HIST_BINS = 256


class FeatureMode(str, enum.Enum):
    RGB_IMAGE = "rgb_image"
    EQUALIZED_IMAGE = "equalized_image"
    RGB_HISTOGRAM = "rgb_histogram"
    EQUALIZED_HISTOGRAM = "equalized_histogram"
    GRAY_HISTOGRAM = "gray_histogram"


def featurize(img: np.ndarray, mode: FeatureMode | str) -> np.ndarray:
    mode = FeatureMode(mode)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ModeMismatch(f"{mode.value} needs a 3-channel image, got shape {img.shape}")
    if mode is FeatureMode.RGB_IMAGE:
        return img.astype(np.float32).ravel()
    if mode is FeatureMode.EQUALIZED_IMAGE:
        return equalize(img).ravel()
    if mode is FeatureMode.RGB_HISTOGRAM:
        return histogram_features(img, HIST_BINS)
    if mode is FeatureMode.EQUALIZED_HISTOGRAM:
        return histogram_features(equalize(img), HIST_BINS)
    return histogram_features(to_grayscale(img), HIST_BINS)


@dataclass
class KMeansModel:
    k: int
    mode: FeatureMode
    centroids: np.ndarray  # (k, d) float32
    seed: int
    inertia: float
    n_iter: int = 0
    history: list[float] = field(default_factory=list, repr=False)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def header(self) -> dict:
        return {"k": self.k, "d": self.dim, "mode": self.mode.value, "seed": self.seed,
                "inertia": self.inertia, "n_iter": self.n_iter}


def _as_matrix(vectors) -> np.ndarray:
    try:
        X = np.asarray(vectors, dtype=np.float64)
    except ValueError as exc:
        raise DimensionMismatch("vectors have inconsistent lengths") from exc
    if X.ndim != 2:
        raise DimensionMismatch(f"expected a list of equal-length vectors, got shape {X.shape}")
    return X


def sq_distances(X: np.ndarray, C: np.ndarray, x_sq: np.ndarray | None = None) -> np.ndarray:
    """(n, k) squared Euclidean distances in float64, clipped at 0.

    ``x_sq`` may carry precomputed squared row norms of ``X``.
    """
    X = np.asarray(X, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if x_sq is None:
        x_sq = np.einsum("ij,ij->i", X, X)
    D = x_sq[:, None] - 2.0 * (X @ C.T) + np.einsum("ij,ij->i", C, C)[None, :]
    return np.maximum(D, 0.0)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator, x_sq) -> np.ndarray:
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    closest = sq_distances(X, X[centers], x_sq).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point already sits on a centre; pick any unused index
            remaining = np.setdiff1d(np.arange(n), centers)
            nxt = int(rng.choice(remaining))
        else:
            nxt = int(rng.choice(n, p=closest / total))
        centers.append(nxt)
        closest = np.minimum(closest, sq_distances(X, X[[nxt]], x_sq).ravel())
    return X[centers].copy()


def _repair_empty(X, labels, dist_to_own, C, counts):
    """Move each empty centroid onto the point farthest from its own centroid."""
    taken = set()
    order = np.argsort(-dist_to_own, kind="stable")
    for j in np.flatnonzero(counts == 0):
        for idx in order:
            if idx not in taken and counts[labels[idx]] > 1:
                taken.add(int(idx))
                counts[labels[idx]] -= 1
                C[j] = X[idx]
                break
    return C


def fit_kmeans(vectors, k: int = 7, max_iter: int = 300, tol: float = 1e-4, seed: int = 0,
               mode: FeatureMode | str = FeatureMode.RGB_IMAGE, n_init: int = 10) -> KMeansModel:
    """Lloyd iteration from k-means++ seeding.

    Stops once no centroid moves more than ``tol`` (Euclidean) or after
    ``max_iter`` rounds. The best of ``n_init`` seeded restarts (lowest
    inertia) is kept. ``history`` holds the inertia measured at every
    assignment step of that run; it is non-increasing.
    """
    X = _as_matrix(vectors)
    n = X.shape[0]
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise TooFewPoints(f"need at least k={k} points, got {n}")
    x_sq = np.einsum("ij,ij->i", X, X)
    best = None
    for run_seed in np.random.SeedSequence(seed).spawn(max(1, n_init)):
        C, inertia, n_iter, history = _lloyd(X, x_sq, k, max_iter, tol, np.random.default_rng(run_seed))
        if best is None or inertia < best[1]:
            best = (C, inertia, n_iter, history)
    C, inertia, n_iter, history = best
    return KMeansModel(k=k, mode=FeatureMode(mode), centroids=C.astype(np.float32), seed=seed,
                       inertia=inertia, n_iter=n_iter, history=history)


def _lloyd(X, x_sq, k, max_iter, tol, rng):
    n = X.shape[0]
    # centroids live on the float32 grid so a persisted model assigns identically
    C = _kmeans_pp(X, k, rng, x_sq).astype(np.float32).astype(np.float64)

    history = []
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        D = sq_distances(X, C, x_sq)
        labels = np.argmin(D, axis=1)
        own = D[np.arange(n), labels]
        history.append(float(own.sum()))

        counts = np.bincount(labels, minlength=k)
        new_C = C.copy()
        for j in np.flatnonzero(counts):
            new_C[j] = X[labels == j].mean(axis=0)
        nz = counts > 0
        if not nz.all():
            new_C = _repair_empty(X, labels, own, new_C, counts.copy())
        new_C = new_C.astype(np.float32).astype(np.float64)
        shift = np.sqrt(((new_C - C) ** 2).sum(axis=1)).max()
        C = new_C
        if shift < tol:
            break

    D = sq_distances(X, C, x_sq)
    inertia = float(D.min(axis=1).sum())
    history.append(inertia)
    return C, inertia, n_iter, history


def assign(model: KMeansModel, vector) -> int:
    """Index of the nearest centroid; ties go to the lowest index."""
    v = np.asarray(vector, dtype=np.float64).ravel()
    if v.shape[0] != model.dim:
        raise DimensionMismatch(f"vector has length {v.shape[0]}, model expects {model.dim}")
    return int(np.argmin(sq_distances(v[None], model.centroids)[0]))


def assign_many(model: KMeansModel, vectors) -> np.ndarray:
    X = _as_matrix(vectors)
    if X.shape[1] != model.dim:
        raise DimensionMismatch(f"vectors have length {X.shape[1]}, model expects {model.dim}")
    return np.argmin(sq_distances(X, model.centroids), axis=1)


def silhouette(vectors, assignments, max_points: int = 2000, seed: int = 0) -> float:
    """Mean silhouette coefficient (Euclidean distance).

    Points in singleton clusters score 0, as does a point with a = b = 0.
    Inputs larger than ``max_points`` are scored on a seeded subsample.
    """
    X = _as_matrix(vectors)
    labels = np.asarray(assignments)
    if labels.shape[0] != X.shape[0]:
        raise DimensionMismatch("one assignment per vector required")
    if np.unique(labels).size < 2:
        raise SingleCluster("silhouette needs at least two clusters")
    if X.shape[0] > max_points:
        pick = np.sort(np.random.default_rng(seed).choice(X.shape[0], max_points, replace=False))
        X, labels = X[pick], labels[pick]
        if np.unique(labels).size < 2:
            raise SingleCluster("subsample collapsed to one cluster")

    sq = (X * X).sum(axis=1)
    D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0))
    np.fill_diagonal(D, 0.0)
    uniq = np.unique(labels)
    # mean distance from every point to every cluster
    sums = np.stack([D[:, labels == c].sum(axis=1) for c in uniq], axis=1)
    sizes = np.array([(labels == c).sum() for c in uniq])
    own = np.searchsorted(uniq, labels)
    s = np.zeros(X.shape[0])
    for i in range(X.shape[0]):
        n_own = sizes[own[i]]
        if n_own == 1:
            continue
        a = sums[i, own[i]] / (n_own - 1)
        others = np.delete(sums[i] / sizes, own[i])
        b = others.min()
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(s.mean())


def intra_cluster_distance(model: KMeansModel, vectors, assignments) -> float:
    """Sum of squared distances from each point to its assigned centroid."""
    X = _as_matrix(vectors)
    labels = np.asarray(assignments)
    if X.shape[1] != model.dim:
        raise DimensionMismatch(f"vectors have length {X.shape[1]}, model expects {model.dim}")
    diff = X - model.centroids.astype(np.float64)[labels]
    return float(np.einsum("ij,ij->", diff, diff))


def elbow_curve(vectors, ks=range(5, 11), seed: int = 0) -> dict[int, float]:
    """Final inertia for every k, for picking the cluster count by eye."""
    return {k: fit_kmeans(vectors, k=k, seed=seed).inertia for k in ks}


def purity(assignments, truth) -> float:
    """Fraction of points whose cluster's majority class matches their own."""
    assignments = np.asarray(assignments)
    truth = np.asarray(truth)
    hit = 0
    for c in np.unique(assignments):
        _, counts = np.unique(truth[assignments == c], return_counts=True)
        hit += counts.max()
    return hit / assignments.size
