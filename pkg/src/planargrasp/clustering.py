"""K-means over object shape features with deterministic k-means++ seeding;
picks one representative object per cluster for base-policy training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import rng_stream


class ClusteringError(ValueError):
    pass


@dataclass
class ClusterModel:
    k: int
    centroids: np.ndarray           # (k, d)
    assignment: dict                # object id -> cluster index
    representatives: list           # k object ids
    objective_history: list         # sum of squared distances per iteration

    def to_record(self) -> dict:
        return {"k": self.k,
                "centroids": self.centroids.tolist(),
                "assignment": {str(i): int(c) for i, c in self.assignment.items()},
                "representatives": [int(i) for i in self.representatives]}


def _sq_dists(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = features[:, None, :] - centroids[None, :, :]
    return np.sum(diff * diff, axis=2)


def _seed_pp(features: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: first center uniform, then proportional to the
    squared distance to the nearest chosen center."""
    n = len(features)
    chosen = [int(rng.integers(n))]
    d2 = np.sum((features - features[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(d2 / total), rng.uniform()))
            idx = min(idx, n - 1)
        chosen.append(idx)
        d2 = np.minimum(d2, np.sum((features - features[idx]) ** 2, axis=1))
    return features[chosen].copy()


def kmeans(features, ids, k: int, seed: int = 0, max_iters: int = 100) -> ClusterModel:
    """Lloyd iterations until the assignment is a fixed point. Empty clusters
    are reseeded from the point farthest from its centroid."""
    features = np.asarray(features, dtype=np.float64)
    ids = list(ids)
    n = len(features)
    if k < 1 or k > n:
        raise ClusteringError(f"k={k} invalid for {n} objects")
    if not np.all(np.isfinite(features)):
        raise ClusteringError("non-finite features")
    rng = rng_stream(seed, 77)
    centroids = _seed_pp(features, k, rng)
    labels = np.argmin(_sq_dists(features, centroids), axis=1)
    history = []
    for _ in range(max_iters):
        for c in range(k):
            sel = labels == c
            if np.any(sel):
                centroids[c] = features[sel].mean(axis=0)
            else:
                far = int(np.argmax(np.min(_sq_dists(features, centroids), axis=1)))
                centroids[c] = features[far]
        d2 = _sq_dists(features, centroids)
        new_labels = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels) and len(history) > 1:
            break
        labels = new_labels
    # degenerate inputs (duplicated features) can leave a cluster empty even
    # after reseeding; steal a point from the largest cluster so every
    # cluster has a representative
    for c in range(k):
        if not np.any(labels == c):
            counts = np.bincount(labels, minlength=k)
            donor = int(np.argmax(counts))
            labels[int(np.argmax(labels == donor))] = c
            centroids[c] = features[labels == c].mean(axis=0)
    assignment = {ids[i]: int(labels[i]) for i in range(n)}
    model = ClusterModel(k=k, centroids=centroids, assignment=assignment,
                         representatives=[], objective_history=history)
    model.representatives = select_representatives(model, features, ids)
    return model


def select_representatives(model: ClusterModel, features, ids) -> list:
    """Per cluster, the member closest to the centroid; ties -> lowest id."""
    features = np.asarray(features, dtype=np.float64)
    ids = list(ids)
    reps = []
    for c in range(model.k):
        best = None
        for i, oid in enumerate(ids):
            if model.assignment[oid] != c:
                continue
            d = float(np.sum((features[i] - model.centroids[c]) ** 2))
            if best is None or d < best[0] - 1e-15 or (abs(d - best[0]) <= 1e-15 and oid < best[1]):
                best = (d, oid)
        if best is None:
            raise ClusteringError(f"cluster {c} has no members")
        reps.append(best[1])
    return reps
