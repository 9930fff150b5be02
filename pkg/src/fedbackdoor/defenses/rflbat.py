"""RFLBAT: PCA projection, distance filtering and k-means cluster selection."""

from __future__ import annotations

import numpy as np
from sklearn.cluster import KMeans

from ..updates import DefenseVerdict, stack
from .flame import cosine_distances

KMEANS_SEED = 0


def pca_2d(x: np.ndarray) -> np.ndarray | None:
    """Projection on the top two principal components, or None for zero variance."""
    centered = x - x.mean(axis=0)
    if not np.any(centered):
        return None
    u, s, _ = np.linalg.svd(centered, full_matrices=False)
    k = min(2, len(s))
    return u[:, :k] * s[:k]


def distance_filter(points: np.ndarray, members: np.ndarray, eps: float) -> np.ndarray:
    """Keep members whose summed distance to the others is at most ``eps`` times the median sum."""
    if len(members) < 2:
        return members
    p = points[members]
    sums = np.sqrt(((p[:, None, :] - p[None, :, :]) ** 2).sum(axis=2)).sum(axis=1)
    return members[sums <= eps * np.median(sums)]


def defend_rflbat(updates, eps1: float = 2.0, k_clusters: int = 2, eps2: float | None = None) -> DefenseVerdict:
    n = len(updates)
    if n < 3:
        raise ValueError("rflbat needs at least 3 updates")
    ids = [u.client_id for u in updates]
    deltas = stack(updates)
    pts = pca_2d(deltas)
    if pts is None:
        return DefenseVerdict.partition(updates, ids)
    survivors = distance_filter(pts, np.arange(n), eps1)
    chosen = survivors
    if len(survivors) >= k_clusters:
        labels = KMeans(n_clusters=k_clusters, init="k-means++", n_init=10,
                        random_state=KMEANS_SEED).fit(pts[survivors]).labels_
        sim = 1.0 - cosine_distances(deltas)
        best, best_score = None, -np.inf
        for lab in range(k_clusters):
            members = survivors[labels == lab]
            if len(members) < 2:
                continue  # a singleton has no pairwise similarity to rank by
            block = sim[np.ix_(members, members)]
            score = (block.sum() - np.trace(block)) / (len(members) * (len(members) - 1))
            if score > best_score:
                best, best_score = members, score
        if best is not None:
            chosen = distance_filter(pts, best, eps1 if eps2 is None else eps2)
    return DefenseVerdict.partition(updates, [ids[i] for i in chosen])
