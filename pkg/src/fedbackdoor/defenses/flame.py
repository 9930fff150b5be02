"""FLAME: cosine-density clustering, median-norm clipping and Gaussian noise."""

from __future__ import annotations

import math

import numpy as np
from sklearn.cluster import HDBSCAN

from ..updates import DefenseVerdict, stack


def flame_sigma(clip_bound: float, eps_dp: float, delta_dp: float) -> float:
    return clip_bound / eps_dp * math.sqrt(2.0 * math.log(1.25 / delta_dp))


def cosine_distances(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    unit = vectors / np.where(norms > 0, norms, 1.0)[:, None]
    d = 1.0 - unit @ unit.T
    np.fill_diagonal(d, 0.0)
    return np.clip(d, 0.0, 2.0)


def majority_cluster(dist: np.ndarray, min_size: int) -> np.ndarray | None:
    """Indices of the largest density cluster with at least ``min_size`` members, else None."""
    n = len(dist)
    if np.allclose(dist, 0.0):
        return np.arange(n)
    labels = HDBSCAN(min_cluster_size=min_size, min_samples=1, metric="precomputed",
                     allow_single_cluster=True).fit(dist).labels_
    best = None
    for lab in sorted(set(labels) - {-1}):
        members = np.flatnonzero(labels == lab)
        if len(members) >= min_size and (best is None or len(members) > len(best)):
            best = members
    return best


def defend_flame(updates, eps_dp: float, delta_dp: float, reference: np.ndarray | None = None) -> DefenseVerdict:
    """Accept the majority cosine cluster, clip to its median norm, report the noise level.

    ``reference`` (the broadcast model's flat params) makes clustering run on
    the reconstructed local models rather than on raw deltas.
    """
    n = len(updates)
    if n < 3:
        raise ValueError("flame needs at least 3 updates")
    if not eps_dp > 0 or not 0.0 < delta_dp < 1.0:
        raise ValueError("flame needs eps_dp > 0 and delta_dp in (0, 1)")
    deltas = stack(updates)
    points = deltas if reference is None else deltas + reference
    dist = cosine_distances(points)
    min_size = n // 2 + 1
    members = majority_cluster(dist, min_size)
    if members is None:
        mean_cos = 1.0 - (dist.sum(axis=1) / (n - 1))
        members = np.sort(np.argsort(-mean_cos, kind="stable")[:min_size])
    ids = [u.client_id for u in updates]
    accepted = [ids[i] for i in members]
    m = float(np.median(np.linalg.norm(deltas[members], axis=1)))
    mean_cos = 1.0 - dist.sum(axis=1) / max(n - 1, 1)
    return DefenseVerdict.partition(
        updates, accepted,
        scores={c: float(s) for c, s in zip(ids, mean_cos)},
        post_processing={"clip_bound": m, "noise_sigma": flame_sigma(m, eps_dp, delta_dp)},
    )
