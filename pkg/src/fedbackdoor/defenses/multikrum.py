"""Multi-Krum selection."""

from __future__ import annotations

import numpy as np

from .._kernels import pairwise_sq_dists
from ..updates import DefenseVerdict, stack


def krum_scores(d2: np.ndarray, remaining: list[int], neighbours: int) -> dict[int, float]:
    """Sum of squared distances to the ``neighbours`` closest other members of ``remaining``."""
    scores = {}
    for i in remaining:
        others = np.sort([d2[i, j] for j in remaining if j != i])
        scores[i] = float(np.sum(others[:neighbours]))
    return scores


def defend_multikrum(updates, f: int, m: int) -> DefenseVerdict:
    """Iteratively move the lowest-Krum-score update into the selection until ``m`` are chosen.

    The neighbour count ``n - f - 1`` uses the initial ``n``; ties go to the
    lower client id. ``scores`` reports each update's first-pass Krum score.
    """
    n = len(updates)
    if not 2 * f + 2 < n:
        raise ValueError(f"multi-krum needs 2f+2 < n (f={f}, n={n})")
    if not 1 <= m <= n:
        raise ValueError(f"select count m={m} outside [1, {n}]")
    d2 = pairwise_sq_dists(stack(updates))
    ids = [u.client_id for u in updates]
    neighbours = n - f - 1
    remaining = sorted(range(n), key=lambda i: ids[i])
    first = krum_scores(d2, remaining, neighbours)
    chosen = []
    while len(chosen) < m:
        scores = krum_scores(d2, remaining, neighbours)
        best = min(remaining, key=lambda i: (scores[i], ids[i]))
        chosen.append(best)
        remaining.remove(best)
    return DefenseVerdict.partition(updates, [ids[i] for i in chosen],
                                    scores={ids[i]: first[i] for i in range(n)})
