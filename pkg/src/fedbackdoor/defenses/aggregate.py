"""Server-side aggregation of accepted updates."""

from __future__ import annotations

import numpy as np

from ..nn import model as nn
from ..updates import DefenseVerdict
from .clip import clip_vector


def mean_bn_stats(stats: list) -> nn.BnStats:
    means = tuple(np.mean([s.means[i] for s in stats], axis=0) for i in range(len(stats[0].means)))
    vars_ = tuple(np.mean([s.vars[i] for s in stats], axis=0) for i in range(len(stats[0].vars)))
    return nn.BnStats(means, vars_, stats[0].momentum)


def aggregate_accepted(w_ind: nn.ModelState, updates, verdict: DefenseVerdict,
                       rng: np.random.Generator | None = None) -> nn.ModelState:
    """``w_ind`` plus the (weighted) mean of accepted deltas; BN stats = mean of accepted uploads.

    ``verdict.post_processing`` clips each accepted delta to ``clip_bound`` and
    adds N(0, noise_sigma^2) per coordinate to the aggregate.
    """
    pool = verdict.updates if verdict.updates is not None else updates
    chosen = [u for u in pool if u.client_id in verdict.accepted]
    if not chosen:
        return w_ind
    base = nn.flatten(w_ind)
    for u in chosen:
        if u.delta.layout != base.layout:
            raise nn.ShapeError(f"update {u.client_id}: delta layout does not match the broadcast model")
    post = verdict.post_processing or {}
    vecs = [u.vector for u in chosen]
    if post.get("clip_bound") is not None:
        vecs = [clip_vector(v, post["clip_bound"]) for v in vecs]
    if verdict.weights is not None:
        w = np.array([verdict.weights[u.client_id] for u in chosen])
        total = w.sum()
        agg = sum(wi * v for wi, v in zip(w, vecs)) / total if total > 0 else np.zeros_like(base.values)
    else:
        agg = np.mean(np.stack(vecs), axis=0)
    sigma = post.get("noise_sigma") or 0.0
    if sigma > 0:
        if rng is None:
            raise ValueError("noise post-processing needs an rng")
        agg = agg + rng.normal(0.0, sigma, agg.shape)
    return nn.state_from_flat(base.values + agg, w_ind, mean_bn_stats([u.uploaded_bn_stats for u in chosen]))
