"""Indicator-task injection and inspection.

The server trains the global model on a secret out-of-distribution set with
labels drawn from the benign label space, keeps the batch-norm statistics
that training produced, and restores the main-task statistics before
broadcasting. A returned model that still classifies the secret set well
was trained on data that keeps the indicator alive, which in practice means
backdoor data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import IndicatorDataset
from ..nn import model as nn
from ..training import l2_pull_grad, local_sgd
from ..updates import DefenseVerdict, reconstruct
from .clip import norm_clip

DEFAULT_EPSILON = 95.0
MANY_CLASS_EPSILON = 85.0
DEFAULT_LAMBDA = 0.1
DEFAULT_ITERATIONS = 200
DEFAULT_ETA = 0.01


@dataclass(frozen=True)
class IndicatorState:
    d_o: IndicatorDataset
    main_stats: nn.BnStats
    indicator_stats: nn.BnStats
    epsilon: float
    lam: float
    iterations: int
    eta: float
    w_ind: nn.ModelState
    num_classes: int

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 100.0:
            raise ValueError("epsilon must lie in [0, 100]")


def indicator_inject(global_state: nn.ModelState, d_o: IndicatorDataset, lam: float = DEFAULT_LAMBDA,
                     iterations: int = DEFAULT_ITERATIONS, eta: float = DEFAULT_ETA, batch: int = 64,
                     rng: np.random.Generator | None = None, epsilon: float = DEFAULT_EPSILON):
    """Train the indicator task into ``global_state``; return ``(w_ind, IndicatorState)``.

    ``w_ind`` carries the main-task running statistics bit for bit.
    """
    if len(d_o) == 0:
        raise ValueError("indicator dataset is empty")
    if lam < 0 or iterations < 1:
        raise ValueError("need lam >= 0 and iterations >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    main = nn.get_bn_stats(global_state)
    anchor = nn.flatten(global_state).values
    trained = local_sgd(global_state, d_o.x, d_o.y, iterations, eta, batch, rng,
                        extra_grad=l2_pull_grad(anchor, lam))
    ind_stats = nn.get_bn_stats(trained)
    w_ind = nn.set_bn_stats(trained, main)
    state = IndicatorState(d_o, main, ind_stats, epsilon, lam, iterations, eta, w_ind,
                           global_state.arch.num_classes)
    return w_ind, state


def indicator_alphas(model: nn.ModelState, d_o: IndicatorDataset, num_classes: int) -> np.ndarray:
    """Percent accuracy on the indicator samples assigned to each label (0 for empty groups)."""
    pred = nn.predict(model, d_o.x)
    alphas = np.zeros(num_classes)
    for k in range(num_classes):
        sel = d_o.y == k
        if sel.any():
            alphas[k] = 100.0 * float(np.mean(pred[sel] == k))
    return alphas


def indicator_inspect(state: IndicatorState, updates, clip_bound: float | None = None) -> DefenseVerdict:
    """Flag every update whose reconstructed model keeps ``alpha_m >= epsilon``.

    With ``clip_bound`` the deltas are norm-clipped first and the clipped
    deltas are what gets aggregated.
    """
    received = list(updates)
    if clip_bound is not None:
        received = norm_clip(received, clip_bound)
    scores, targets, accepted = {}, {}, []
    for u in received:
        local = reconstruct(state.w_ind, u, state.indicator_stats)
        alphas = indicator_alphas(local, state.d_o, state.num_classes)
        m = int(np.argmax(alphas))
        scores[u.client_id] = float(alphas[m])
        targets[u.client_id] = m
        if alphas[m] < state.epsilon:
            accepted.append(u.client_id)
    return DefenseVerdict.partition(received, accepted, scores=scores, inferred_target=targets,
                                    updates=tuple(received) if clip_bound is not None else None)
