"""Client update and defense verdict value types."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .nn import model as nn


@dataclass(frozen=True)
class ClientUpdate:
    """``delta = L_i - w_ind`` as a flat vector plus the client's running BN stats."""

    client_id: int
    delta: nn.FlatVector
    uploaded_bn_stats: nn.BnStats

    @property
    def vector(self) -> np.ndarray:
        return self.delta.values

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.delta.values))

    def with_vector(self, values: np.ndarray) -> "ClientUpdate":
        return replace(self, delta=nn.FlatVector(np.asarray(values, dtype=np.float64), self.delta.layout))


def make_update(client_id: int, start: nn.ModelState, trained: nn.ModelState) -> ClientUpdate:
    s, t = nn.flatten(start), nn.flatten(trained)
    return ClientUpdate(int(client_id), nn.FlatVector(t.values - s.values, t.layout), trained.bn_stats.copy())


def reconstruct(base: nn.ModelState, update: ClientUpdate, bn_stats: nn.BnStats | None = None) -> nn.ModelState:
    """``base + delta`` with ``bn_stats`` (default: the client's uploaded stats)."""
    flat = nn.flatten(base)
    if update.delta.layout != flat.layout:
        raise nn.ShapeError(f"update {update.client_id}: delta layout does not match the broadcast model")
    stats = update.uploaded_bn_stats if bn_stats is None else bn_stats
    return nn.state_from_flat(flat.values + update.vector, base, stats)


def stack(updates) -> np.ndarray:
    return np.stack([u.vector for u in updates]) if updates else np.zeros((0, 0))


@dataclass(frozen=True)
class DefenseVerdict:
    """Partition of the received client ids into accepted and flagged.

    ``scores`` is defense-specific (Krum score, TE count, Foolsgold weight,
    indicator alpha_m ...). ``post_processing`` optionally carries
    ``clip_bound`` / ``noise_sigma`` for the aggregator; ``weights`` turns the
    plain mean into a weighted one; ``inferred_target`` maps ids to labels.
    """

    accepted: frozenset
    flagged: frozenset
    scores: dict = field(default_factory=dict)
    post_processing: dict | None = None
    weights: dict | None = None
    inferred_target: dict | None = None
    updates: tuple | None = field(default=None, compare=False)  # transformed updates to aggregate, if any

    def __post_init__(self):
        object.__setattr__(self, "accepted", frozenset(int(i) for i in self.accepted))
        object.__setattr__(self, "flagged", frozenset(int(i) for i in self.flagged))
        if self.accepted & self.flagged:
            raise ValueError("a client cannot be both accepted and flagged")

    @classmethod
    def partition(cls, received, accepted, **kw) -> "DefenseVerdict":
        ids = [u.client_id for u in received]
        acc = frozenset(int(i) for i in accepted)
        return cls(acc, frozenset(ids) - acc, **kw)

    def to_dict(self) -> dict:
        def keyed(d):
            return None if d is None else {str(k): _plain(v) for k, v in sorted(d.items())}
        return {
            "accepted": sorted(self.accepted),
            "flagged": sorted(self.flagged),
            "scores": keyed(self.scores),
            "post_processing": None if self.post_processing is None else {k: _plain(v) for k, v in sorted(self.post_processing.items())},
            "weights": keyed(self.weights),
            "inferred_target": keyed(self.inferred_target),
        }


def _plain(v):
    if isinstance(v, (np.floating, float)):
        return float(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    return v
