"""Malicious client training algorithms.

Every routine is pure given ``(start state, datasets, config, rng)`` and
returns a new :class:`ModelState` (or client updates for the joint 3DFed
cohort). Poisoned datasets come from :func:`data.build_poison_dataset`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .data import Dataset, TriggerSpec
from .nn import model as nn
from .training import l2_prox, local_sgd, sample_batch
from .updates import ClientUpdate, make_update

ALGORITHMS = ("vanilla", "pgd", "neurotoxin", "chameleon", "threedfed")


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 10
    lr: float = 0.05


@dataclass(frozen=True)
class ThreeDFedConfig:
    lambda_c: float = 0.1
    noise_scale: float = 0.01
    decoy_count: int = 0


@dataclass(frozen=True)
class AttackConfig:
    algorithm: str = "vanilla"
    trigger: TriggerSpec | None = None
    plr: float = 0.05
    iterations: int = 200
    poison_count: int = 200
    batch: int = 64
    pgd_radius: float = math.inf
    neurotoxin_k: float = 0.25
    scale_gamma: float = 1.0
    pretrain: PretrainConfig | None = None
    threedfed: ThreeDFedConfig = field(default_factory=ThreeDFedConfig)
    chameleon_temperature: float = 0.1

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown attack algorithm {self.algorithm!r}")
        if not self.plr > 0:
            raise ValueError("plr must be positive")
        if not 0.0 < self.neurotoxin_k < 1.0:
            raise ValueError("neurotoxin_k must lie in (0, 1)")
        if self.algorithm == "pgd" and not self.pgd_radius > 0:
            raise ValueError("pgd_radius must be positive")
        if self.scale_gamma < 1.0:
            raise ValueError("scale_gamma must be >= 1")


@dataclass(frozen=True)
class MaliciousCohort:
    client_ids: tuple
    target_label: int
    trigger: TriggerSpec | None = None
    dba_parts: dict = field(default_factory=dict)
    mask_seed: int = 0


# ---------------------------------------------------------------- vanilla & PGD

def train_vanilla(start: nn.ModelState, poisoned: Dataset, plr: float, iters: int, batch: int,
                  rng: np.random.Generator) -> nn.ModelState:
    if len(poisoned) == 0:
        raise ValueError("poisoned dataset is empty")
    return local_sgd(start, poisoned.x, poisoned.y, iters, plr, batch, rng)


def project_l2(w: np.ndarray, center: np.ndarray, radius: float) -> np.ndarray:
    """Closest point to ``w`` in the l2 ball of ``radius`` around ``center``."""
    dev = w - center
    norm = float(np.linalg.norm(dev))
    if norm <= radius:
        return w
    return center + dev * (radius / norm)


def train_pgd(start: nn.ModelState, poisoned: Dataset, plr: float, iters: int, radius: float, batch: int,
              rng: np.random.Generator, monitor=None) -> nn.ModelState:
    """SGD where each step's deviation from the previous iterate is capped at ``radius``.

    ``monitor(deviation_norm)`` is called after every projected step.
    """
    if not radius > 0:
        raise ValueError("radius must be positive")
    if len(poisoned) == 0:
        raise ValueError("poisoned dataset is empty")

    def project(prev, new):
        p = nn.flatten(prev).values
        q = project_l2(nn.flatten(new).values, p, radius)
        out = nn.state_from_flat(q, new) if math.isfinite(radius) else new
        if monitor is not None:
            monitor(float(np.linalg.norm(nn.flatten(out).values - p)))
        return out

    return local_sgd(start, poisoned.x, poisoned.y, iters, plr, batch, rng, post_step=project)


# ---------------------------------------------------------------- Neurotoxin

def mask_size(k: float, d: int) -> int:
    """Frozen-coordinate count: ``round(k * d)`` with halves rounded up."""
    return int(math.floor(k * d + 0.5))


def neurotoxin_mask(benign_grad: np.ndarray, k: float) -> np.ndarray:
    """Boolean mask of the top-``k`` fraction of coordinates by gradient magnitude.

    Ties go to the lower coordinate index.
    """
    mag = np.abs(np.asarray(benign_grad, dtype=np.float64))
    order = np.argsort(-mag, kind="stable")
    mask = np.zeros(mag.size, dtype=bool)
    mask[order[:mask_size(k, mag.size)]] = True
    return mask


def benign_gradient(state: nn.ModelState, benign: Dataset) -> np.ndarray:
    """Full-batch cross-entropy gradient on ``benign`` as a flat vector."""
    if len(benign) == 0:
        raise ValueError("benign dataset is empty")
    idx = np.arange(len(benign)) if len(benign) > 1 else np.zeros(2, dtype=np.int64)
    logits, cache = nn.forward(state, benign.x[idx], "train")
    grads = nn.backprop(state, cache, nn.cross_entropy_grad(logits, benign.y[idx]))
    return nn.flatten(grads, state.arch).values


def train_neurotoxin(start: nn.ModelState, poisoned: Dataset, benign: Dataset, plr: float, iters: int,
                     k: float, batch: int, rng: np.random.Generator) -> nn.ModelState:
    """Backdoor training restricted to coordinates the benign gradient barely uses."""
    if not 0.0 < k < 1.0:
        raise ValueError("k must lie in (0, 1)")
    frozen = neurotoxin_mask(benign_gradient(start, benign), k)
    keep = (~frozen).astype(np.float64)

    def hook(state, grads):
        flat = nn.flatten(grads, state.arch).values * keep
        return list(nn.unflatten(flat, state.arch))

    out = local_sgd(start, poisoned.x, poisoned.y, iters, plr, batch, rng, grad_hook=hook)
    # a zero gradient leaves the coordinate unchanged; restore anyway so the contract is bitwise
    values = nn.flatten(out).values
    values[frozen] = nn.flatten(start).values[frozen]
    return nn.state_from_flat(values, out)


# ---------------------------------------------------------------- Chameleon

def supcon_loss(z: np.ndarray, labels, temperature: float = 0.1) -> tuple[float, np.ndarray]:
    """Supervised contrastive loss of raw features ``z`` and its gradient w.r.t. ``z``.

    Features are l2-normalized; anchors without a positive are skipped.
    """
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(z)
    norms = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), 1e-12)
    u = z / norms
    s = u @ u.T / temperature
    off = ~np.eye(n, dtype=bool)
    pos = (labels[:, None] == labels[None, :]) & off
    npos = pos.sum(axis=1)
    anchors = npos > 0
    if not anchors.any():
        return 0.0, np.zeros_like(z)
    s_masked = np.where(off, s, -np.inf)
    mx = s_masked.max(axis=1, keepdims=True)
    ex = np.exp(s_masked - mx)
    denom = ex.sum(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(denom[:, 0])
    pos_mean = np.where(pos, s, 0.0).sum(axis=1) / np.maximum(npos, 1)
    per_anchor = lse - pos_mean
    count = anchors.sum()
    loss = float(per_anchor[anchors].sum() / count)
    ds = (ex / denom - pos / np.maximum(npos, 1)[:, None]) * anchors[:, None] / count
    du = (ds + ds.T) @ u / temperature
    dz = (du - u * np.sum(u * du, axis=1, keepdims=True)) / norms
    return loss, dz


def train_chameleon(start: nn.ModelState, poisoned: Dataset, plr: float, iters: int, batch: int,
                    rng: np.random.Generator, temperature: float = 0.1,
                    classifier_iters: int | None = None) -> nn.ModelState:
    """Stage 1 trains the encoder with a contrastive loss; stage 2 trains only the classifier."""
    arch = start.arch
    if arch.layers[-1].kind != "dense":
        raise nn.ShapeError("chameleon needs a dense final layer as the classifier")
    if len(poisoned) == 0:
        raise ValueError("poisoned dataset is empty")
    ci = arch.classifier_index
    state = start
    for _ in range(iters):
        idx = sample_batch(len(poisoned), batch, rng)
        feats, cache = nn.forward(state, poisoned.x[idx], "train", stop=ci)
        _, dz = supcon_loss(feats, poisoned.y[idx], temperature)
        grads = nn.backprop(state, cache, dz)
        new = nn.sgd_step(state, grads, plr)
        state = nn.ModelState(arch, new.params, cache.bn_stats)

    # stage 2: encoder (weights and running stats) frozen; only the head moves
    head = state.params[ci]
    W, b = head["W"].copy(), head["b"].copy()
    for _ in range(iters if classifier_iters is None else classifier_iters):
        idx = sample_batch(len(poisoned), batch, rng)
        feats, _ = nn.forward(state, poisoned.x[idx], "eval", stop=ci)
        d = nn.cross_entropy_grad(feats @ W.T + b, poisoned.y[idx])
        W = W - plr * (d.T @ feats)
        b = b - plr * d.sum(axis=0)
    params = list(state.params)
    params[ci] = {"W": W, "b": b}
    return state.with_params(params)


# ---------------------------------------------------------------- 3DFed

def zero_sum_masks(count: int, dim: int, scale: float, seed: int) -> list[np.ndarray]:
    """``count`` Gaussian masks whose sequential sum is exactly the zero vector."""
    if count < 1:
        raise ValueError("need at least one mask")
    if count == 1:
        if scale > 0:
            raise ValueError("a single-member cohort cannot carry zero-sum noise")
        return [np.zeros(dim)]
    r = rngmod.stream(seed, "3dfed-masks")
    masks = [scale * r.standard_normal(dim) for _ in range(count - 1)]
    partial = np.zeros(dim)
    for m in masks:
        partial = partial + m
    masks.append(-partial)
    return masks


def train_3dfed(cohort: MaliciousCohort, start: nn.ModelState, poisoned: dict, cfg: AttackConfig,
                benign: dict | None = None, round_index: int = 0) -> list[ClientUpdate]:
    """Joint training of a 3DFed cohort.

    The last ``decoy_count`` cohort members upload benign-style decoys; the
    rest train ``L_task + lambda_c * ||w - start||`` on their poisoned data
    (proximal SGD: the norm term is applied through its proximal map).
    Noise masks are added to the backdoor deltas and cancel in their sum.
    """
    ids = tuple(cohort.client_ids)
    tc = cfg.threedfed
    n_real = len(ids) - tc.decoy_count
    if n_real < 1:
        raise ValueError("3DFed cohort needs at least one backdoor member besides the decoys")
    anchor = nn.flatten(start).values
    masks = zero_sum_masks(n_real, anchor.size, tc.noise_scale, cohort.mask_seed)
    out = []
    for j, cid in enumerate(ids):
        r = rngmod.stream(cohort.mask_seed, "3dfed-train", round_index, cid)
        if j < n_real:
            ds = poisoned[cid]
            trained = local_sgd(start, ds.x, ds.y, cfg.iterations, cfg.plr, cfg.batch, r,
                                post_step=l2_prox(anchor, cfg.plr * tc.lambda_c))
            upd = make_update(cid, start, trained)
            out.append(upd.with_vector(upd.vector + masks[j]))
        else:
            ds = benign[cid] if benign and cid in benign else poisoned[cid]
            trained = local_sgd(start, ds.x, ds.y, cfg.iterations, cfg.plr, cfg.batch, r)
            out.append(make_update(cid, start, trained))
    return out


# ---------------------------------------------------------------- scaling & adaptive

def scale_update(update: ClientUpdate, gamma: float) -> ClientUpdate:
    if gamma < 1.0:
        raise ValueError("gamma must be >= 1")
    return update.with_vector(update.vector * gamma)


def adaptive_attack(start: nn.ModelState, benign: Dataset, poisoned: Dataset, cfg: AttackConfig,
                    rng: np.random.Generator) -> nn.ModelState:
    """Benign warm-up on the attacker's own data, then vanilla poisoning."""
    if cfg.pretrain is None:
        raise ValueError("adaptive attack needs a pretrain config")
    warm = local_sgd(start, benign.x, benign.y, cfg.pretrain.iterations, cfg.pretrain.lr, cfg.batch, rng) \
        if cfg.pretrain.iterations else start
    return train_vanilla(warm, poisoned, cfg.plr, cfg.iterations, cfg.batch, rng)


# ---------------------------------------------------------------- DBA

def assign_dba_parts(cohort_ids, spec: TriggerSpec) -> dict:
    """Round-robin split of a global pixel pattern across the cohort."""
    ids = list(cohort_ids)
    if not ids:
        raise ValueError("empty cohort")
    if spec.kind not in ("pixel", "dba_local") or not spec.pixels:
        raise ValueError("DBA needs a global pixel pattern")
    parts = min(len(ids), len(spec.pixels))
    return {cid: replace(spec, kind="dba_local", part_index=j % parts, part_count=parts)
            for j, cid in enumerate(ids)}


def run_attack(cfg: AttackConfig, start: nn.ModelState, poisoned: Dataset, benign: Dataset,
               rng: np.random.Generator) -> nn.ModelState:
    """Dispatch a single-client attack algorithm (3DFed is cohort-level)."""
    if cfg.pretrain is not None and cfg.algorithm == "vanilla":
        return adaptive_attack(start, benign, poisoned, cfg, rng)
    if cfg.algorithm == "vanilla":
        return train_vanilla(start, poisoned, cfg.plr, cfg.iterations, cfg.batch, rng)
    if cfg.algorithm == "pgd":
        return train_pgd(start, poisoned, cfg.plr, cfg.iterations, cfg.pgd_radius, cfg.batch, rng)
    if cfg.algorithm == "neurotoxin":
        return train_neurotoxin(start, poisoned, benign, cfg.plr, cfg.iterations, cfg.neurotoxin_k, cfg.batch, rng)
    if cfg.algorithm == "chameleon":
        return train_chameleon(start, poisoned, cfg.plr, cfg.iterations, cfg.batch, rng, cfg.chameleon_temperature)
    raise ValueError(f"{cfg.algorithm} is not a single-client attack")
