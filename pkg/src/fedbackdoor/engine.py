"""FedAVG orchestration: client selection, local training, defense hook, round records."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks, data
from . import rng as rngmod
from .config import ExperimentConfig, default_krum_f, validate
from .defenses import (
    FoolsgoldHistory,
    aggregate_accepted,
    defend_deepsight,
    defend_flame,
    defend_foolsgold,
    defend_multikrum,
    defend_rflbat,
    indicator_inject,
    indicator_inspect,
    norm_clip,
)
from .nn import model as nn
from .training import local_sgd
from .updates import ClientUpdate, DefenseVerdict, make_update


@dataclass(frozen=True)
class RoundRecord:
    round: int
    selected: tuple
    malicious: tuple
    verdict: DefenseVerdict
    metrics: dict  # {"MA", "BA", "alpha_m": {id: float} | None}
    wall_time: float = field(default=0.0, compare=False)

    def to_dict(self) -> dict:
        """Deterministic view (wall time excluded)."""
        m = dict(self.metrics)
        if m.get("alpha_m") is not None:
            m["alpha_m"] = {str(k): float(v) for k, v in sorted(m["alpha_m"].items())}
        return {"round": self.round, "selected": list(self.selected), "malicious": list(self.malicious),
                "verdict": self.verdict.to_dict(), "metrics": m}


@dataclass(frozen=True)
class ClientRegistry:
    """Per-client role and data; roles are fixed for the run."""

    roles: tuple  # "benign" | "corrupted"
    datasets: tuple
    poisoned: dict  # corrupted id -> poisoned Dataset
    triggers: dict  # corrupted id -> TriggerSpec used for its poison
    master_seed: int

    @property
    def corrupted(self) -> tuple:
        return tuple(i for i, r in enumerate(self.roles) if r == "corrupted")

    def stream_seed(self, round_index: int, client_id: int) -> tuple:
        return (self.master_seed, "local", round_index, client_id)


@dataclass
class EvalSets:
    clean_x: np.ndarray
    clean_y: np.ndarray
    backdoor_x: np.ndarray
    target_label: int | None


@dataclass
class Context:
    """Everything a round needs besides the global model. ``history`` mutates between rounds."""

    config: ExperimentConfig
    registry: ClientRegistry
    evals: EvalSets
    attack_cfg: attacks.AttackConfig | None
    indicator_data: data.IndicatorDataset | None
    history: FoolsgoldHistory = field(default_factory=FoolsgoldHistory)
    pool: ProcessPoolExecutor | None = None


# ---------------------------------------------------------------- selection & local training

def select_clients(num_clients: int, count: int, round_seed: int, forced=()) -> tuple:
    """Uniform sample without replacement; ``forced`` ids are always included."""
    if count > num_clients:
        raise ValueError(f"cannot select {count} of {num_clients} clients")
    forced = sorted(set(int(i) for i in forced))
    if len(forced) > count:
        raise ValueError("more forced clients than selection slots")
    rest = np.setdiff1d(np.arange(num_clients), forced)
    r = rngmod.stream(round_seed, "select")
    picked = r.choice(rest, count - len(forced), replace=False) if count > len(forced) else []
    return tuple(sorted(forced + [int(i) for i in picked]))


def benign_local_train(start: nn.ModelState, ds: data.Dataset, iterations: int, lr: float, batch: int,
                       rng: np.random.Generator, client_id: int = 0) -> ClientUpdate:
    if len(ds) == 0:
        raise ValueError("client dataset is empty")
    trained = local_sgd(start, ds.x, ds.y, iterations, lr, batch, rng)
    return make_update(client_id, start, trained)


def _client_job(args) -> ClientUpdate:
    kind, cid, start, ds, poisoned, cfg, benign_cfg, seed = args
    r = rngmod.stream(*seed)
    if kind == "benign":
        return benign_local_train(start, ds, benign_cfg.local_iterations, benign_cfg.lr, benign_cfg.batch, r, cid)
    trained = attacks.run_attack(cfg, start, poisoned, ds, r)
    upd = make_update(cid, start, trained)
    return attacks.scale_update(upd, cfg.scale_gamma) if cfg.scale_gamma != 1.0 else upd


# ---------------------------------------------------------------- setup

def build_datasets(cfg: ExperimentConfig) -> tuple[data.Dataset, data.Dataset]:
    d = cfg.dataset
    if d.kind == "synthetic":
        seed = cfg.master_seed if d.seed is None else d.seed
        train = data.gen_synthetic(d.num_classes, d.dim, d.per_class, seed, d.noise, split=0, margin=d.margin)
        test = data.gen_synthetic(d.num_classes, d.dim, d.test_per_class, seed, d.noise, split=1, margin=d.margin)
        return train, test
    train = data.load_idx(d.train_images, d.train_labels, d.num_classes, "idx-train")
    test = data.load_idx(d.test_images, d.test_labels, d.num_classes, "idx-test")
    return train, replace(test, label_space=train.label_space)


def build_arch(cfg: ExperimentConfig, sample_shape: tuple) -> nn.ModelArch:
    if cfg.model.arch == "mlp":
        return nn.mlp(sample_shape, cfg.dataset.num_classes, cfg.model.hidden)
    return nn.small_cnn(sample_shape, cfg.dataset.num_classes, cfg.model.channels)


def _trigger_and_holdout(cfg: ExperimentConfig, train: data.Dataset, test: data.Dataset):
    """Global trigger spec plus the triggered evaluation inputs for BA."""
    a, t = cfg.attack, cfg.attack.trigger
    target = a.target_label
    keep = test.y != target
    if t.kind == "pixel":
        spec = data.TriggerSpec("pixel", target, pixels=data.corner_pattern(t.size, t.value, t.row, t.col))
    elif t.kind == "blend":
        spec = data.blend_trigger(target, train.sample_shape, cfg.master_seed, t.ratio)
    else:
        if t.kind == "edge":
            src = data.gen_synthetic(cfg.dataset.num_classes, train.sample_shape[1:], -(-t.pool_size // cfg.dataset.num_classes),
                                     rngmod.derive_seed(cfg.master_seed, "edge-source"), cfg.dataset.noise, name="edge-source")
            src = src.subset(rngmod.stream(cfg.master_seed, "edge-order").permutation(len(src))[:t.pool_size])
        else:
            seed = cfg.master_seed if cfg.dataset.seed is None else cfg.dataset.seed
            src = data.gen_synthetic(cfg.dataset.num_classes, train.sample_shape[1:], t.pool_size, seed,
                                     cfg.dataset.noise, split=2)
            src = src.subset(np.flatnonzero(src.y == t.source_class)) if cfg.dataset.kind == "synthetic" else src
            # the semantic feature: a faint fixed texture only these reserved samples carry
            texture = rngmod.stream(cfg.master_seed, "semantic-feature").uniform(-0.5, 0.5, train.sample_shape)
            src = replace(src, x=src.x + texture)
        pool = data.make_edge_pool(src, target, train.sample_shape)
        half = len(pool) // 2
        attacker, holdout = pool.subset(np.arange(half)), pool.subset(np.arange(half, len(pool)))
        if t.kind == "edge":
            spec = data.TriggerSpec("edge", target, pool=attacker)
        else:
            spec = data.TriggerSpec("semantic", target, pool=attacker, indices=tuple(range(len(attacker))))
        return spec, holdout.x
    x_bd, _ = data.apply_trigger(test.x[keep], spec)
    return spec, x_bd


def setup(cfg: ExperimentConfig) -> tuple[Context, nn.ModelState]:
    validate(cfg)
    train, test = build_datasets(cfg)
    arch = build_arch(cfg, train.sample_shape)
    pseed = cfg.master_seed if cfg.partition.seed is None else cfg.partition.seed
    plan = data.dirichlet_partition(train, cfg.num_clients, cfg.partition.alpha, pseed)
    shards = tuple(train.subset(idx) for idx in plan.assignments)

    roles = ["benign"] * cfg.num_clients
    poisoned, triggers = {}, {}
    attack_cfg = None
    target = None
    backdoor_x = np.zeros((0,) + train.sample_shape)
    if cfg.attack.enabled:
        a = cfg.attack
        target = a.target_label
        cohort = rngmod.stream(cfg.master_seed, "cohort").choice(cfg.num_clients, a.cohort_size, replace=False)
        cohort = sorted(int(c) for c in cohort)
        spec, backdoor_x = _trigger_and_holdout(cfg, train, test)
        specs = attacks.assign_dba_parts(cohort, spec) if a.dba else {c: spec for c in cohort}
        for c in cohort:
            roles[c] = "corrupted"
            triggers[c] = specs[c]
            poisoned[c] = data.build_poison_dataset(shards[c], specs[c], a.poison_count,
                                                    rngmod.derive_seed(cfg.master_seed, "poison", c))
        attack_cfg = attacks.AttackConfig(
            algorithm=a.algorithm, trigger=spec, plr=a.plr, iterations=a.iterations, poison_count=a.poison_count,
            batch=a.batch, pgd_radius=a.pgd_radius, neurotoxin_k=a.neurotoxin_k, scale_gamma=a.scale_gamma,
            pretrain=attacks.PretrainConfig(a.pretrain.iterations, a.pretrain.lr) if a.adaptive else None,
            threedfed=attacks.ThreeDFedConfig(a.threedfed.lambda_c, a.threedfed.noise_scale, a.threedfed.decoy_count),
        )
    registry = ClientRegistry(tuple(roles), shards, poisoned, triggers, cfg.master_seed)

    ind_data = None
    if cfg.defense.name == "indicator":
        ic = cfg.indicator
        if ic.source == "noise":
            src = data.gen_noise(max(ic.size, 1), train.sample_shape, rngmod.derive_seed(cfg.master_seed, "indicator-source"),
                                 margin=cfg.dataset.margin)
        else:
            src = data.gen_synthetic(cfg.dataset.num_classes, train.sample_shape[1:], -(-ic.size // cfg.dataset.num_classes),
                                     rngmod.derive_seed(cfg.master_seed, "indicator-source"), cfg.dataset.noise,
                                     name="indicator-source", margin=cfg.dataset.margin)
        ind_data = data.build_indicator_dataset(src, ic.size, cfg.dataset.num_classes,
                                                rngmod.derive_seed(cfg.master_seed, "indicator-labels"),
                                                benign_space=train.label_space, force=ic.force)

    evals = EvalSets(test.x, test.y, backdoor_x, target)
    ctx = Context(cfg, registry, evals, attack_cfg, ind_data)
    initial = nn.init_state(arch, rngmod.stream(cfg.master_seed, "init"))
    return ctx, initial


# ---------------------------------------------------------------- rounds

def _defend(ctx: Context, t: int, updates: list, w_ind: nn.ModelState, ind_state) -> DefenseVerdict:
    df = ctx.config.defense
    n = len(updates)
    if df.name == "none" or t < df.start_round:
        return DefenseVerdict.partition(updates, [u.client_id for u in updates])
    if df.name == "indicator":
        return indicator_inspect(ind_state, updates, df.ncd_bound)
    if df.name == "multikrum":
        f = default_krum_f(n) if df.multikrum_f is None else df.multikrum_f
        return defend_multikrum(updates, f, n - f if df.multikrum_m is None else df.multikrum_m)
    if df.name == "deepsight":
        return defend_deepsight(updates, w_ind, df.deepsight_tau, df.deepsight_probes,
                                rngmod.derive_seed(ctx.config.master_seed, "deepsight", t))
    if df.name == "foolsgold":
        ctx.history.add(updates)
        return defend_foolsgold(updates, ctx.history)
    if df.name == "rflbat":
        return defend_rflbat(updates, df.rflbat_eps1, df.rflbat_k)
    if df.name == "flame":
        ref = nn.flatten(w_ind).values if df.flame_on_models else None
        return defend_flame(updates, df.flame_eps, df.flame_delta, ref)
    clipped = norm_clip(updates, df.clip_bound)
    return DefenseVerdict.partition(clipped, [u.client_id for u in clipped], updates=tuple(clipped))


def _train_clients(ctx: Context, t: int, w_ind: nn.ModelState, selected: tuple, malicious: tuple) -> list:
    cfg = ctx.config
    reg = ctx.registry
    jobs, joint = [], []
    for cid in selected:
        if cid in malicious and ctx.attack_cfg.algorithm == "threedfed":
            joint.append(cid)
            continue
        kind = "attack" if cid in malicious else "benign"
        jobs.append((kind, cid, w_ind, reg.datasets[cid], reg.poisoned.get(cid), ctx.attack_cfg, cfg.benign,
                     reg.stream_seed(t, cid)))
    if ctx.pool is not None and len(jobs) > 1:
        results = list(ctx.pool.map(_client_job, jobs))
    else:
        results = [_client_job(j) for j in jobs]
    if joint:
        cohort = attacks.MaliciousCohort(tuple(joint), ctx.attack_cfg.trigger.target_label,
                                         mask_seed=rngmod.derive_seed(cfg.master_seed, "3dfed", t))
        results += attacks.train_3dfed(cohort, w_ind, {c: reg.poisoned[c] for c in joint}, ctx.attack_cfg,
                                       {c: reg.datasets[c] for c in joint}, t)
    return sorted(results, key=lambda u: u.client_id)


def evaluate(ctx: Context, state: nn.ModelState) -> tuple[float, float | None]:
    ma = nn.accuracy(state, ctx.evals.clean_x, ctx.evals.clean_y)
    if ctx.evals.target_label is None or len(ctx.evals.backdoor_x) == 0:
        return ma, None
    pred = nn.predict(state, ctx.evals.backdoor_x)
    return ma, 100.0 * float(np.mean(pred == ctx.evals.target_label))


def run_round(t: int, global_state: nn.ModelState, ctx: Context) -> tuple[nn.ModelState, RoundRecord]:
    """One FedAVG round: inject, broadcast, train, defend, aggregate, evaluate."""
    if t < 1:
        raise ValueError("rounds are numbered from 1")
    start = time.perf_counter()
    cfg = ctx.config
    attacking = t in cfg.attack_window()
    forced = ctx.registry.corrupted if attacking else ()
    selected = select_clients(cfg.num_clients, cfg.clients_per_round,
                              rngmod.derive_seed(cfg.master_seed, "round", t), forced)
    malicious = tuple(c for c in selected if attacking and ctx.registry.roles[c] == "corrupted")

    ind_state = None
    w_ind = global_state
    if cfg.defense.name == "indicator" and t >= cfg.defense.start_round:
        ic = cfg.indicator
        w_ind, ind_state = indicator_inject(global_state, ctx.indicator_data, ic.lam, ic.iterations, ic.lr, ic.batch,
                                            rngmod.stream(cfg.master_seed, "indicator", t), ic.epsilon)

    updates = _train_clients(ctx, t, w_ind, selected, malicious)
    verdict = _defend(ctx, t, updates, w_ind, ind_state)
    nxt = aggregate_accepted(w_ind, updates, verdict, rngmod.stream(cfg.master_seed, "aggregate-noise", t))
    ma, ba = evaluate(ctx, nxt)
    alpha = dict(verdict.scores) if ind_state is not None else None
    rec = RoundRecord(t, selected, malicious, verdict, {"MA": ma, "BA": ba, "alpha_m": alpha},
                      time.perf_counter() - start)
    return nxt, rec


def run_experiment(cfg: ExperimentConfig, progress=None) -> tuple[list, nn.ModelState, Context]:
    """Run ``total_rounds`` rounds; returns ``(records, final_state, context)``."""
    ctx, state = setup(cfg)
    records = []
    pool = ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    ctx.pool = pool
    try:
        for t in range(1, cfg.total_rounds + 1):
            state, rec = run_round(t, state, ctx)
            records.append(rec)
            if progress is not None:
                progress(rec)
    finally:
        if pool is not None:
            pool.shutdown()
        ctx.pool = None
    return records, state, ctx
