"""End-to-end acceptance checks, one test group per criterion.

The federated criteria (6, 8, 9) share cached desk runs of
``configs/desk_indicator.toml``; the whole module takes several minutes on a
single core.
"""

import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from fedbackdoor import attacks, data, engine
from fedbackdoor import config as C
from fedbackdoor import rng as R
from fedbackdoor.cli import run_one
from fedbackdoor.defenses import (
    aggregate_accepted,
    defend_flame,
    defend_multikrum,
    flame_sigma,
    indicator_inject,
    indicator_inspect,
    norm_clip,
)
from fedbackdoor.defenses.indicator import indicator_alphas
from fedbackdoor.metrics import read_results
from fedbackdoor.nn import model as nn
from fedbackdoor.training import local_sgd
from fedbackdoor.updates import ClientUpdate, DefenseVerdict, make_update, reconstruct
from oracles import brute_force_multikrum, fd_gradients, rel_error

DESK = Path(__file__).resolve().parents[1] / "configs" / "desk_indicator.toml"
SEEDS = (1, 2, 3)


def flat(s):
    return nn.flatten(s).values


def as_updates(vectors):
    return [ClientUpdate(i, nn.FlatVector(np.asarray(v, dtype=float), ()), nn.BnStats((), ()))
            for i, v in enumerate(vectors)]


# ---------------------------------------------------------------- 1

@pytest.mark.criterion(1, "backward matches central finite differences on every layer kind, 20 seeds, < 30 s")
def test_gradient_suite():
    archs = [
        nn.ModelArch((nn.Dense(4, 5), nn.BatchNorm(5), nn.ReLU(), nn.Dense(5, 3)), 3, (4,)),
        nn.ModelArch((nn.Conv2d(2, 3, 3, 2), nn.BatchNorm(3), nn.ReLU(), nn.Flatten(), nn.Dense(12, 3)), 3, (2, 5, 5)),
        nn.ModelArch((nn.Conv2d(1, 2, 2, 1), nn.ReLU(), nn.Flatten(), nn.Dense(18, 6), nn.BatchNorm(6),
                      nn.Dense(6, 4)), 4, (1, 4, 4)),
    ]
    kinds = {type(l).__name__ for a in archs for l in a.layers}
    assert kinds == {"Dense", "Conv2d", "BatchNorm", "ReLU", "Flatten"}
    start = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(seed)
        for arch in archs:
            state = nn.init_state(arch, r)
            x = r.normal(size=(6,) + arch.input_shape)
            y = r.integers(0, arch.num_classes, 6)
            _, cache_ = nn.forward(state, x, "train")
            analytic = nn.backward(state, cache_, y)
            for a, n in zip(analytic, fd_gradients(state, x, y)):
                for k in a:
                    worst = max(worst, rel_error(a[k], n[k]))
    elapsed = time.perf_counter() - start
    print(f"criterion 1: worst relative error {worst:.2e} in {elapsed:.1f}s")
    assert worst < 1e-4
    assert elapsed < 30.0


# ---------------------------------------------------------------- 2

@pytest.mark.criterion(2, "BN statistics get/set is bit-lossless and the broadcast model keeps G^t's statistics")
def test_bn_swap_round_trip():
    seed = 4
    train = data.gen_synthetic(10, 8, 60, seed)
    g = nn.init_state(nn.mlp((1, 8, 8), 10), R.stream(seed, "init"))
    g = local_sgd(g, train.x, train.y, 50, 0.05, 64, R.stream(seed, "pre"))
    for s in range(5):
        r = np.random.default_rng(s)
        stats = nn.BnStats(tuple(r.normal(size=m.shape) for m in g.bn_stats.means),
                           tuple(r.uniform(0.1, 3, size=v.shape) for v in g.bn_stats.vars), g.bn_stats.momentum)
        assert nn.get_bn_stats(nn.set_bn_stats(g, stats)).equals(stats)
    d_o = data.build_indicator_dataset(data.gen_noise(300, 8, seed), 200, 10, seed)
    w_ind, st = indicator_inject(g, d_o, 0.1, 30, 0.1, 64, R.stream(seed, "inject"))
    for a, b in zip(w_ind.bn_stats.means + w_ind.bn_stats.vars, g.bn_stats.means + g.bn_stats.vars):
        assert a.tobytes() == b.tobytes()
    assert st.main_stats.equals(g.bn_stats)
    assert not st.indicator_stats.equals(g.bn_stats)


# ---------------------------------------------------------------- 3

@pytest.mark.criterion(3, "Multi-Krum equals brute force; FLAME sigma closed form; clip and PGD are idempotent projections")
def test_oracle_equivalence():
    r = np.random.default_rng(0)
    cells = 0
    for n in range(3, 7):
        for _ in range(4):
            vecs = r.normal(size=(n, 4)) * r.uniform(0.1, 5, (n, 1))
            for f in range(n):
                if 2 * f + 2 >= n:
                    continue
                for m in range(1, n + 1):
                    assert defend_multikrum(as_updates(vecs), f, m).accepted == set(brute_force_multikrum(vecs, f, m))
                    cells += 1
    assert cells > 0
    for bound, eps, delta in [(1.0, 1.0, 0.05), (3.0, 3705.0, 0.001), (0.25, 0.5, 1e-5)]:
        closed = bound / eps * math.sqrt(2.0 * math.log(1.25 / delta))
        assert abs(flame_sigma(bound, eps, delta) - closed) <= 1e-12 * max(1.0, closed)
    for _ in range(50):
        v = r.normal(size=7) * r.uniform(0.01, 20)
        bound = r.uniform(0.1, 5)
        once = norm_clip(as_updates([v]), bound)[0].vector
        twice = norm_clip([norm_clip(as_updates([v]), bound)[0]], bound)[0].vector
        assert np.linalg.norm(once) <= bound * (1 + 1e-12)
        np.testing.assert_allclose(twice, once, rtol=1e-15, atol=0)
        c = r.normal(size=7)
        p = attacks.project_l2(v, c, bound)
        assert np.linalg.norm(p - c) <= bound * (1 + 1e-12)
        np.testing.assert_allclose(attacks.project_l2(p, c, bound), p, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------- 4

@pytest.fixture(scope="module")
def attack_setup():
    ds = data.gen_synthetic(4, 6, 30, 3)
    state = nn.init_state(nn.mlp((1, 6, 6), 4, 16), R.stream(3, "init"))
    return ds, state, data.build_poison_dataset(ds, data.pixel_trigger(1), 40, 3)


@pytest.mark.criterion(4, "Neurotoxin freeze and cardinality, 3DFed zero-sum noise, Chameleon encoder freeze, DBA composition")
def test_attack_invariants(attack_setup):
    ds, state, poisoned = attack_setup
    d = flat(state).size
    for k in (0.1, 0.25, 0.5):
        out = attacks.train_neurotoxin(state, poisoned, ds, 0.1, 8, k, 16, np.random.default_rng(1))
        frozen = attacks.neurotoxin_mask(attacks.benign_gradient(state, ds), k)
        assert frozen.sum() in (math.floor(k * d), math.ceil(k * d))
        assert flat(out)[frozen].tobytes() == flat(state)[frozen].tobytes()

    cohort = attacks.MaliciousCohort((2, 5, 9), 1, mask_seed=11)
    pois = {c: poisoned for c in cohort.client_ids}
    masks = attacks.zero_sum_masks(3, d, 0.5, 11)
    total = np.zeros(d)
    for m in masks:
        total = total + m
    assert np.array_equal(total, np.zeros(d))
    noisy = attacks.train_3dfed(cohort, state, pois, attacks.AttackConfig(
        iterations=3, batch=16, threedfed=attacks.ThreeDFedConfig(0.1, 0.5, 0)))
    quiet = attacks.train_3dfed(cohort, state, pois, attacks.AttackConfig(
        iterations=3, batch=16, threedfed=attacks.ThreeDFedConfig(0.1, 0.0, 0)))
    everyone = DefenseVerdict.partition(noisy, [u.client_id for u in noisy])
    agg_noisy = aggregate_accepted(state, noisy, everyone, np.random.default_rng(0))
    agg_quiet = aggregate_accepted(state, quiet, everyone, np.random.default_rng(0))
    np.testing.assert_allclose(flat(agg_noisy), flat(agg_quiet), rtol=0, atol=1e-12)

    head_only = attacks.train_chameleon(state, poisoned, 0.05, 6, 16, np.random.default_rng(5), classifier_iters=0)
    full = attacks.train_chameleon(state, poisoned, 0.05, 6, 16, np.random.default_rng(5))
    for i in range(state.arch.classifier_index):
        for name in full.params[i]:
            assert full.params[i][name].tobytes() == head_only.params[i][name].tobytes()
    assert full.bn_stats.equals(head_only.bn_stats)

    spec = data.TriggerSpec("pixel", 0, pixels=data.corner_pattern(3))
    x = np.random.default_rng(2).uniform(size=(5, 1, 6, 6))
    for size in (1, 2, 4, 9):
        parts = attacks.assign_dba_parts(list(range(size)), spec)
        composed = x
        for part in parts.values():
            composed, _ = data.apply_trigger(composed, part)
        assert np.array_equal(composed, data.apply_trigger(x, spec)[0])
        assert sorted(p for s in parts.values() for p in s.local_pixels()) == sorted(spec.pixels)


# ---------------------------------------------------------------- 5

def _forgetting_trial(seed):
    train = data.gen_synthetic(10, 8, 100, seed, noise=0.6)
    g = nn.init_state(nn.mlp((1, 8, 8), 10, 64), R.stream(seed, "init"))
    g = local_sgd(g, train.x, train.y, 200, 0.05, 64, R.stream(seed, "pre"))
    d_o = data.build_indicator_dataset(data.gen_noise(1000, 8, seed), 200, 10, seed)
    w, st = indicator_inject(g, d_o, 0.1, 200, 0.1, 64, R.stream(seed, "inject"), 95.0)
    injected = indicator_alphas(nn.set_bn_stats(w, st.indicator_stats), d_o, 10).max()
    benign = local_sgd(w, train.x, train.y, 200, 0.05, 64, R.stream(seed, "benign"))
    poisoned = data.build_poison_dataset(train, data.pixel_trigger(3), 1000, seed)
    backdoor = local_sgd(w, poisoned.x, poisoned.y, 200, 0.05, 64, R.stream(seed, "backdoor"))
    a_benign = indicator_alphas(reconstruct(w, make_update(0, w, benign), st.indicator_stats), d_o, 10).max()
    a_backdoor = indicator_alphas(reconstruct(w, make_update(1, w, backdoor), st.indicator_stats), d_o, 10).max()
    return injected, a_benign, a_backdoor


@pytest.mark.criterion(5, "benign training forgets the indicator task, backdoor training maintains it (>= 80% of 20 seeds, < 5 min)")
def test_forgetting_and_maintenance():
    start = time.perf_counter()
    res = np.array([_forgetting_trial(s) for s in range(20)])
    elapsed = time.perf_counter() - start
    injected = res[:, 0] >= 95
    forgot = np.mean(res[injected, 1] < 95)
    kept = np.mean(res[injected, 2] >= 95)
    print(f"criterion 5: injected {injected.sum()}/20, benign forgot {forgot:.0%}, backdoor kept {kept:.0%}, {elapsed:.0f}s")
    assert injected.all()
    assert forgot >= 0.8
    assert kept >= 0.8
    assert elapsed < 300


# ---------------------------------------------------------------- desk runs

@pytest.fixture(scope="session")
def desk_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("desk")


_RUNS = {}


def desk_run(root, seed, workers=1, **dotted):
    key = (seed, workers, tuple(sorted(dotted.items())))
    if key not in _RUNS:
        raw = C.load_raw(DESK)
        for k, v in dotted.items():
            raw = C.set_dotted(raw, k, v)
        out = root / f"run{len(_RUNS)}"
        start = time.perf_counter()
        run_one(raw, out, seed, workers)
        _RUNS[key] = (read_results(out), time.perf_counter() - start, out)
    return _RUNS[key]


@pytest.mark.slow
@pytest.mark.criterion(6, "desk FL run: indicator TPR >= 70, FPR <= 40, BA <= 30; undefended BA >= 60 (3 seeds, <= 10 min each)")
@pytest.mark.parametrize("seed", SEEDS)
def test_end_to_end_detection(desk_dir, seed):
    ind, t_ind, _ = desk_run(desk_dir, seed)
    none, t_none, _ = desk_run(desk_dir, seed, **{"defense.name": "none"})
    print(f"criterion 6 seed {seed}: indicator {ind.triplet()} in {t_ind:.0f}s, none BA {none.BA:.1f} in {t_none:.0f}s")
    assert ind.counts["total_malicious"] == 50
    assert ind.TPR >= 70.0
    assert ind.FPR <= 40.0
    assert ind.BA <= 30.0
    assert none.BA >= 60.0
    assert max(t_ind, t_none) <= 600


# ---------------------------------------------------------------- 7

def _pinned_instance(seed):
    cfg = C.from_dict(C.set_dotted(C.load_raw(DESK), "master_seed", seed))
    ctx, g = engine.setup(cfg)
    t = cfg.defense.start_round
    for r in range(1, t):
        g, _ = engine.run_round(r, g, ctx)
    ic = cfg.indicator
    w_ind, st = indicator_inject(g, ctx.indicator_data, ic.lam, ic.iterations, ic.lr, ic.batch,
                                 R.stream(seed, "indicator", t), ic.epsilon)
    mal = ctx.registry.corrupted
    selected = engine.select_clients(cfg.num_clients, cfg.clients_per_round, R.derive_seed(seed, "round", t), mal)
    benign = engine._train_clients(ctx, t, w_ind, tuple(c for c in selected if c not in mal), ())
    return cfg, ctx, t, w_ind, st, mal, benign


@pytest.mark.slow
@pytest.mark.criterion(7, "FLAME flags a gamma=10 replacement but not a plr-0.01 update; the indicator flags both")
@pytest.mark.parametrize("seed", SEEDS)
def test_statistical_blind_spot(seed):
    cfg, ctx, t, w_ind, st, mal, benign = _pinned_instance(seed)
    ref = flat(w_ind)
    verdicts = {}
    for name, change in (("replacement", dict(plr=0.05, scale_gamma=10.0)), ("plr-0.01", dict(plr=0.01))):
        variant = dataclasses.replace(ctx, attack_cfg=dataclasses.replace(ctx.attack_cfg, **change))
        bad = engine._train_clients(variant, t, w_ind, mal, mal)
        updates = sorted(benign + bad, key=lambda u: u.client_id)
        flame = defend_flame(updates, cfg.defense.flame_eps, cfg.defense.flame_delta, ref)
        ind = indicator_inspect(st, updates)
        verdicts[name] = (set(mal) <= flame.flagged, set(mal) <= ind.flagged)
        print(f"criterion 7 seed {seed} {name}: FLAME flags {verdicts[name][0]}, indicator flags {verdicts[name][1]}"
              f" (alpha {ind.scores[mal[0]]:.1f}, norm {bad[0].norm:.2f})")
    assert verdicts["replacement"] == (True, True)
    assert verdicts["plr-0.01"] == (False, True)


# ---------------------------------------------------------------- 8

NCD_BOUND = 1.0


@pytest.mark.slow
@pytest.mark.criterion(8, "adaptive pre-training lowers indicator TPR; NCD restores it within 15 pp (3-seed mean)")
def test_adaptive_attack_and_ncd(desk_dir):
    vanilla, adaptive, clipped = [], [], []
    for seed in SEEDS:
        vanilla.append(desk_run(desk_dir, seed)[0].TPR)
        adaptive.append(desk_run(desk_dir, seed, **{"attack.adaptive": True})[0].TPR)
        clipped.append(desk_run(desk_dir, seed, **{"attack.adaptive": True, "defense.ncd_bound": NCD_BOUND})[0].TPR)
    v, a, c = np.mean(vanilla), np.mean(adaptive), np.mean(clipped)
    print(f"criterion 8: TPR vanilla {vanilla} mean {v:.1f}; adaptive {adaptive} mean {a:.1f}; "
          f"adaptive+NCD {clipped} mean {c:.1f}")
    assert a < v
    assert c >= v - 15.0


# ---------------------------------------------------------------- 9

@pytest.mark.slow
@pytest.mark.criterion(9, "identical config and seed give byte-identical result logs at 1 and 2 workers")
def test_determinism_across_workers(desk_dir):
    _, _, one = desk_run(desk_dir, 1)
    _, _, two = desk_run(desk_dir, 1, workers=2)
    for name in ("log.jsonl", "summary.csv", "rounds.csv", "summary.txt"):
        assert (one / name).read_bytes() == (two / name).read_bytes(), name
