import numpy as np
import pytest

from fedbackdoor import config as C
from fedbackdoor import engine
from fedbackdoor.nn import model as nn
from fedbackdoor.updates import reconstruct

SMALL = dict(master_seed=5, num_clients=12, clients_per_round=4, total_rounds=3,
             dataset=dict(dim=6, per_class=40, test_per_class=10),
             benign=dict(local_iterations=2, batch=16), model=dict(hidden=16))


def small(**over):
    raw = C.set_dotted(SMALL, "master_seed", SMALL["master_seed"])
    for key, value in over.items():
        raw = C.set_dotted(raw, key, value)
    return C.from_dict(raw)


def test_select_clients_contract():
    sel = engine.select_clients(20, 5, 1)
    assert len(sel) == 5 == len(set(sel)) and list(sel) == sorted(sel)
    assert engine.select_clients(20, 5, 1) == sel
    assert {3, 17} <= set(engine.select_clients(20, 5, 2, forced=(17, 3)))
    with pytest.raises(ValueError):
        engine.select_clients(4, 5, 1)
    with pytest.raises(ValueError):
        engine.select_clients(10, 1, 1, forced=(1, 2))


def test_selection_is_uniform():
    counts = np.zeros(10)
    for s in range(2000):
        counts[list(engine.select_clients(10, 3, s))] += 1
    # each id is picked with probability 0.3 over 2000 draws
    assert np.all(np.abs(counts / 2000 - 0.3) < 0.04)


def test_zero_rounds_returns_initial_model():
    cfg = small(total_rounds=0)
    records, final, _ = engine.run_experiment(cfg)
    _, initial = engine.setup(cfg)
    assert records == []
    assert np.array_equal(nn.flatten(final).values, nn.flatten(initial).values)


def test_round_zero_rejected():
    ctx, state = engine.setup(small())
    with pytest.raises(ValueError):
        engine.run_round(0, state, ctx)


def test_fedavg_is_the_mean_of_client_models():
    ctx, state = engine.setup(small())
    nxt, rec = engine.run_round(1, state, ctx)
    updates = engine._train_clients(ctx, 1, state, rec.selected, ())
    models = np.stack([nn.flatten(reconstruct(state, u)).values for u in updates])
    np.testing.assert_allclose(nn.flatten(nxt).values, models.mean(axis=0), rtol=0, atol=1e-12)
    assert rec.verdict.flagged == frozenset()
    for k in range(len(nxt.bn_stats.means)):
        np.testing.assert_allclose(nxt.bn_stats.means[k], np.mean([u.uploaded_bn_stats.means[k] for u in updates], axis=0))


def test_attack_window_forces_cohort():
    cfg = small(**{"total_rounds": 5, "attack.enabled": True, "attack.start_round": 2, "attack.duration": 2,
                   "attack.cohort_size": 2, "attack.iterations": 5, "attack.poison_count": 20})
    records, _, ctx = engine.run_experiment(cfg)
    cohort = set(ctx.registry.corrupted)
    assert len(cohort) == 2
    for r in records:
        if r.round in (2, 3):
            assert cohort <= set(r.selected) and set(r.malicious) == cohort
        else:
            assert r.malicious == ()
        assert r.metrics["BA"] is not None


def test_run_is_deterministic():
    cfg = small(**{"defense.name": "indicator", "indicator.size": 40, "indicator.iterations": 5,
                   "attack.enabled": True, "attack.start_round": 2, "attack.duration": 1, "attack.iterations": 5,
                   "attack.poison_count": 20})
    a, fa, _ = engine.run_experiment(cfg)
    b, fb, _ = engine.run_experiment(cfg)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert np.array_equal(nn.flatten(fa).values, nn.flatten(fb).values)
    for r in a:
        assert set(r.metrics["alpha_m"]) == set(r.selected)


@pytest.mark.parametrize("name", ["multikrum", "deepsight", "foolsgold", "rflbat", "flame", "norm_clip"])
def test_every_defense_runs(name):
    records, _, _ = engine.run_experiment(small(**{"defense.name": name, "total_rounds": 2}))
    for r in records:
        assert r.verdict.accepted | r.verdict.flagged == frozenset(r.selected)
        assert not r.verdict.accepted & r.verdict.flagged


def test_defense_warmup_rounds_accept_everything():
    records, _, _ = engine.run_experiment(small(**{"defense.name": "multikrum", "defense.start_round": 3, "clients_per_round": 10}))
    assert all(not r.verdict.flagged for r in records[:2])
    assert records[2].verdict.flagged
