import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedbackdoor.nn import model as nn
from fedbackdoor.nn import load_checkpoint, save_checkpoint

from oracles import bn_train_reference, fd_gradients, rel_error


def dense_bn_arch(d_in=4, hidden=5, classes=3):
    return nn.ModelArch((nn.Dense(d_in, hidden), nn.BatchNorm(hidden), nn.ReLU(), nn.Dense(hidden, classes)),
                        classes, (d_in,))


def conv_arch():
    return nn.ModelArch((nn.Conv2d(2, 3, 3, 2), nn.BatchNorm(3), nn.ReLU(), nn.Flatten(), nn.Dense(12, 3)), 3, (2, 5, 5))


def test_dense_forward_is_linear_map():
    arch = nn.ModelArch((nn.Dense(3, 3), nn.BatchNorm(3)), 3, (3,))
    state = nn.init_state(arch, np.random.default_rng(0))
    params = [{"W": np.eye(3) * 2.0, "b": np.zeros(3)}, state.params[1]]
    x = np.array([[1.0, -2.0, 0.5]])
    out, _ = nn.forward(state.with_params(params), x, "eval", stop=1)
    assert np.array_equal(out, 2.0 * x)


def test_eval_bn_with_unit_stats_is_identity():
    arch = nn.ModelArch((nn.BatchNorm(4), nn.Dense(4, 2)), 2, (4,))
    state = nn.init_state(arch, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(6, 4))
    out, _ = nn.forward(state, x, "eval", stop=1)
    np.testing.assert_allclose(out, x / np.sqrt(1 + nn.BN_EPS), rtol=0, atol=1e-15)


def test_train_bn_matches_per_feature_reference():
    arch = nn.ModelArch((nn.BatchNorm(3), nn.Dense(3, 2)), 2, (3,))
    state = nn.init_state(arch, np.random.default_rng(0))
    r = np.random.default_rng(2)
    gamma, beta = r.normal(size=3), r.normal(size=3)
    params = [{"gamma": gamma, "beta": beta}, state.params[1]]
    x = r.normal(size=(4, 3))
    out, cache = nn.forward(state.with_params(params), x, "train", stop=1)
    np.testing.assert_allclose(out, bn_train_reference(x, gamma, beta, nn.BN_EPS), atol=1e-12)
    plain, _ = nn.forward(state, x, "train", stop=1)
    np.testing.assert_allclose(plain.mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(plain.var(axis=0), 1.0, atol=1e-3)
    # running update: 0.9 * old + 0.1 * batch statistic (unbiased variance)
    np.testing.assert_allclose(cache.bn_stats.means[0], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(cache.bn_stats.vars[0], 0.9 + 0.1 * x.var(axis=0, ddof=1))


def test_forward_never_mutates_state():
    arch = dense_bn_arch()
    state = nn.init_state(arch, np.random.default_rng(0))
    before = state.copy()
    nn.forward(state, np.random.default_rng(1).normal(size=(8, 4)), "train")
    assert before.bn_stats.equals(state.bn_stats)
    assert np.array_equal(nn.flatten(before).values, nn.flatten(state).values)


def test_forward_errors():
    state = nn.init_state(dense_bn_arch(), np.random.default_rng(0))
    with pytest.raises(nn.ShapeError):
        nn.forward(state, np.zeros((3, 5)), "eval")
    with pytest.raises(ValueError):
        nn.forward(state, np.zeros((1, 4)), "train")
    _, cache = nn.forward(state, np.zeros((3, 4)), "eval")
    with pytest.raises(ValueError):
        nn.backward(state, cache, [0, 1, 2])


def test_arch_validation():
    with pytest.raises(nn.ShapeError):
        nn.ModelArch((nn.Dense(4, 3),), 3, (4,))  # no batch norm
    with pytest.raises(nn.ShapeError):
        nn.ModelArch((nn.Dense(4, 5), nn.BatchNorm(5), nn.Dense(4, 3)), 3, (4,))
    with pytest.raises(nn.ShapeError):
        nn.ModelArch((nn.Dense(4, 5), nn.BatchNorm(5)), 3, (4,))


@pytest.mark.parametrize("arch_fn", [dense_bn_arch, conv_arch, lambda: nn.mlp((1, 3, 3), 3, 4),
                                     lambda: nn.small_cnn((1, 4, 4), 3, 2)])
def test_gradients_match_finite_differences(arch_fn):
    arch = arch_fn()
    r = np.random.default_rng(11)
    state = nn.init_state(arch, r)
    params = [{k: v + r.normal(0, 0.1, v.shape) for k, v in p.items()} for p in state.params]
    state = state.with_params(params)
    x = r.normal(size=(8,) + arch.input_shape)
    y = r.integers(0, arch.num_classes, 8)
    _, cache = nn.forward(state, x, "train")
    analytic = nn.backward(state, cache, y)
    numeric = fd_gradients(state, x, y)
    for a, n in zip(analytic, numeric):
        for k in a:
            assert rel_error(a[k], n[k]) < 1e-4, k


def test_uniform_logit_gradient():
    g = nn.cross_entropy_grad(np.zeros((1, 4)), [2])
    np.testing.assert_allclose(g[0], [0.25, 0.25, -0.75, 0.25])


def test_zero_final_layer_bias_gradient():
    arch = dense_bn_arch()
    r = np.random.default_rng(3)
    state = nn.init_state(arch, r)
    params = list(state.params)
    params[3] = {"W": np.zeros((3, 5)), "b": np.zeros(3)}
    state = state.with_params(params)
    x, y = r.normal(size=(8, 4)), r.integers(0, 3, 8)
    _, cache = nn.forward(state, x, "train")
    grads = nn.backward(state, cache, y)
    onehot = np.eye(3)[y]
    np.testing.assert_allclose(grads[3]["b"], np.mean(np.full((8, 3), 1 / 3) - onehot, axis=0), atol=1e-15)


def test_sgd_step_arithmetic_and_errors():
    arch = nn.ModelArch((nn.BatchNorm(1), nn.Dense(1, 1)), 1, (1,))
    state = nn.init_state(arch, np.random.default_rng(0))
    params = [{"gamma": np.array([1.0]), "beta": np.array([0.0])}, {"W": np.array([[1.0]]), "b": np.array([1.0])}]
    state = state.with_params(params)
    grads = [{"gamma": np.array([0.5]), "beta": np.array([0.0])}, {"W": np.array([[0.5]]), "b": np.array([0.5])}]
    new = nn.sgd_step(state, grads, 0.1)
    assert new.params[1]["W"][0, 0] == 0.95 and new.params[0]["gamma"][0] == 0.95
    assert new.bn_stats is state.bn_stats
    with pytest.raises(ValueError):
        nn.sgd_step(state, grads, 0.0)
    grads[1]["b"] = np.array([np.nan])
    with pytest.raises(FloatingPointError):
        nn.sgd_step(state, grads, 0.1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_flatten_round_trip(seed):
    state = nn.init_state(nn.small_cnn((1, 5, 5), 4, 3), np.random.default_rng(seed))
    flat = nn.flatten(state)
    assert flat.values.size == nn.num_params(state.arch)
    back = nn.unflatten(flat, state.arch)
    for a, b in zip(state.params, back):
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k], b[k])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bn_stats_get_set_bit_lossless(seed):
    r = np.random.default_rng(seed)
    state = nn.init_state(dense_bn_arch(), r)
    stats = nn.BnStats((r.normal(size=5),), (r.uniform(0, 3, 5),))
    swapped = nn.set_bn_stats(state, stats)
    assert nn.get_bn_stats(swapped).equals(stats)
    restored = nn.set_bn_stats(swapped, nn.get_bn_stats(state))
    assert restored.bn_stats.equals(state.bn_stats)


def test_set_bn_stats_rejects_bad_shapes():
    state = nn.init_state(dense_bn_arch(), np.random.default_rng(0))
    with pytest.raises(nn.ShapeError):
        nn.set_bn_stats(state, nn.BnStats((np.zeros(4),), (np.ones(4),)))
    with pytest.raises(ValueError):
        nn.set_bn_stats(state, nn.BnStats((np.zeros(5),), (-np.ones(5),)))


def test_checkpoint_round_trip(tmp_path):
    r = np.random.default_rng(5)
    state = nn.init_state(nn.small_cnn((1, 6, 6), 4, 2), r)
    state = nn.set_bn_stats(state, nn.BnStats((r.normal(size=2),), (r.uniform(0.1, 2, 2),)))
    path = tmp_path / "m.npz"
    save_checkpoint(state, path)
    back = load_checkpoint(path)
    assert back.arch == state.arch
    assert back.bn_stats.equals(state.bn_stats)
    assert np.array_equal(nn.flatten(back).values, nn.flatten(state).values)


def test_checkpoint_rejects_unknown_format(tmp_path):
    path = tmp_path / "bad.npz"
    np.savez(path, __format__=np.array(99))
    with pytest.raises(ValueError, match="format"):
        load_checkpoint(path)


def test_accuracy_and_predict():
    state = nn.init_state(dense_bn_arch(), np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(10, 4))
    pred = nn.predict(state, x)
    assert nn.accuracy(state, x, pred) == 100.0
    assert nn.accuracy(state, x[:0], pred[:0]) == 0.0
