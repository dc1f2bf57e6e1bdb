import math

import numpy as np
import pytest

from ttnlab.nn import (AdamState, Model, TrainConfig, adam_step, backward, cosine_lr, cross_entropy, entropy,
                       forward, load_checkpoint, pretrain, save_checkpoint, softmax, tiny_convnet)
from ttnlab.nn.train import NumericalError
from ttnlab.norm import AlphaVector, NormMode
from ttnlab.tensor import ShapeError

from conftest import randomize_norms


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def relu_masks(model, x, mode):
    _, cache = forward(model, x, mode)
    return [e for layer, e in zip(model.layers, cache.entries) if layer.kind == "relu"]


def fd_grad(loss_fn, x, h):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (loss_fn(xp) - loss_fn(xm)) / (2 * h)
    return g


def test_tiny_convnet_structure():
    m = tiny_convnet(10, seed=0)
    assert m.norm_channels == [16, 32, 32]
    assert len(m.norm_index) == 3
    assert m.layers[-1].weight.shape == (32, 10)
    assert tiny_convnet(2, seed=0).layers[-1].weight.shape == (32, 2)
    n = m.norm_layers[0]
    assert np.all(n.gamma == 1) and np.all(n.beta == 0) and np.all(n.running_mean == 0) and np.all(n.running_var == 1)
    with pytest.raises(ValueError):
        tiny_convnet(1)


def test_tiny_convnet_seeded():
    a, b = tiny_convnet(10, seed=5), tiny_convnet(10, seed=5)
    for k, v in a.state().items():
        assert v.tobytes() == b.state()[k].tobytes()
    assert any(not np.array_equal(v, tiny_convnet(10, seed=6).state()[k]) for k, v in a.state().items())


def test_chain_check():
    m = tiny_convnet(10)
    with pytest.raises(ShapeError):
        Model([m.layers[0], m.layers[4]])


def test_cbn_identity_statistics_is_near_identity(rng):
    m = tiny_convnet(10, seed=0, dtype=np.float64)
    x = rng.normal(size=(2, 3, 8, 8))
    z = m.layers[0].weight
    from ttnlab.norm import standardize_forward
    layer = m.norm_layers[0]
    h = np.ones((2, 16, 8, 8)) * 0.7
    out, _ = standardize_forward(h, None, layer.source_stats, layer.gamma, layer.beta)
    np.testing.assert_allclose(out, h / np.sqrt(1 + 1e-5))
    logits, _ = forward(m, x, NormMode.cbn())
    assert logits.shape == (2, 10) and z is m.layers[0].weight


def test_endpoint_modes_match(model64, rng):
    x = rng.normal(size=(5, 3, 8, 8))
    ch = model64.norm_channels
    cbn, _ = forward(model64, x, NormMode.cbn())
    tbn, _ = forward(model64, x, NormMode.tbn())
    np.testing.assert_allclose(forward(model64, x, NormMode.ttn(AlphaVector.constant(ch, 0)))[0], cbn, atol=1e-6)
    np.testing.assert_allclose(forward(model64, x, NormMode.ttn(AlphaVector.constant(ch, 1)))[0], tbn, atol=1e-6)
    np.testing.assert_allclose(forward(model64, x, NormMode.const(0))[0], cbn, atol=1e-6)
    np.testing.assert_allclose(forward(model64, x, NormMode.const(1))[0], tbn, atol=1e-6)
    a = AlphaVector.constant(ch, 0.1)
    np.testing.assert_allclose(forward(model64, x, NormMode.const(0.1))[0], forward(model64, x, NormMode.ttn(a))[0],
                               atol=1e-6)


def test_forward_errors(model64, rng):
    with pytest.raises(ShapeError):
        forward(model64, rng.normal(size=(2, 4, 8, 8)))
    with pytest.raises(ShapeError):
        forward(model64, rng.normal(size=(3, 8, 8)))
    with pytest.raises(ShapeError):
        forward(model64, rng.normal(size=(2, 3, 8, 8)), NormMode.ttn(AlphaVector.constant([16, 32], 0.5)))
    with pytest.raises(ValueError):
        NormMode("ttn")


def test_forward_does_not_mutate_outside_training(model64, rng):
    before = {k: v.copy() for k, v in model64.state().items()}
    x = rng.normal(size=(4, 3, 8, 8))
    for mode in (NormMode.cbn(), NormMode.tbn(), NormMode.const(0.3),
                 NormMode.ttn(AlphaVector.constant(model64.norm_channels, 0.4))):
        forward(model64, x, mode)
    for k, v in model64.state().items():
        assert np.array_equal(v, before[k])
    forward(model64, x, NormMode.train())
    assert not np.array_equal(model64.norm_layers[0].running_mean, before["1.running_mean"])


def test_running_stats_ema(rng):
    m = tiny_convnet(10, seed=0, dtype=np.float64)
    x = rng.normal(size=(4, 3, 8, 8))
    _, cache = forward(m, x, NormMode.train())
    c = cache.entries[1]
    np.testing.assert_allclose(m.norm_layers[0].running_mean, 0.1 * c.mean_b)
    np.testing.assert_allclose(m.norm_layers[0].running_var, 0.9 + 0.1 * c.var_b)


def test_softmax_rows_sum_to_one(rng):
    p = softmax(rng.normal(scale=30, size=(7, 10)))
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_zero_upstream_gradient(model64, rng):
    x = rng.normal(size=(4, 3, 8, 8))
    a = AlphaVector.constant(model64.norm_channels, 0.5)
    for mode, target in ((NormMode.tbn(), "all"), (NormMode.ttn(a), "alpha"), (NormMode.cbn(), "affine")):
        logits, cache = forward(model64, x, mode)
        grads = backward(model64, cache, np.zeros_like(logits), target)
        flat = grads["alpha"] if target == "alpha" else grads.values()
        assert all(np.all(g == 0) for g in flat)


def test_all_vs_affine_targets(model64, rng):
    x = rng.normal(size=(4, 3, 8, 8))
    logits, cache = forward(model64, x, NormMode.tbn())
    g = rng.normal(size=logits.shape)
    full = backward(model64, cache, g, "all")
    aff = backward(model64, cache, g, "affine")
    assert set(aff) == set(model64.affine_names())
    for k, v in aff.items():
        assert np.array_equal(full[k], v)


def test_stale_cache(model64, rng):
    logits, cache = forward(model64, rng.normal(size=(2, 3, 8, 8)))
    other = tiny_convnet(5, seed=0, dtype=np.float64)
    with pytest.raises(ValueError, match="stale"):
        backward(other, cache, np.zeros((2, 5)))


def assert_kink_free(model, x, mode, key, base, h):
    """Finite differences are only an oracle if no ReLU switches inside +-h."""
    ref = relu_masks(model, x, mode)
    for sign in (1, -1):
        m = model.copy()
        m.set_params({key: base + sign * h})
        for a, b in zip(ref, relu_masks(m, x, mode)):
            assert np.array_equal(a, b), f"ReLU kink within the finite-difference step for {key}"


def _ce_loss(model, x, y, mode):
    logits, _ = forward(model, x, mode)
    return cross_entropy(logits, y)[0]


def _affine_check(model, x, y, mode, h, tol):
    logits, cache = forward(model, x, mode)
    grads = backward(model, cache, cross_entropy(logits, y)[1], "affine")
    for key in model.affine_names():
        base = model.named_params()[key]

        def loss(v, key=key):
            m = model.copy()
            m.set_params({key: v})
            return _ce_loss(m, x, y, mode)

        assert_kink_free(model, x, mode, key, base, h)
        assert rel_err(grads[key], fd_grad(loss, base, h)) < tol, key


def test_affine_gradients_cbn_fd_h1e3(model64):
    # CBN is the mode in which prior gradients are collected. At h=1e-3 the
    # O(h^2) truncation term is itself ~1e-7..1e-6, and a ReLU kink inside the
    # step invalidates the oracle, so this input is one the kink guard accepts.
    x = np.random.default_rng(2).normal(size=(4, 3, 4, 4))
    _affine_check(model64, x, np.array([0, 3, 7, 3]), NormMode.cbn(), 1e-3, 1e-6)


@pytest.mark.parametrize("mode_name", ["tbn", "ttn"])
def test_affine_gradients_batch_modes_fd(model64, rng, mode_name):
    # batch-statistic modes have larger third derivatives; h=1e-4 keeps truncation below 1e-7
    x = rng.normal(size=(4, 3, 4, 4))
    alpha = AlphaVector([rng.uniform(0.2, 0.8, c) for c in model64.norm_channels])
    mode = NormMode.tbn() if mode_name == "tbn" else NormMode.ttn(alpha)
    _affine_check(model64, x, np.array([0, 3, 7, 3]), mode, 1e-4, 1e-5)


@pytest.mark.xfail(strict=True, reason="central-difference truncation at h=1e-3 is ~4e-6 relative here; "
                   "see the h=1e-4 network check and the h=1e-5 layer check in test_norm")
def test_alpha_gradient_single_layer_fd_h1e3(rng):
    from ttnlab.norm import standardize_backward, standardize_forward
    from ttnlab.tensor import NormStats
    z = rng.normal(0.5, 1.5, size=(4, 6, 5, 5))
    src = NormStats(rng.normal(size=6), rng.uniform(0.5, 2, 6))
    g, b = rng.uniform(0.5, 1.5, 6), rng.normal(size=6)
    w = rng.normal(size=z.shape)
    alpha = rng.uniform(0.2, 0.8, 6)
    _, cache = standardize_forward(z, alpha, src, g, b)
    da = standardize_backward(w, cache, need_alpha=True)[3]
    num = fd_grad(lambda a: float(np.sum(standardize_forward(z, a, src, g, b)[0] * w)), alpha, 1e-3)
    assert rel_err(da, num) < 1e-6


def test_alpha_gradient_network_fd(model64, rng):
    x = rng.normal(size=(4, 3, 4, 4))
    y = np.array([1, 2, 5, 9])
    base = [rng.uniform(0.2, 0.8, c) for c in model64.norm_channels]
    alpha = AlphaVector(base)
    logits, cache = forward(model64, x, NormMode.ttn(alpha))
    grads = backward(model64, cache, cross_entropy(logits, y)[1], "alpha")["alpha"]
    for layer in range(3):
        def loss(v, layer=layer):
            vals = [b.copy() for b in base]
            vals[layer] = v
            return _ce_loss(model64, x, y, NormMode.ttn(AlphaVector(vals)))

        assert rel_err(grads[layer], fd_grad(loss, base[layer], 1e-4)) < 1e-5, layer


def test_alpha_gradient_masked_outside_unit_interval(model64, rng):
    x = rng.normal(size=(4, 3, 8, 8))
    vals = [rng.uniform(0.2, 0.8, c) for c in model64.norm_channels]
    vals[0][:4] = [-0.3, 1.2, 0.0, 1.0]
    logits, cache = forward(model64, x, NormMode.ttn(AlphaVector(vals)))
    g = backward(model64, cache, rng.normal(size=logits.shape), "alpha")["alpha"][0]
    assert g[0] == 0 and g[1] == 0
    assert g[2] != 0 and g[3] != 0 and np.all(g[4:] != 0)


def test_weight_gradients_finite_differences(rng):
    m = randomize_norms(tiny_convnet(4, seed=1, dtype=np.float64), rng)
    x = rng.normal(size=(3, 3, 6, 6))
    y = np.array([0, 1, 3])
    logits, cache = forward(m, x, NormMode.tbn())
    grads = backward(m, cache, cross_entropy(logits, y)[1], "all")
    for key in ("0.weight", "3.weight", "10.weight", "10.bias"):
        base = m.named_params()[key]
        idx = [tuple(rng.integers(0, s) for s in base.shape) for _ in range(4)]
        for i in idx:
            def loss(v, key=key, i=i):
                p = base.copy()
                p[i] = v[0]
                mm = m.copy()
                mm.set_params({key: p})
                return _ce_loss(mm, x, y, NormMode.tbn())
            num = fd_grad(loss, np.array([base[i]]), 1e-5)[0]
            assert grads[key][i] == pytest.approx(num, rel=1e-5, abs=1e-9), (key, i)


def test_cross_entropy_examples(rng):
    loss, grad = cross_entropy(np.zeros((3, 10)), np.array([0, 4, 9]))
    assert loss == pytest.approx(math.log(10), abs=1e-12)
    logits = np.zeros((2, 5))
    logits[[0, 1], [2, 4]] = 20.0
    assert cross_entropy(logits, np.array([2, 4]))[0] < 1e-8
    logits = rng.normal(size=(6, 3))
    labels = rng.integers(0, 3, 6)
    direct = np.mean([-np.log(np.exp(r[l]) / np.exp(r).sum()) for r, l in zip(logits, labels)])
    assert cross_entropy(logits, labels)[0] == pytest.approx(direct, abs=1e-7)
    onehot = np.eye(3)[labels]
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(cross_entropy(logits, labels)[1], (p - onehot) / 6, atol=1e-12)
    with pytest.raises(ValueError):
        cross_entropy(logits, np.array([0, 1, 2, 3, 0, 1]))


def test_entropy_examples(rng):
    assert entropy(np.zeros((4, 7)))[0] == pytest.approx(math.log(7), abs=1e-12)
    sat = np.zeros((2, 4))
    sat[:, 1] = 50.0
    assert entropy(sat)[0] < 1e-8
    logits = rng.normal(size=(3, 5))
    _, g = entropy(logits)
    num = fd_grad(lambda v: entropy(v)[0], logits, 1e-5)
    assert rel_err(g, num) < 1e-6


def test_adam_examples():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adam_step(p, {"w": np.array([0.5, -3.0])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(p["w"] - new["w"], [0.1, -0.1], rtol=1e-6)
    assert state.t == 1 and np.array_equal(p["w"], [1.0, -2.0])
    same, _ = adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(same["w"], p["w"])
    assert cosine_lr(1e-3, 0, 30) == 1e-3
    assert cosine_lr(1e-3, 30, 30) == pytest.approx(0.0, abs=1e-20)
    assert cosine_lr(1e-3, 15, 30) == pytest.approx(5e-4)


def test_adam_matches_reference_sequence():
    # three steps computed by hand from the bias-corrected update
    g = [0.3, -0.1, 0.2]
    p, state = {"x": np.array([0.0])}, AdamState()
    m = v = 0.0
    x = 0.0
    for t, gi in enumerate(g, 1):
        p, state = adam_step(p, {"x": np.array([gi])}, state, lr=0.01)
        m = 0.9 * m + 0.1 * gi
        v = 0.999 * v + 0.001 * gi * gi
        x -= 0.01 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert p["x"][0] == pytest.approx(x, rel=1e-12)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(momentum=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="sgd")


def test_pretrain_determinism_and_noop(small_shapeset):
    train, _ = small_shapeset
    sub = train.subset(np.arange(128))
    h1, h2 = [], []
    m0 = tiny_convnet(10, seed=2)
    a = pretrain(m0, sub, TrainConfig(epochs=1, batch_size=32, seed=4), h1)
    b = pretrain(m0, sub, TrainConfig(epochs=1, batch_size=32, seed=4), h2)
    assert h1 == h2
    for k, v in a.state().items():
        assert v.tobytes() == b.state()[k].tobytes()
    same = pretrain(m0, sub, TrainConfig(epochs=0))
    for k, v in m0.state().items():
        assert np.array_equal(v, same.state()[k])


def test_pretrain_divergence_reports(small_shapeset):
    train, _ = small_shapeset
    m = tiny_convnet(10, seed=0)
    m.layers[-1].bias[:] = np.nan
    with pytest.raises(NumericalError, match="epoch 0"):
        pretrain(m, train.subset(np.arange(32)), TrainConfig(epochs=1, batch_size=16))


def test_pretrain_learns(small_trained, small_shapeset):
    from ttnlab.nn import error_rate
    _, test = small_shapeset
    assert error_rate(small_trained, test) < 0.6


def test_checkpoint_round_trip(tmp_path, model64):
    alpha = AlphaVector([np.linspace(0, 1, c) for c in model64.norm_channels])
    p = tmp_path / "ck.json"
    save_checkpoint(p, model64, alpha, meta={"seed": 3})
    m, a, meta = load_checkpoint(p)
    assert meta == {"seed": 3} and m.dtype == np.float64
    for k, v in model64.state().items():
        assert v.tobytes() == m.state()[k].tobytes()
    for u, v in zip(alpha.values, a.values):
        np.testing.assert_array_equal(u, v)


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(p)
