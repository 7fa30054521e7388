import math

import numpy as np
import pytest

from lungseg import tinynet
from lungseg.tinynet import layers as L
from lungseg.tinynet import (
    NetConfig,
    ShapeMismatchError,
    StaleCacheError,
    WeightsFormatError,
    backward,
    forward,
    init_store,
    load_weights,
    save_weights,
    sgd_momentum_step,
    softmax_cross_entropy,
    step_decay_lr,
)
from oracles import check_net_gradients, numeric_grad, rel_err

# --------------------------------------------------------------------------
# layers


def test_conv_gradients():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(2, 3, 5, 6)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=(1, 4, 1, 1))
    r = rng.normal(size=(2, 4, 5, 6))

    def f():
        return float((L.conv2d_forward(x, w, b)[0] * r).sum())

    _, cache = L.conv2d_forward(x, w, b)
    dx, dw, db = L.conv2d_backward(r, cache)
    for analytic, var in ((dx, x), (dw, w), (db, b)):
        assert rel_err(analytic, numeric_grad(f, var)) < 1e-4


def test_conv1x1_gradients():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 1, 1))
    r = rng.normal(size=(2, 2, 4, 4))

    def f():
        return float((L.conv2d_forward(x, w)[0] * r).sum())

    dx, dw, _ = L.conv2d_backward(r, L.conv2d_forward(x, w)[1])
    assert rel_err(dx, numeric_grad(f, x)) < 1e-4
    assert rel_err(dw, numeric_grad(f, w)) < 1e-4


def test_conv_matches_direct_sum():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(1, 2, 4, 5)), rng.normal(size=(3, 2, 3, 3))
    out, _ = L.conv2d_forward(x, w)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for y in range(4):
            for xx in range(5):
                ref[0, o, y, xx] = (xp[0, :, y:y + 3, xx:xx + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_identity_1x1_conv_on_1x1_input():
    x = np.array([[[[0.3]], [[-1.2]]]])
    out, _ = L.conv2d_forward(x, np.eye(2).reshape(2, 2, 1, 1))
    np.testing.assert_array_equal(out, x)


def test_batchnorm_gradients():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 2, 4, 4)) * 2 + 1
    g, b = rng.normal(size=(1, 2, 1, 1)), rng.normal(size=(1, 2, 1, 1))
    r = rng.normal(size=x.shape)

    def f():
        rm, rv = np.zeros((1, 2, 1, 1)), np.ones((1, 2, 1, 1))
        return float((L.batchnorm_forward(x, g, b, rm, rv, True)[0] * r).sum())

    out, cache = L.batchnorm_forward(x, g, b, np.zeros((1, 2, 1, 1)), np.ones((1, 2, 1, 1)), True)
    dx, dg, db = L.batchnorm_backward(r, cache)
    for analytic, var in ((dx, x), (dg, g), (db, b)):
        assert rel_err(analytic, numeric_grad(f, var)) < 1e-4


def test_batchnorm_running_stats():
    x = np.arange(8, dtype=float).reshape(2, 1, 2, 2)
    rm, rv = np.zeros((1, 1, 1, 1)), np.ones((1, 1, 1, 1))
    L.batchnorm_forward(x, np.ones_like(rm), np.zeros_like(rm), rm, rv, True)
    assert rm.item() == pytest.approx(0.1 * 3.5)
    assert rv.item() == pytest.approx(0.9 + 0.1 * np.var(np.arange(8), ddof=1))


def test_relu_gradients_and_subgradient():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 2, 3, 3))
    x[np.abs(x) < 1e-3] = 0.5
    r = rng.normal(size=x.shape)

    def f():
        return float((L.relu_forward(x)[0] * r).sum())

    assert rel_err(L.relu_backward(r, L.relu_forward(x)[1]), numeric_grad(f, x)) < 1e-4
    assert L.relu_backward(np.ones(1), L.relu_forward(np.zeros(1))[1])[0] == 0.0


def test_maxpool_gradients():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 2, 4, 6))
    r = rng.normal(size=(2, 2, 2, 3))

    def f():
        return float((L.maxpool2x2_forward(x)[0] * r).sum())

    out, cache = L.maxpool2x2_forward(x)
    np.testing.assert_array_equal(out, x.reshape(2, 2, 2, 2, 3, 2).max(axis=(3, 5)))
    assert rel_err(L.maxpool2x2_backward(r, cache), numeric_grad(f, x)) < 1e-4


def test_upconv_gradients():
    rng = np.random.default_rng(6)
    x, w, b = rng.normal(size=(2, 3, 3, 2)), rng.normal(size=(3, 2, 2, 2)), rng.normal(size=(1, 2, 1, 1))
    r = rng.normal(size=(2, 2, 6, 4))

    def f():
        return float((L.upconv2x2_forward(x, w, b)[0] * r).sum())

    out, cache = L.upconv2x2_forward(x, w, b)
    # each input pixel paints its own 2x2 output block
    assert out[0, 1, 2, 3] == pytest.approx((x[0, :, 1, 1] * w[:, 1, 0, 1]).sum() + b[0, 1, 0, 0])
    dx, dw, db = L.upconv2x2_backward(r, cache)
    for analytic, var in ((dx, x), (dw, w), (db, b)):
        assert rel_err(analytic, numeric_grad(f, var)) < 1e-4


def test_upsample_nearest_gradients():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 2, 3, 3))
    r = rng.normal(size=(1, 2, 6, 6))

    def f():
        return float((L.upsample_nearest_forward(x)[0] * r).sum())

    assert rel_err(L.upsample_nearest_backward(r, x.shape), numeric_grad(f, x)) < 1e-4


def test_softmax_ce_uniform():
    loss, _ = softmax_cross_entropy(np.zeros((2, 3, 4, 4)), np.zeros((2, 4, 4), int))
    assert loss == pytest.approx(math.log(3), abs=1e-15)


def test_softmax_ce_monotone_to_zero():
    labels = np.array([[[1]]])
    losses = [softmax_cross_entropy(s * np.array([0.0, 1.0, 0.0]).reshape(1, 3, 1, 1), labels)[0]
              for s in (1, 2, 5, 10, 50)]
    assert all(a > b for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 1e-20


def test_softmax_ce_gradient_seed5():
    rng = np.random.default_rng(5)
    logits = rng.normal(size=(2, 3, 4, 4))
    labels = rng.integers(0, 3, (2, 4, 4))
    _, g = softmax_cross_entropy(logits, labels)
    num = numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    assert rel_err(g, num) < 1e-6


def test_softmax_ce_bad_labels():
    with pytest.raises(ValueError):
        softmax_cross_entropy(np.zeros((1, 3, 2, 2)), np.full((1, 2, 2), 3))


# --------------------------------------------------------------------------
# whole network


@pytest.mark.parametrize("seed", range(20))
def test_full_net_gradients(seed):
    assert check_net_gradients(NetConfig(depth=1, base_channels=2), seed) < 1e-4


@pytest.mark.parametrize("seed", range(3))
def test_residual_net_gradients(seed):
    assert check_net_gradients(NetConfig(depth=1, base_channels=2, residual=True), seed) < 1e-4


def test_nearest_upsample_net_gradients():
    assert check_net_gradients(NetConfig(depth=2, base_channels=2, upsample="nearest"), 0) < 1e-4


def test_depth2_net_gradients():
    assert check_net_gradients(NetConfig(depth=2, base_channels=2, residual=True), 1) < 1e-4


@pytest.mark.parametrize("residual", [False, True])
def test_output_shape(residual):
    cfg = NetConfig(depth=2, base_channels=3, residual=residual)
    store = init_store(cfg, np.random.default_rng(0))
    logits, _ = forward(cfg, store, np.zeros((3, 1, 16, 8)))
    assert logits.shape == (3, 3, 16, 8)


def test_shape_errors():
    cfg = NetConfig(depth=2)
    store = init_store(cfg, np.random.default_rng(0))
    with pytest.raises(ShapeMismatchError):
        forward(cfg, store, np.zeros((1, 1, 10, 8)))
    with pytest.raises(ShapeMismatchError):
        forward(cfg, store, np.zeros((1, 2, 8, 8)))


def test_eval_forward_is_pure():
    cfg = NetConfig(depth=2, base_channels=4)
    store = init_store(cfg, np.random.default_rng(0))
    forward(cfg, store, np.random.default_rng(1).normal(size=(2, 1, 8, 8)), mode="train")
    before = store.copy()
    x = np.random.default_rng(2).normal(size=(2, 1, 8, 8))
    a, _ = forward(cfg, store, x)
    b, _ = forward(cfg, store, x)
    assert a.tobytes() == b.tobytes()
    assert all(np.array_equal(before[k], store[k]) for k in store)


def test_train_forward_updates_running_stats():
    cfg = NetConfig(depth=1, base_channels=2)
    store = init_store(cfg, np.random.default_rng(0))
    forward(cfg, store, np.random.default_rng(1).normal(size=(2, 1, 8, 8)), mode="train")
    assert np.any(store["enc0.bn1.running_mean"] != 0)


def _trained_pair(cfg, seed=0):
    rng = np.random.default_rng(seed)
    store = init_store(cfg, rng)
    x = rng.normal(size=(2, 1, 8, 8))
    logits, cache = forward(cfg, store, x, mode="train")
    return store, cache, rng.integers(0, 3, (2, 8, 8)), logits


def test_backward_linearity_and_purity():
    cfg = NetConfig(depth=1, base_channels=2)
    store, cache, labels, logits = _trained_pair(cfg)
    snapshot = store.copy()
    zero = backward(cfg, store, cache, np.zeros_like(logits))
    assert all(not g.any() for g in zero.values())
    _, d = softmax_cross_entropy(logits, labels)
    g1 = backward(cfg, store, cache, d)
    g2 = backward(cfg, store, cache, 2 * d)
    for k in g1:
        np.testing.assert_allclose(g2[k], 2 * g1[k], rtol=1e-12, atol=1e-15)
    assert all(np.array_equal(snapshot[k], store[k]) for k in store)


def test_stale_cache_detected():
    cfg = NetConfig(depth=1, base_channels=2)
    store, cache, labels, logits = _trained_pair(cfg)
    _, d = softmax_cross_entropy(logits, labels)
    sgd_momentum_step(store, backward(cfg, store, cache, d), 0.01, 0.9)
    with pytest.raises(StaleCacheError):
        backward(cfg, store, cache, d)
    with pytest.raises(StaleCacheError):
        backward(cfg, store.copy(), cache, d)
    _, eval_cache = forward(cfg, store, np.zeros((1, 1, 8, 8)))
    with pytest.raises(StaleCacheError):
        backward(cfg, store, eval_cache, np.zeros((1, 3, 8, 8)))


# --------------------------------------------------------------------------
# optimiser


def _one_tensor(w, v=0.0):
    store = tinynet.TensorStore()
    store["a.w"] = np.array(w, dtype=float).reshape(1, 1, 1, -1)
    store["velocity.a.w"] = np.full_like(store["a.w"], v)
    return store


def test_sgd_plain_step():
    s = _one_tensor([1.0, 2.0])
    sgd_momentum_step(s, {"a.w": np.array([0.5, -1.0]).reshape(1, 1, 1, 2)}, 0.1, 0.0)
    np.testing.assert_allclose(s["a.w"].ravel(), [0.95, 2.1])


def test_sgd_zero_gradient():
    s = _one_tensor([1.0, 2.0])
    sgd_momentum_step(s, {"a.w": np.zeros((1, 1, 1, 2))}, 0.1, 0.9)
    np.testing.assert_array_equal(s["a.w"].ravel(), [1.0, 2.0])


def test_sgd_two_steps_closed_form():
    lr, mu, g = 0.05, 0.9, np.array([0.3, -0.7]).reshape(1, 1, 1, 2)
    s = _one_tensor([0.0, 0.0])
    for _ in range(2):
        sgd_momentum_step(s, {"a.w": g}, lr, mu)
    np.testing.assert_allclose(-s["a.w"], lr * g * (2 + mu), rtol=1e-15)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        sgd_momentum_step(_one_tensor([1.0]), {"a.w": np.zeros((1, 1, 1, 2))}, 0.1, 0.9)


def test_step_decay():
    assert [step_decay_lr(0.05, e, 8) for e in range(8)] == [0.05] * 6 + [0.05 * 0.1] * 2


# --------------------------------------------------------------------------
# weights files


def test_weights_round_trip(tmp_path):
    cfg = NetConfig(depth=2, base_channels=3, residual=True)
    store, cache, labels, logits = _trained_pair(cfg)
    _, d = softmax_cross_entropy(logits, labels)
    sgd_momentum_step(store, backward(cfg, store, cache, d), 0.01, 0.9)
    save_weights(store, tmp_path / "w.tnet")
    loaded = load_weights(tmp_path / "w.tnet", cfg)
    assert list(loaded) == list(store)
    assert all(loaded[k].tobytes() == store[k].tobytes() for k in store)
    assert tinynet.infer_config(loaded) == cfg


def test_weights_truncated(tmp_path):
    cfg = NetConfig(depth=1, base_channels=2)
    save_weights(init_store(cfg, np.random.default_rng(0)), tmp_path / "w.tnet")
    blob = (tmp_path / "w.tnet").read_bytes()
    (tmp_path / "t.tnet").write_bytes(blob[:-8])
    with pytest.raises(WeightsFormatError):
        load_weights(tmp_path / "t.tnet")
    (tmp_path / "h.tnet").write_bytes(b"TNET2" + blob[5:])
    with pytest.raises(WeightsFormatError):
        load_weights(tmp_path / "h.tnet")


def test_weights_depth_mismatch(tmp_path):
    save_weights(init_store(NetConfig(depth=3), np.random.default_rng(0)), tmp_path / "w.tnet")
    with pytest.raises(ShapeMismatchError):
        load_weights(tmp_path / "w.tnet", NetConfig(depth=2))


def test_training_is_deterministic():
    cfg = NetConfig(depth=1, base_channels=2)

    def run():
        rng = np.random.default_rng(11)
        store = init_store(cfg, rng)
        for _ in range(3):
            x = rng.normal(size=(2, 1, 8, 8))
            logits, cache = forward(cfg, store, x, mode="train")
            _, d = softmax_cross_entropy(logits, rng.integers(0, 3, (2, 8, 8)))
            sgd_momentum_step(store, backward(cfg, store, cache, d), 0.05, 0.9)
        return store

    a, b = run(), run()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
