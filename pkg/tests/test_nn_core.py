import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pursuit import nn_core as nn
from pursuit.errors import ContractError, NumericError
from pursuit.selfcheck import randomize_biases


def test_dense_identity():
    st_ = nn.ParamStore()
    st_.add("w", np.eye(4))
    st_.add_zeros("b", (4,))
    x = np.arange(8, dtype=np.float32).reshape(2, 4)
    assert np.array_equal(nn.dense(x, st_["w"], st_["b"]).data, x)


def test_conv_unit_kernel_is_identity():
    st_ = nn.ParamStore()
    st_.add("k", np.ones((1, 1, 1, 1)))
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4)).astype(np.float32)
    assert np.array_equal(nn.conv2d(x, st_["k"]).data, x)


def _conv_oracle(x, k, b):
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (0, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)))
    out = np.zeros((B, O, H, W))
    for n in range(B):
        for o in range(O):
            for i in range(H):
                for j in range(W):
                    out[n, o, i, j] = np.sum(xp[n, :, i:i + kh, j:j + kw] * k[o]) + b[o]
    return out


def test_conv_matches_loop_oracle(rng):
    x = rng.normal(size=(2, 3, 5, 4))
    k = rng.normal(size=(2, 3, 3, 3))
    b = rng.normal(size=2)
    st_ = nn.ParamStore()
    st_.add("k", k)
    st_.add("b", b)
    got = nn.conv2d(x.astype(np.float32), st_["k"], st_["b"]).data
    np.testing.assert_allclose(got, _conv_oracle(x, k, b), atol=1e-4)


@pytest.mark.parametrize("seed", range(20))
def test_dense_relu_stack_gradients(seed):
    rng = np.random.default_rng(seed)
    layers = [nn.LayerSpec("dense", 6, 9), nn.LayerSpec("dense", 9, 9), nn.LayerSpec("dense", 9, 2, activation=None)]
    store = nn.ParamStore()
    store.add_layers("f", layers, rng)
    randomize_biases(store, rng)
    x = rng.normal(size=(5, 6))
    w = rng.normal(size=(5, 2))
    errs = nn.gradient_check(lambda s: nn.weighted_sum(s.forward_layers("f", layers, x), w), store, rng=rng)
    assert max(errs.values()) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_softmax_pool_concat_gather_gradients(seed):
    rng = np.random.default_rng(seed)
    store = nn.ParamStore()
    store.add("a", rng.normal(size=(3, 2, 4, 4)))
    store.add("b", rng.normal(size=(3, 5)))
    idx = rng.integers(0, 7, size=3)

    def loss(s):
        pooled = nn.mean_spatial(s["a"])
        z = nn.concat([pooled, nn.mul_const(s["b"], 0.5)])
        z = nn.softmax(nn.reshape(nn.transpose(nn.reshape(z, (3, 7, 1)), (0, 2, 1)), (3, 7)))
        return nn.mse_loss(nn.gather_rows(z, idx), np.full(3, 0.3))

    assert max(nn.gradient_check(loss, store, rng=rng).values()) < 1e-4


def test_attention_single_token():
    v = nn.Tensor(np.array([[[1.5, -2.0]]], dtype=np.float32))
    k = nn.Tensor(np.ones((1, 1, 3), dtype=np.float32))
    q = nn.Tensor(np.ones((1, 3), dtype=np.float32))
    out, a = nn.attention(k, v, q)
    assert a.tolist() == [[1.0]]
    assert np.array_equal(out.data, v.data[:, 0])


def test_attention_identical_keys_are_uniform():
    k = nn.Tensor(np.ones((2, 5, 4), dtype=np.float32))
    v = nn.Tensor(np.random.default_rng(0).normal(size=(2, 5, 3)).astype(np.float32))
    q = nn.Tensor(np.random.default_rng(1).normal(size=(2, 4)).astype(np.float32))
    _, a = nn.attention(k, v, q)
    np.testing.assert_allclose(a, 0.2, atol=1e-7)


def test_attention_matches_direct_summation(rng):
    for _ in range(50):
        T, d, dv = rng.integers(1, 12), rng.integers(1, 8), rng.integers(1, 6)
        k, v, q = rng.normal(size=(T, d)), rng.normal(size=(T, dv)), rng.normal(size=d)
        # direct loops in f64
        logits = [sum(k[t, i] * q[i] for i in range(d)) / np.sqrt(d) for t in range(T)]
        m = max(logits)
        e = [np.exp(x - m) for x in logits]
        w = [x / sum(e) for x in e]
        expected = [sum(w[t] * v[t, j] for t in range(T)) for j in range(dv)]
        out, a = nn.attention(nn.Tensor(k[None]), nn.Tensor(v[None]), nn.Tensor(q[None]))
        np.testing.assert_allclose(a[0], w, atol=1e-6)
        np.testing.assert_allclose(out.data[0], expected, atol=1e-6)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(1, 16), st.floats(0.1, 20), st.integers(0, 2**31))
def test_attention_weights_sum_to_one(T, d, spread, seed):
    rng = np.random.default_rng(seed)
    k = nn.Tensor(rng.normal(0, spread, size=(3, T, d)).astype(np.float32))
    q = nn.Tensor(rng.normal(0, spread, size=(3, d)).astype(np.float32))
    _, a = nn.attention(k, k, q)
    assert np.all(np.abs(a.astype(np.float64).sum(axis=1) - 1) <= 1e-6)


def test_mse_zero_when_equal():
    store = nn.ParamStore()
    store.add("p", np.array([1.0, -2.0, 3.0]))
    loss = nn.mse_loss(store["p"], np.array([1.0, -2.0, 3.0]))
    loss.backward()
    assert loss.item() == 0.0 and not store.grads["p"].any()


def test_sgd_moves_parameter_by_hand_derivative():
    store = nn.ParamStore()
    store.add("p", np.array([2.0]))
    nn.mse_loss(store["p"], np.array([0.0])).backward()
    nn.sgd_step(store, 0.001)
    assert store.params["p"][0] == pytest.approx(2.0 - 0.004, abs=1e-7)


def test_sgd_clipping_caps_the_update():
    store = nn.ParamStore()
    store.add("p", np.array([2.0]))
    store.add("q", np.array([0.0]))
    nn.mse_loss(store["p"], np.array([0.0])).backward()  # grads: p 4, q 0
    nn.sgd_step(store, 0.01, max_norm=1.0)
    assert store.params["p"][0] == pytest.approx(2.0 - 0.01, abs=1e-7)
    assert store.params["q"][0] == 0.0


def test_sgd_clipping_inactive_below_threshold():
    a, b = nn.ParamStore(), nn.ParamStore()
    for s in (a, b):
        s.add("p", np.array([2.0]))
        nn.mse_loss(s["p"], np.array([0.0])).backward()
    nn.sgd_step(a, 0.001)
    nn.sgd_step(b, 0.001, max_norm=100.0)
    assert a.params["p"][0] == b.params["p"][0]


def test_sync_copy_gives_identical_bytes(rng):
    a, b = nn.ParamStore({"scale": [1, 2]}), nn.ParamStore()
    layers = [nn.LayerSpec("dense", 4, 3)]
    a.add_layers("x", layers, rng)
    b.add_layers("x", layers, rng)
    assert nn.dumps_params(a) != nn.dumps_params(b)
    nn.sync_copy(a, b)
    assert nn.dumps_params(a) == nn.dumps_params(b)


def test_init_bounds_and_zero_bias(rng):
    store = nn.ParamStore()
    store.add_layers("d", [nn.LayerSpec("dense", 30, 70)], rng)
    store.add_layers("c", [nn.LayerSpec("conv", 2, 4, 3)], rng)
    assert np.abs(store.params["d.0.w"]).max() <= np.sqrt(6 / 100)
    assert np.abs(store.params["c.0.w"]).max() <= np.sqrt(6 / (18 + 36))
    assert not store.params["d.0.b"].any() and not store.params["c.0.b"].any()


def test_checkpoint_round_trip_is_byte_identical(tmp_path, rng):
    store = nn.ParamStore({"scale": [4, 2, 50]})
    store.add_layers("x", [nn.LayerSpec("conv", 1, 8, 3), nn.LayerSpec("dense", 8, 3)], rng)
    store.add("scalar", np.array(1.5))
    nn.save_params(store, tmp_path / "a.params")
    loaded = nn.load_params(tmp_path / "a.params")
    nn.save_params(loaded, tmp_path / "b.params")
    assert (tmp_path / "a.params").read_bytes() == (tmp_path / "b.params").read_bytes()
    assert loaded.meta == store.meta
    for name in store.names():
        assert np.array_equal(loaded.params[name], store.params[name])


def test_truncated_checkpoint_names_parameter(rng):
    store = nn.ParamStore()
    store.add_layers("x", [nn.LayerSpec("dense", 4, 3), nn.LayerSpec("dense", 3, 2)], rng)
    blob = nn.dumps_params(store)
    with pytest.raises(nn.CheckpointError, match="x.1.w"):
        nn.loads_params(blob[:-10])
    with pytest.raises(nn.CheckpointError, match="header"):
        nn.loads_params(b"garbage")


def test_non_finite_output_raises():
    store = nn.ParamStore()
    store.add("w", np.array([[np.inf]]))
    with pytest.raises(NumericError, match="dense"):
        nn.dense(np.ones((1, 1), dtype=np.float32), store["w"])


def test_shape_mismatch_raises():
    store = nn.ParamStore()
    store.add("w", np.ones((3, 2)))
    with pytest.raises(ContractError):
        nn.dense(np.ones((1, 4)), store["w"])


def test_no_grad_is_thread_local():
    seen = {}

    def worker():
        seen["other"] = nn.grad_enabled()

    with nn.no_grad():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
        seen["here"] = nn.grad_enabled()
    assert seen == {"other": True, "here": False}
    assert nn.grad_enabled()


def test_fixed_seed_gives_identical_training(rng):
    def run():
        r = np.random.default_rng(3)
        layers = [nn.LayerSpec("dense", 4, 8), nn.LayerSpec("dense", 8, 1, activation=None)]
        store = nn.ParamStore()
        store.add_layers("m", layers, r)
        x, y = r.normal(size=(16, 4)), r.normal(size=(16, 1))
        for _ in range(20):
            store.zero_grad()
            nn.mse_loss(store.forward_layers("m", layers, x), y).backward()
            nn.sgd_step(store, 0.01)
        return nn.dumps_params(store)

    assert run() == run()
