import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mrfrecon.nn import (LSTM, AdamState, AvgPool1D, BatchNorm, Conv1D, Dense, Flatten, NonFiniteError,
                         ReLU, Reshape, Sequential, adam_step, grad_check, load_weights, mse_loss,
                         save_weights)
from mrfrecon.nn import functional as F
from oracles import adam_reference


def built(layer, shape, seed=0):
    Sequential([layer], shape, np.random.default_rng(seed))
    return layer


def randomize(layer, rng, scale=0.5):
    for k, v in layer.params.items():
        v[...] = rng.normal(0, scale, v.shape)
    return layer


# -- ReLU -------------------------------------------------------------------

def test_relu_values():
    out, cache = F.relu_forward(np.array([[-2.0, 0.0, 3.0]]))
    assert out.tolist() == [[0, 0, 3]]
    assert F.relu_backward(np.ones((1, 3)), cache).tolist() == [[0, 0, 1]]


# -- Dense ------------------------------------------------------------------

def test_dense_identity():
    x = np.random.default_rng(0).normal(size=(3, 5))
    out, _ = F.dense_forward(x, np.eye(5), np.zeros(5))
    assert np.array_equal(out, x)


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        F.dense_forward(np.ones((2, 4)), np.ones((5, 3)), np.zeros(3))


def test_dense_paper_shape():
    assert Dense(2000).output_shape((9000,)) == (2000,)


# -- Conv1D -----------------------------------------------------------------

def test_conv_paper_shape():
    layer = built(Conv1D(30, 15, 5), (3000, 1))
    out = layer.forward(np.zeros((1, 3000, 1)))
    assert out.shape == (1, 598, 30)


def test_conv_delta_kernel():
    x = np.random.default_rng(1).normal(size=(2, 12, 1))
    W = np.zeros((3, 1, 1))
    W[1, 0, 0] = 1.0
    out, _ = F.conv1d_forward(x, W, np.zeros(1), stride=1)
    assert out.shape == (2, 10, 1)
    assert np.array_equal(out, x[:, 1:-1])


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(2)
    x, W, b = rng.normal(size=(2, 17, 3)), rng.normal(size=(4, 3, 5)), rng.normal(size=5)
    out, _ = F.conv1d_forward(x, W, b, stride=3)
    lout = (17 - 4) // 3 + 1
    ref = np.zeros((2, lout, 5))
    for n in range(2):
        for t in range(lout):
            for o in range(5):
                ref[n, t, o] = b[o] + sum(x[n, 3 * t + k, c] * W[k, c, o] for k in range(4) for c in range(3))
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv_too_short():
    with pytest.raises(ValueError):
        F.conv1d_forward(np.ones((1, 4, 1)), np.ones((5, 1, 1)), np.zeros(1))


# -- LSTM -------------------------------------------------------------------

def test_lstm_zero_weights():
    layer = built(LSTM(6), (7, 3))
    for v in layer.params.values():
        v[...] = 0.0
    out = layer.forward(np.random.default_rng(0).normal(size=(2, 7, 3)))
    assert np.all(out == 0)


def test_lstm_paper_shape_and_params():
    layer = built(LSTM(300), (30, 100))
    assert layer.output_shape((30, 100)) == (30, 300)
    assert layer.n_params() == 4 * ((100 + 300) * 300 + 300) == 481_200
    assert np.all(layer.params["b"][300:600] == 1.0)
    assert np.all(layer.params["b"][:300] == 0.0) and np.all(layer.params["b"][600:] == 0.0)


def test_lstm_matches_stepwise_reference():
    rng = np.random.default_rng(3)
    layer = randomize(built(LSTM(3), (4, 2)), rng)
    x = rng.normal(size=(1, 4, 2))
    out = layer.forward(x)
    Wx, Wh, b = layer.params["Wx"], layer.params["Wh"], layer.params["b"]
    sig = lambda z: 1 / (1 + np.exp(-z))
    h, c = np.zeros(3), np.zeros(3)
    for t in range(4):
        a = x[0, t] @ Wx + h @ Wh + b
        i, f, g, o = sig(a[:3]), sig(a[3:6]), np.tanh(a[6:9]), sig(a[9:])
        c = f * c + i * g
        h = o * np.tanh(c)
        np.testing.assert_allclose(out[0, t], h, atol=1e-14)


# -- BatchNorm --------------------------------------------------------------

def test_batchnorm_train_statistics():
    layer = built(BatchNorm(), (5,))
    x = np.random.default_rng(4).normal(3.0, 2.0, size=(32, 5))
    out = layer.forward(x, training=True)
    assert np.abs(out.mean(axis=0)).max() <= 1e-6
    assert np.abs(out.var(axis=0) - 1).max() <= 1e-4


def test_batchnorm_constant_feature():
    layer = built(BatchNorm(), (2,))
    x = np.stack([np.full(8, 4.2), np.arange(8.0)], axis=1)
    out = layer.forward(x, training=True)
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out[:, 0], 0.0, atol=1e-12)


def test_batchnorm_running_stats_and_infer():
    layer = built(BatchNorm(momentum=0.9), (3,))
    x = np.random.default_rng(5).normal(1.0, 3.0, size=(16, 3))
    layer.forward(x, training=True)
    np.testing.assert_allclose(layer.buffers["running_mean"], 0.1 * x.mean(axis=0))
    np.testing.assert_allclose(layer.buffers["running_var"], 0.9 + 0.1 * x.var(axis=0))
    out = layer.forward(x[:1], training=False)
    expect = (x[:1] - layer.buffers["running_mean"]) / np.sqrt(layer.buffers["running_var"] + 1e-5)
    np.testing.assert_allclose(out, expect)


def test_batchnorm_needs_batch_of_two():
    layer = built(BatchNorm(), (3,))
    with pytest.raises(ValueError):
        layer.forward(np.ones((1, 3)), training=True)


# -- AvgPool / Reshape ------------------------------------------------------

def test_avgpool_constant_and_paper_shape():
    layer = AvgPool1D(4, 2)
    out = layer.forward(np.full((2, 48, 240), 2.5))
    assert out.shape == (2, 23, 240)
    assert np.all(out == 2.5)


def test_avgpool_too_short():
    with pytest.raises(ValueError):
        AvgPool1D(4, 2).forward(np.ones((1, 3, 2)))


@pytest.mark.parametrize("ch,shape", [(1, (30, 100)), (2, (30, 200))])
def test_reshape_paper_shapes(ch, shape):
    assert Reshape(30).output_shape((3000, ch)) == shape
    assert F.reshape_chunks(np.zeros((1, 3000, ch)), 30).shape == (1,) + shape


def test_reshape_interleaved_layout():
    x = np.arange(12.0).reshape(1, 6, 2)  # time t has channels (2t, 2t+1)
    y = F.reshape_chunks(x, 3, "interleaved")
    assert y[0, 0].tolist() == [0, 1, 6, 7]     # times 0 and 3
    assert y[0, 2].tolist() == [4, 5, 10, 11]   # times 2 and 5
    z = F.reshape_chunks(x, 3, "contiguous")
    assert z[0, 0].tolist() == [0, 1, 2, 3]     # times 0 and 1


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 6), n_chunks=st.integers(1, 6), ch=st.integers(1, 3),
       layout=st.sampled_from(["interleaved", "contiguous"]))
def test_reshape_roundtrip(k, n_chunks, ch, layout):
    x = np.random.default_rng(k * 7 + n_chunks).normal(size=(2, k * n_chunks, ch))
    y = F.reshape_chunks(x, n_chunks, layout)
    assert np.array_equal(F.unreshape_chunks(y, ch, layout), x)


def test_reshape_non_divisible():
    with pytest.raises(ValueError):
        F.reshape_chunks(np.zeros((1, 10, 1)), 3)


# -- loss and Adam ----------------------------------------------------------

def test_mse_values():
    loss, grad = mse_loss(np.array([[1.0, 0.0]]), np.zeros((1, 2)))
    assert loss == 0.5
    assert grad.tolist() == [[1.0, 0.0]]
    loss, grad = mse_loss(np.ones((2, 2)), np.ones((2, 2)))
    assert loss == 0 and np.all(grad == 0)
    with pytest.raises(ValueError):
        mse_loss(np.ones(2), np.ones(3))


def test_mse_gradient_finite_difference():
    rng = np.random.default_rng(6)
    p, t = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    _, grad = mse_loss(p, t)
    h = 1e-5
    for j in range(p.size):
        pp, pm = p.copy().ravel(), p.copy().ravel()
        pp[j] += h
        pm[j] -= h
        num = (mse_loss(pp.reshape(p.shape), t)[0] - mse_loss(pm.reshape(p.shape), t)[0]) / (2 * h)
        assert abs(num - grad.ravel()[j]) / max(abs(num), abs(grad.ravel()[j]), 1e-8) < 1e-6


def test_adam_zero_gradient_identity():
    w = {"a": np.array([1.0, -2.0, 3.0])}
    before = w["a"].copy()
    st_ = AdamState()
    for _ in range(3):
        adam_step(w, {"a": np.zeros(3)}, st_)
    assert np.array_equal(w["a"], before)
    assert st_.step == 3


def test_adam_first_step_is_signed_lr():
    for g in (0.37, -12.0):
        w = {"a": np.array([0.5])}
        adam_step(w, {"a": np.array([g])}, AdamState(lr=1e-3))
        assert abs((w["a"][0] - 0.5) - (-1e-3 * np.sign(g))) < 1e-6 * 1e-3


def test_adam_trace_matches_reference():
    rng = np.random.default_rng(7)
    theta0 = rng.normal(size=3)
    grads = [rng.normal(size=3) for _ in range(10)]
    ref = adam_reference(theta0, grads, lr=0.01)
    w = {"a": theta0.copy()}
    st_ = AdamState(lr=0.01)
    for g, r in zip(grads, ref):
        adam_step(w, {"a": g}, st_)
        assert np.abs(w["a"] - np.array(r)).max() < 1e-12


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"a": np.zeros(3)}, {"a": np.zeros(2)}, AdamState())


# -- gradient checks --------------------------------------------------------

GRAD_CASES = [
    ("relu", lambda: ReLU(), (6,), 4),
    ("dense", lambda: Dense(3), (7,), 4),
    ("conv1d", lambda: Conv1D(3, 4, 2), (20, 2), 3),
    ("lstm", lambda: LSTM(3), (5, 4), 3),
    ("batchnorm", lambda: BatchNorm(), (5,), 8),
    ("batchnorm_seq", lambda: BatchNorm(), (4, 3), 3),
    ("avgpool", lambda: AvgPool1D(3, 2), (10, 3), 3),
    ("reshape", lambda: Reshape(5), (20, 2), 2),
    ("flatten", lambda: Flatten(), (4, 3), 2),
]


@pytest.mark.parametrize("name,make,shape,batch", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_layer_gradients(name, make, shape, batch):
    rng = np.random.default_rng(8)
    layer = built(make(), shape)
    if name == "batchnorm":
        randomize(layer, rng)
    rep = grad_check(layer, rng.normal(size=(batch,) + shape), tolerance=1e-4, max_checks=1000)
    assert rep.passed, rep


@settings(max_examples=15, deadline=None)
@given(length=st.integers(6, 20), cin=st.integers(1, 3), cout=st.integers(1, 3),
       ks=st.integers(1, 5), stride=st.integers(1, 3), seed=st.integers(0, 10_000))
def test_conv_gradients_random_shapes(length, cin, cout, ks, stride, seed):
    rng = np.random.default_rng(seed)
    layer = built(Conv1D(cout, ks, stride), (length, cin), seed)
    assert grad_check(layer, rng.normal(size=(2, length, cin))).passed


@settings(max_examples=10, deadline=None)
@given(steps=st.integers(1, 6), d=st.integers(1, 4), h=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_lstm_gradients_random_shapes(steps, d, h, seed):
    rng = np.random.default_rng(seed)
    layer = built(LSTM(h), (steps, d), seed)
    assert grad_check(layer, rng.normal(size=(2, steps, d))).passed


def test_grad_check_linear_is_exact():
    layer = built(Dense(4), (6,))
    rep = grad_check(layer, np.random.default_rng(9).normal(size=(3, 6)), max_checks=1000)
    assert rep.max_rel_err < 1e-8


class _BrokenDense(Dense):
    def backward(self, grad):
        dx = super().backward(grad)
        self.grads = {k: 1.01 * v for k, v in self.grads.items()}
        return 1.01 * dx


def test_grad_check_catches_corrupted_backward():
    layer = built(_BrokenDense(4), (6,))
    rep = grad_check(layer, np.random.default_rng(10).normal(size=(3, 6)), tolerance=1e-4)
    assert not rep.passed


# -- containers, precision, io ----------------------------------------------

def test_sequential_flags_non_finite():
    net = Sequential([Dense(2)], (3,))
    with pytest.raises(NonFiniteError):
        net.forward(np.array([[np.nan, 0.0, 1.0]]))


def test_float32_path_close_to_float64():
    rng = np.random.default_rng(11)
    net = Sequential([Reshape(4), LSTM(5), ReLU(), BatchNorm(), Flatten(), Dense(2)], (16, 2), rng)
    x = rng.normal(size=(3, 16, 2))
    ref = net.forward(x)
    net.astype(np.float32)
    out = net.forward(x.astype(np.float32))
    assert out.dtype == np.float32
    np.testing.assert_allclose(out, ref, atol=1e-4)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_weights_roundtrip(tmp_path, dtype):
    rng = np.random.default_rng(12)
    tensors = {"0.Dense.W": rng.normal(size=(3, 4)).astype(dtype), "1.BatchNorm.running_var": np.ones(4, dtype),
               "scalar": np.array(2.5, dtype)}
    path = tmp_path / "w.mrfw"
    save_weights(path, tensors)
    raw = path.read_bytes()
    assert raw[:4] == b"MRFW"
    back = load_weights(path)
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == dtype and np.array_equal(back[k], tensors[k])


def test_weights_rejects_corruption(tmp_path):
    path = tmp_path / "w.mrfw"
    save_weights(path, {"a": np.ones(5)})
    (tmp_path / "t.mrfw").write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ValueError):
        load_weights(tmp_path / "t.mrfw")
    (tmp_path / "m.mrfw").write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        load_weights(tmp_path / "m.mrfw")
