import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import adam_first_step, direct_conv2d
from sarad.nn import (
    Conv2d,
    Dense,
    Flatten,
    LeakyRelu,
    LrSchedule,
    NonFiniteGradientError,
    Reshape,
    Sigmoid,
    StaleCacheError,
    Tanh,
    TransposedConv2d,
    adam_step,
    backward,
    build_model,
    forward,
    gradient_check,
    layer_from_dict,
    load_model,
    lr_at,
    predict,
    save_model,
)


def half_sq(out):
    return 0.5 * float(np.sum(out**2)), out


def weighted(seed):
    w = None

    def loss(out):
        nonlocal w
        if w is None or w.shape != out.shape:
            w = np.random.default_rng(seed).normal(size=out.shape)
        return float(np.sum(w * out) + 0.25 * np.sum(out**2)), w + 0.5 * out

    return loss


# --- forward examples -------------------------------------------------------


def test_dirac_conv_is_identity():
    m = build_model([Conv2d(2, 2, 3, 1, 1)], (None, None, 2))
    w = np.zeros((3, 3, 2, 2))
    w[1, 1, 0, 0] = w[1, 1, 1, 1] = 1.0
    m.params["0.weight"][:] = w
    x = np.random.default_rng(0).normal(size=(2, 5, 6, 2))
    assert np.array_equal(forward(m, x)[0], x)


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(1)
    layer = Conv2d(3, 4, 4, 2, 1)
    m = build_model([layer], (8, 8, 3), seed=2)
    m.params["0.bias"][:] = rng.normal(size=4)
    x = rng.normal(size=(2, 8, 8, 3))
    want = direct_conv2d(x, m.params["0.weight"], m.params["0.bias"], 2, 1)
    assert np.allclose(forward(m, x)[0], want, atol=1e-12)


def test_activations():
    m = build_model([LeakyRelu(0.2)], (2,))
    assert forward(m, np.array([[-1.0, 2.0]]))[0].tolist() == [[-0.2, 2.0]]
    assert forward(build_model([Sigmoid()], (1,)), np.zeros((1, 1)))[0].item() == 0.5
    assert forward(build_model([Tanh()], (1,)), np.zeros((1, 1)))[0].item() == 0.0


def test_shape_inference_and_errors():
    enc = build_model([Conv2d(3, 8, 4, 2, 1), Flatten(), Dense(8 * 4 * 4, 5)], (8, 8, 3))
    assert enc.output_shape() == (5,)
    with pytest.raises(ValueError):
        build_model([Conv2d(2, 8, 3)], (8, 8, 3))
    with pytest.raises(ValueError):
        forward(enc, np.zeros((1, 8, 8, 2)))
    with pytest.raises(ValueError):
        build_model([Reshape((3, 3))], (10,))


def test_forward_is_pure():
    m = build_model([Conv2d(1, 3, 3, 1, 1), Tanh(), Conv2d(3, 1, 3, 1, 1)], (None, None, 1), seed=3)
    x = np.random.default_rng(3).normal(size=(2, 7, 7, 1))
    assert np.array_equal(forward(m, x)[0], forward(m, x)[0])
    assert np.allclose(predict(m, x, batch_size=1), forward(m, x)[0], rtol=0, atol=1e-14)


# --- backward ---------------------------------------------------------------


def test_dense_gradient_closed_form():
    m = build_model([Dense(3, 2)], (3,), seed=4)
    x = np.random.default_rng(4).normal(size=(5, 3))
    g = np.random.default_rng(5).normal(size=(5, 2))
    _, cache = forward(m, x)
    grads, gin = backward(m, cache, g)
    assert np.allclose(grads["0.weight"], x.T @ g)
    assert np.allclose(grads["0.bias"], g.sum(0))
    assert np.allclose(gin, g @ m.params["0.weight"].T)


def test_zero_upstream_gradient():
    m = build_model([Conv2d(1, 2, 3), LeakyRelu(), Flatten(), Dense(2 * 3 * 3, 1)], (5, 5, 1), seed=6)
    out, cache = forward(m, np.ones((2, 5, 5, 1)))
    grads, _ = backward(m, cache, np.zeros_like(out))
    assert all(not g.any() for g in grads.values())


LAYER_CASES = [
    ("dense", [Dense(4, 3)], (4,), (3, 4)),
    ("conv_s1", [Conv2d(2, 3, 3, 1, 1)], (5, 5, 2), (2, 5, 5, 2)),
    ("conv_s2", [Conv2d(2, 2, 4, 2, 1)], (6, 6, 2), (2, 6, 6, 2)),
    ("tconv", [TransposedConv2d(2, 2, 4, 2, 1)], (3, 3, 2), (2, 3, 3, 2)),
    ("leaky", [Dense(4, 4), LeakyRelu(0.2)], (4,), (3, 4)),
    ("sigmoid", [Dense(4, 4), Sigmoid()], (4,), (3, 4)),
    ("tanh", [Dense(4, 4), Tanh()], (4,), (3, 4)),
    ("flatten_reshape", [Reshape((2, 2, 1)), Conv2d(1, 1, 2), Flatten()], (4,), (2, 4)),
]


@pytest.mark.parametrize("name,layers,shape,batch_shape", LAYER_CASES, ids=[c[0] for c in LAYER_CASES])
def test_layer_gradients_match_finite_differences(name, layers, shape, batch_shape):
    m = build_model(layers, shape, seed=7)
    for k in m.params:
        if k.endswith("bias"):
            m.params[k][:] = np.random.default_rng(8).normal(size=m.params[k].shape) * 0.1
    x = np.random.default_rng(9).normal(size=batch_shape)
    # nudge away from the LeakyRelu kink
    x[np.abs(x) < 1e-3] += 0.01
    assert gradient_check(m, x, weighted(10)) < 1e-4


def test_composed_toy_autoencoder_gradients():
    layers = [Conv2d(1, 2, 4, 2, 1), LeakyRelu(), Flatten(), Dense(2 * 2 * 2, 3), Dense(3, 8), Reshape((2, 2, 2)),
              TransposedConv2d(2, 1, 4, 2, 1), Sigmoid()]
    m = build_model(layers, (4, 4, 1), seed=11)
    x = np.random.default_rng(12).random((2, 4, 4, 1))
    assert gradient_check(m, x, weighted(13)) < 1e-4


def test_linear_l2_gradient_is_exact():
    m = build_model([Dense(3, 2)], (3,), seed=14)
    x = np.random.default_rng(15).normal(size=(4, 3))
    assert gradient_check(m, x, half_sq) < 1e-8


def test_corrupted_backward_is_caught(monkeypatch):
    m = build_model([Dense(3, 2)], (3,), seed=16)
    x = np.random.default_rng(17).normal(size=(4, 3))
    orig = Dense.backward

    def broken(self, params, cache, grad):
        pg, gi = orig(self, params, cache, grad)
        pg["weight"] = pg["weight"] * 1.1
        return pg, gi

    monkeypatch.setattr(Dense, "backward", broken)
    assert gradient_check(m, x, half_sq) > 1e-2


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(4, 7), st.sampled_from([1, 2]),
       st.integers(0, 1), st.integers(0, 10**6))
def test_conv_adjoint_and_jvp_randomized(cin, cout, k, size, stride, pad, seed):
    rng = np.random.default_rng(seed)
    conv = Conv2d(cin, cout, k, stride, pad)
    tconv = TransposedConv2d(cout, cin, k, stride, pad)
    w = rng.normal(size=(k, k, cin, cout))
    x = rng.normal(size=(1, size, size, cin))
    y, _ = conv.forward({"weight": w, "bias": np.zeros(cout)}, x)
    yy = rng.normal(size=y.shape)
    xt, _ = tconv.forward({"weight": w, "bias": np.zeros(cin)}, yy)
    if xt.shape != x.shape:
        # transposed output can be smaller when (size + 2p - k) is not divisible by the stride
        x = x[:, : xt.shape[1], : xt.shape[2]]
        y, _ = conv.forward({"weight": w, "bias": np.zeros(cout)}, np.pad(x, ((0, 0), (0, size - xt.shape[1]), (0, size - xt.shape[2]), (0, 0))))
    assert abs(np.sum(y * yy) - np.sum(x * xt)) < 1e-10 * max(1.0, np.abs(y * yy).sum())
    # Jacobian-vector product against a central difference
    m = build_model([conv], (size, size, cin), seed=seed % 1000)
    v = rng.normal(size=m.params["0.weight"].shape)
    loss = weighted(seed % 97)
    xin = rng.normal(size=(1, size, size, cin))
    out, cache = forward(m, xin)
    _, g = loss(out)
    grads, _ = backward(m, cache, g)
    analytic = float(np.sum(grads["0.weight"] * v))
    h = 1e-5
    base = m.params["0.weight"].copy()
    m.params["0.weight"][:] = base + h * v
    lp = loss(forward(m, xin)[0])[0]
    m.params["0.weight"][:] = base - h * v
    lm = loss(forward(m, xin)[0])[0]
    numeric = (lp - lm) / (2 * h)
    assert abs(analytic - numeric) <= 1e-4 * max(abs(analytic), abs(numeric), 1e-6)


def test_stale_cache_detected():
    m = build_model([Dense(2, 1)], (2,))
    out, cache = forward(m, np.ones((1, 2)))
    adam_step(m, {"0.weight": np.ones((2, 1)), "0.bias": np.ones(1)}, 0.1)
    with pytest.raises(StaleCacheError):
        backward(m, cache, np.ones_like(out))
    other = m.copy()
    _, cache = forward(m, np.ones((1, 2)))
    with pytest.raises(StaleCacheError):
        backward(other, cache, np.ones_like(out))


# --- Adam and learning rate ---------------------------------------------------


def test_adam_first_step_closed_form():
    m = build_model([Dense(3, 2)], (3,), seed=18)
    before = {k: v.copy() for k, v in m.params.items()}
    g = {"0.weight": np.full((3, 2), 0.37), "0.bias": np.array([-2.0, 5e-3])}
    adam_step(m, g, 1e-3)
    for k in g:
        assert np.allclose(m.params[k], adam_first_step(before[k], g[k], 1e-3), atol=1e-15)
        assert np.allclose(m.params[k] - before[k], -1e-3 * np.sign(g[k]), atol=1e-6)


def test_adam_zero_gradient_and_zero_lr():
    m = build_model([Dense(2, 2)], (2,), seed=19)
    before = {k: v.copy() for k, v in m.params.items()}
    adam_step(m, {k: np.ones_like(v) for k, v in m.params.items()}, 0.0)
    assert all(np.array_equal(m.params[k], before[k]) for k in before)
    m1 = m.adam_m["0.weight"].copy()
    adam_step(m, {k: np.zeros_like(v) for k, v in m.params.items()}, 0.1)
    assert np.allclose(m.adam_m["0.weight"], 0.9 * m1)


def test_adam_deterministic():
    def run():
        m = build_model([Dense(2, 2)], (2,), seed=20)
        for i in range(5):
            adam_step(m, {k: np.full_like(v, np.sin(i + 1)) for k, v in m.params.items()}, 0.01)
        return m.params

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_adam_rejects_nonfinite():
    m = build_model([Dense(2, 1)], (2,))
    with pytest.raises(NonFiniteGradientError, match="0.weight"):
        adam_step(m, {"0.weight": np.array([[np.nan], [0.0]])}, 0.1)


def test_lr_schedule_points():
    s = LrSchedule(1e-3, 1e-2, 10)
    assert lr_at(s, 0) == 1e-3
    assert lr_at(s, 10) == pytest.approx(1e-2)
    assert lr_at(s, 20) == pytest.approx(1e-3)
    assert lr_at(s, 5) == pytest.approx(5.5e-3)
    with pytest.raises(ValueError):
        LrSchedule(2.0, 1.0, 3)


@given(st.floats(0, 1), st.floats(0, 1), st.integers(1, 50), st.integers(0, 500))
def test_lr_periodic_and_continuous(a, b, ramp, i):
    s = LrSchedule(min(a, b), max(a, b), ramp)
    assert lr_at(s, i) == pytest.approx(lr_at(s, i + 2 * ramp), abs=1e-15)
    assert abs(lr_at(s, i + 1) - lr_at(s, i)) <= (s.high - s.low) / ramp + 1e-15
    assert s.low - 1e-15 <= lr_at(s, i) <= s.high + 1e-15


# --- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m = build_model([Conv2d(1, 2, 3, 1, 1), LeakyRelu(0.1), Conv2d(2, 1, 3, 1, 1)], (None, None, 1), seed=21,
                    meta={"scale": 2.0})
    adam_step(m, {k: np.full_like(v, 0.3) for k, v in m.params.items()}, 0.01)
    save_model(m, tmp_path / "ck")
    back = load_model(tmp_path / "ck")
    assert back.layers == m.layers and back.step == 1 and back.meta == {"scale": 2.0}
    assert back.input_shape == (None, None, 1)
    for k in m.params:
        assert np.array_equal(back.params[k], m.params[k])
        assert np.array_equal(back.adam_v[k], m.adam_v[k])


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError, match="manifest"):
        load_model(tmp_path / "nothing")


def test_layer_dict_round_trip():
    for layer in (Dense(2, 3), Conv2d(1, 2, 3, 2, 1), TransposedConv2d(2, 1, 4, 2, 1), LeakyRelu(0.3), Reshape((2, 3))):
        assert layer_from_dict(layer.to_dict()) == layer
    with pytest.raises(ValueError):
        layer_from_dict({"kind": "Nope"})
