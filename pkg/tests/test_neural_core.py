import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradcheck
from scatterfield import nn


def away_from_zero(rng, shape, lo=0.05):
    # a shift rather than a clamp, so no two entries tie for the max
    x = rng.normal(size=shape)
    return x + lo * np.sign(x)


# --- kernels -----------------------------------------------------------------

def test_dense_identity_and_shape_errors():
    x = np.random.default_rng(0).normal(size=(5, 4))
    out = nn.dense(nn.Tensor(x), nn.Tensor(np.eye(4)), nn.Tensor(np.zeros(4)))
    np.testing.assert_array_equal(out.value, x)
    with pytest.raises(ValueError):
        nn.dense(nn.Tensor(x), nn.Tensor(np.eye(3)), nn.Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        nn.conv3d(nn.Tensor(np.zeros((1, 2, 4, 4, 4))), nn.Tensor(np.zeros((1, 3, 3, 3, 3))))


def test_relu_examples():
    x = np.array([-2.0, -0.1, 0.0, 0.3, 4.0])
    np.testing.assert_array_equal(nn.relu(nn.Tensor(x)).value, [0, 0, 0, 0.3, 4.0])


def test_sigmoid_stable_at_extremes():
    s = nn.sigmoid(nn.Tensor(np.array([-800.0, 0.0, 800.0]))).value
    np.testing.assert_array_equal(s, [0.0, 0.5, 1.0])


def test_conv_identity_kernel():
    x = np.random.default_rng(1).normal(size=(2, 3, 4, 4, 4))
    k = np.zeros((3, 3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1, 1] = 1.0
    np.testing.assert_allclose(nn.conv3d_forward(x, k), x, rtol=1e-12)


def test_replicate_padding_on_constant_field():
    x = np.full((1, 1, 4, 4, 4), 2.0)
    k = np.ones((1, 1, 3, 3, 3))
    np.testing.assert_allclose(nn.conv3d_forward(x, k), 54.0)
    assert nn.conv3d_forward(x, k, padding="zero")[0, 0, 0, 0, 0] == pytest.approx(16.0)


# --- finite-difference gradients ---------------------------------------------

@pytest.mark.parametrize("trial", range(20))
def test_dense_gradient(trial):
    rng = np.random.default_rng(trial)
    arrays = {"x": rng.normal(size=(4, 5)), "W": rng.normal(size=(5, 3)), "b": rng.normal(size=3)}
    err = gradcheck.check(lambda t: nn.relu(nn.dense(t["x"], t["W"], t["b"])), arrays, rng)
    assert err < 1e-4


@pytest.mark.parametrize("trial", range(20))
@pytest.mark.parametrize("padding", ["replicate", "zero"])
def test_conv3d_gradient(trial, padding):
    rng = np.random.default_rng(100 + trial)
    arrays = {"x": rng.normal(size=(2, 2, 3, 4, 3)), "k": rng.normal(size=(3, 2, 3, 3, 3))}
    err = gradcheck.check(lambda t: nn.conv3d(t["x"], t["k"], padding), arrays, rng)
    assert err < 1e-4


@pytest.mark.parametrize("trial", range(20))
def test_elementwise_and_pooling_gradients(trial):
    rng = np.random.default_rng(200 + trial)
    arrays = {"a": away_from_zero(rng, (3, 6)), "b": rng.normal(size=(3, 6))}

    def f(t):
        s = nn.sort_last(nn.add(nn.mul(t["a"], t["b"]), nn.sigmoid(t["b"])))
        pooled = nn.concat([nn.mean_last(s), nn.max_last(nn.relu(t["a"])), nn.take(s, slice(1, 3))])
        return nn.scale(pooled, 1.7)

    assert gradcheck.check(f, arrays, rng) < 1e-4


@pytest.mark.parametrize("trial", range(20))
def test_attention_gradient(trial):
    rng = np.random.default_rng(300 + trial)
    params = nn.Params()
    nn.add_attention(params, "se", rng, np.float64)
    arrays = dict(params.arrays)
    arrays.update({"rho": rng.random((4, 6)), "f": rng.random((4, 6)), "T": rng.random((4, 6)),
                   "g": rng.uniform(-0.9, 0.9, (4, 1)), "alpha": rng.uniform(0, np.pi, (4, 1)),
                   "H": rng.normal(size=(4, 3, 5))})

    def f(t):
        p = nn.Params(arrays)
        p.leaves = {k: t[k] for k in params.arrays}
        v = nn.attention_input(t["rho"], t["f"], t["T"], t["g"], t["alpha"])
        w = nn.attention_weight(v, p, "se")
        return nn.attention_apply(t["H"], w)

    assert gradcheck.check(f, arrays, rng) < 1e-4


# --- attention ---------------------------------------------------------------

def test_literal_attention_at_zero_is_half():
    w = nn.attention_weight(nn.Tensor(np.zeros((2, 8))), mode="literal")
    np.testing.assert_array_equal(w.value, 0.5)
    with pytest.raises(ValueError):
        nn.attention_weight(nn.Tensor(np.zeros((1, 8))), mode="other")


@given(st.integers(0, 2**31 - 1), st.integers(0, 7), st.floats(0.0, 5.0))
def test_literal_attention_monotone(seed, coord, bump):
    v = np.random.default_rng(seed).normal(size=(1, 8))
    u = v.copy()
    u[0, coord] += bump
    a = nn.attention_weight(nn.Tensor(v), mode="literal").value
    b = nn.attention_weight(nn.Tensor(u), mode="literal").value
    assert np.all(b >= a)


@given(st.integers(0, 2**31 - 1))
def test_learned_attention_in_open_unit_interval(seed):
    rng = np.random.default_rng(seed)
    params = nn.Params()
    nn.add_attention(params, "se", rng, np.float64)
    w = nn.attention_weight(nn.Tensor(rng.normal(scale=3.0, size=(16, 8))), params, "se").value
    assert w.shape == (16, 3)
    assert np.all(w > 0) and np.all(w < 1)


def test_attention_input_layout():
    rho = nn.Tensor(np.array([[1.0, 3.0]]))
    f = nn.Tensor(np.array([[0.2, 0.4]]))
    T = nn.Tensor(np.array([[0.5, 0.9]]))
    v = nn.attention_input(rho, f, T, nn.Tensor(np.array([[0.8]])), nn.Tensor(np.array([[1.2]]))).value
    np.testing.assert_allclose(v, [[2.0, 0.3, 0.7, 3.0, 0.4, 0.9, 0.8, 1.2]])


def test_attention_apply_examples():
    rng = np.random.default_rng(0)
    H = rng.normal(size=(2, 3, 4))
    np.testing.assert_array_equal(nn.attention_apply(nn.Tensor(H), nn.Tensor(np.ones((2, 3)))).value, H)
    np.testing.assert_array_equal(nn.attention_apply(nn.Tensor(H), nn.Tensor(np.zeros((2, 3)))).value, 0.0)
    w = rng.random((2, 3))
    G = rng.normal(size=H.shape)
    lhs = nn.attention_apply(nn.Tensor(2 * H - G), nn.Tensor(w)).value
    rhs = (2 * nn.attention_apply(nn.Tensor(H), nn.Tensor(w)).value
           - nn.attention_apply(nn.Tensor(G), nn.Tensor(w)).value)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-12, atol=1e-12)
    one = nn.attention_apply(nn.Tensor(H[:, 0]), nn.Tensor(w), type_index=2).value
    np.testing.assert_allclose(one, H[:, 0] * w[:, 2:3])


# --- optimizer ---------------------------------------------------------------

def test_adam_zero_gradient_keeps_parameters():
    p = {"x": np.array([1.0, -2.0])}
    st_ = nn.TrainState(p, lr=0.1)
    nn.adam_step(st_, {"x": np.zeros(2)})
    np.testing.assert_array_equal(p["x"], [1.0, -2.0])
    with pytest.raises(ValueError):
        nn.adam_step(st_, {"x": np.zeros(3)})


def test_adam_first_step_is_signed_learning_rate():
    p = {"x": np.array([1.0, -2.0, 0.5])}
    g = np.array([3.0, -0.01, 2e-3])
    nn.adam_step(nn.TrainState(p, lr=0.05), {"x": g})
    expect = np.array([1.0, -2.0, 0.5]) - 0.05 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p["x"], expect, rtol=1e-12)


def test_adam_decreases_quadratic():
    p = {"x": np.array([3.0])}
    state = nn.TrainState(p, lr=0.1)
    vals = []
    for _ in range(25):
        vals.append(float(p["x"][0] ** 2))
        nn.adam_step(state, {"x": 2 * p["x"]})
    # steps of roughly lr while far from the minimum, so f falls every step
    assert all(b < a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 0.1 * vals[0]


def test_adam_deterministic():
    def run():
        rng = np.random.default_rng(0)
        p = {"w": rng.normal(size=(4, 4)).astype(np.float32)}
        s = nn.TrainState(p, lr=1e-2)
        for _ in range(10):
            nn.adam_step(s, {"w": (p["w"] * 2 - 1).astype(np.float32)})
        return p["w"]

    np.testing.assert_array_equal(run(), run())
