import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avchase import diffcore as dc
from avchase.diffcore import ParamStore, Tape, Tensor, backward, grad_check

from oracles import conv2d_loops, gru_loops, matmul_loops, softmax_direct


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_zeros():
    a = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(dc.matmul(a, np.eye(3)).data, a)
    np.testing.assert_array_equal(dc.matmul(np.zeros((2, 3)), np.ones((3, 5))).data,
                                  np.zeros((2, 5)))


def test_matmul_matches_loops():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(dc.matmul(a, b).data, matmul_loops(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        dc.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_backward_formulas():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.standard_normal((3, 4))), leaf(rng.standard_normal((4, 2)))
    g = rng.standard_normal((3, 2))
    with Tape() as tape:
        loss = dc.dsum(dc.mul(dc.matmul(a, b), g))
    backward(tape, loss)
    np.testing.assert_allclose(a.grad, g @ b.data.T, atol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, atol=1e-12)


# ---------------------------------------------------------------- conv2d

def test_conv_delta_kernel():
    x = np.arange(9.0).reshape(1, 3, 3)
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1.0
    out = dc.conv2d(x, k, 1).data
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == x[0, 1, 1]


def test_conv_counting():
    out = dc.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 2, 2)), 2).data
    np.testing.assert_array_equal(out, np.full((1, 2, 2), 4.0))


@pytest.mark.parametrize("stride", [1, 2, 3])
def test_conv_matches_loops(stride):
    rng = np.random.default_rng(stride)
    x = rng.standard_normal((2, 9, 8))
    k = rng.standard_normal((3, 2, 3, 2))
    np.testing.assert_allclose(dc.conv2d(x, k, stride).data, conv2d_loops(x, k, stride),
                               rtol=0, atol=1e-12)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 2, 7, 7))
    k = rng.standard_normal((4, 2, 3, 3))
    batched = dc.conv2d(x, k, 2).data
    for i in range(3):
        np.testing.assert_array_equal(batched[i], dc.conv2d(x[i], k, 2).data)


def test_conv_kernel_too_large():
    with pytest.raises(ValueError):
        dc.conv2d(np.ones((1, 2, 2)), np.ones((1, 1, 3, 3)), 1)


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_grad_check(stride):
    rng = np.random.default_rng(5)
    ps = ParamStore()
    ps["x"] = rng.standard_normal((2, 2, 6, 7))
    ps["k"] = rng.standard_normal((3, 2, 3, 2))
    w = rng.standard_normal(dc.conv2d(ps["x"].data, ps["k"].data, stride).shape)
    err = grad_check(lambda p: dc.dsum(dc.mul(dc.conv2d(p["x"], p["k"], stride), w)), ps)
    assert err <= 1e-6


# ---------------------------------------------------------------- activations / softmax

def test_activation_values():
    np.testing.assert_array_equal(dc.activation(np.zeros(3), "sigmoid").data, [0.5] * 3)
    np.testing.assert_array_equal(dc.activation([-1.0, 2.0], "relu").data, [0.0, 2.0])
    with pytest.raises(ValueError):
        dc.activation([1.0], "gelu")


@pytest.mark.parametrize("kind", ["tanh", "sigmoid", "relu"])
def test_activation_grad(kind):
    ps = ParamStore()
    # keep relu inputs away from the kink
    ps["x"] = np.array([-1.3, -0.4, 0.2, 0.7, 1.9])
    w = np.array([0.3, -1.0, 2.0, 0.5, -0.7])
    assert grad_check(lambda p: dc.dsum(dc.mul(dc.activation(p["x"], kind), w)), ps) <= 1e-6


def test_sigmoid_extreme_inputs_finite():
    y = dc.sigmoid(np.array([-1000.0, 0.0, 1000.0])).data
    assert np.all(np.isfinite(y))
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])


def test_softmax_examples():
    np.testing.assert_array_equal(dc.softmax(np.zeros(2)).data, [0.5, 0.5])
    rng = np.random.default_rng(2)
    v = rng.standard_normal(4)
    np.testing.assert_allclose(dc.softmax(v).data, softmax_direct(v), rtol=0, atol=1e-12)
    np.testing.assert_allclose(dc.softmax(v + 7.5).data, dc.softmax(v).data, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.sampled_from([0, 1, -1]))
def test_softmax_simplex(x, axis):
    y = dc.softmax(x, axis=axis).data
    assert np.all(y > 0)
    np.testing.assert_allclose(y.sum(axis=axis), 1.0, atol=1e-9)


def test_softmax_and_log_softmax_grads():
    rng = np.random.default_rng(4)
    ps = ParamStore()
    ps["x"] = rng.standard_normal((3, 4))
    w = rng.standard_normal((3, 4))
    assert grad_check(lambda p: dc.dsum(dc.mul(dc.softmax(p["x"], axis=0), w)), ps) <= 1e-6
    assert grad_check(lambda p: dc.dsum(dc.mul(dc.log_softmax(p["x"], axis=-1), w)), ps) <= 1e-6


# ---------------------------------------------------------------- GRU

def _gru_params(rng, d_in, d_h, scale=1.0):
    p = {}
    for g in "zrh":
        p[f"W_{g}"] = scale * rng.standard_normal((d_in, d_h))
        p[f"U_{g}"] = scale * rng.standard_normal((d_h, d_h))
        p[f"b_{g}"] = scale * rng.standard_normal(d_h)
    return p


def test_gru_zero_params():
    p = {k: np.zeros(v.shape) for k, v in _gru_params(np.random.default_rng(0), 3, 4).items()}
    h = np.array([1.0, -2.0, 0.5, 4.0])
    np.testing.assert_array_equal(dc.gru_cell(np.ones(3), h, p).data, 0.5 * h)
    np.testing.assert_array_equal(dc.gru_cell(np.ones(3), np.zeros(4), p).data, np.zeros(4))


def test_gru_matches_loops():
    rng = np.random.default_rng(8)
    p = _gru_params(rng, 3, 4, 0.5)
    x, h = rng.standard_normal(3), rng.standard_normal(4)
    np.testing.assert_allclose(dc.gru_cell(x, h, p).data, gru_loops(x, h, p), atol=1e-12)


def test_gru_shape_mismatch():
    p = _gru_params(np.random.default_rng(0), 3, 4)
    with pytest.raises(ValueError):
        dc.gru_cell(np.ones(5), np.zeros(4), p)


def test_gru_grad_check():
    rng = np.random.default_rng(9)
    ps = ParamStore()
    for k, v in _gru_params(rng, 3, 4, 0.5).items():
        ps[k] = v
    ps["x"] = rng.standard_normal((2, 3))
    ps["h"] = rng.standard_normal((2, 4))
    w = rng.standard_normal((2, 4))
    assert grad_check(lambda p: dc.dsum(dc.mul(dc.gru_cell(p["x"], p["h"], p), w)), ps) <= 1e-5


# ---------------------------------------------------------------- backward semantics

def test_backward_sum_gives_ones():
    x = leaf(np.arange(5.0))
    with Tape() as tape:
        loss = dc.dsum(x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones(5))


def test_backward_zero_times_f():
    x = leaf(np.array([0.3, -1.2]))
    with Tape() as tape:
        loss = dc.mul(dc.dsum(dc.tanh(x)), 0.0)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.zeros(2))


def test_backward_accumulates():
    rng = np.random.default_rng(1)
    x = leaf(rng.standard_normal(4))
    with Tape() as tape:
        loss = dc.dsum(dc.square(dc.sigmoid(x)))
    backward(tape, loss)
    once = x.grad.copy()
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, 2 * once)


def test_backward_rejects_foreign_loss():
    x = leaf(np.ones(3))
    with Tape():
        loss = dc.dsum(x)
    with pytest.raises(ValueError):
        backward(Tape(), loss)


def test_untaped_ops_record_nothing():
    t = Tape()
    dc.matmul(np.ones((2, 2)), np.ones((2, 2)))
    assert len(t) == 0


def test_forward_is_pure():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 3, 5, 5))
    k = rng.standard_normal((2, 3, 2, 2))
    a = dc.softmax(dc.conv2d(x, k, 1), axis=1).data
    b = dc.softmax(dc.conv2d(x, k, 1), axis=1).data
    assert a.tobytes() == b.tobytes()


def test_composed_pipeline_grad():
    """conv -> relu -> matmul -> softmax -> weighted sum."""
    rng = np.random.default_rng(11)
    ps = ParamStore()
    ps["x"] = rng.standard_normal((1, 6, 6))
    ps["k"] = rng.standard_normal((2, 1, 3, 3))
    ps["w"] = rng.standard_normal((8, 3))
    target = rng.standard_normal((1, 3))

    def f(p):
        h = dc.relu(dc.conv2d(p["x"], p["k"], 2))  # 2 x 2 x 2
        z = dc.matmul(dc.reshape(h, (1, 8)), p["w"])
        return dc.dsum(dc.mul(dc.softmax(z), target))

    assert grad_check(f, ps) <= 1e-4


# ---------------------------------------------------------------- grad_check itself

def test_grad_check_quadratic():
    ps = ParamStore()
    ps["t"] = np.random.default_rng(0).standard_normal(6)
    assert grad_check(lambda p: dc.dsum(dc.square(p["t"])), ps, h=1e-5) <= 1e-9


def test_grad_check_zero_gradient():
    ps = ParamStore()
    ps["t"] = np.ones(3)
    assert grad_check(lambda p: dc.mul(dc.dsum(p["t"]), 0.0), ps) == 0.0


def test_grad_check_non_finite():
    ps = ParamStore()
    ps["t"] = np.array([-1.0])
    with pytest.raises(FloatingPointError):
        with np.errstate(invalid="ignore"):
            grad_check(lambda p: dc.dsum(dc.log(p["t"])), ps)
    with pytest.raises(ValueError):
        grad_check(lambda p: dc.dsum(p["t"]), ps, h=0.0)


def test_param_store_unique_names():
    ps = ParamStore()
    ps["a"] = np.zeros(2)
    assert ps["a"].grad is not None and ps["a"].grad.shape == (2,)
    with pytest.raises(KeyError):
        ps["a"] = np.ones(2)
