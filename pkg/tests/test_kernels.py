import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instrumentnet import kernels as K
from instrumentnet.kernels import ActivationKind


def naive_conv(x, w, b):
    """Direct loops: zero-pad by 2, correlate with every 3x3 kernel."""
    c_in, h, wd = x.shape
    c_out = w.shape[0]
    xp = np.pad(x, ((0, 0), (2, 2), (2, 2)))
    out = np.zeros((c_out, h + 2, wd + 2))
    for o in range(c_out):
        for i in range(h + 2):
            for j in range(wd + 2):
                out[o, i, j] = np.sum(xp[:, i:i + 3, j:j + 3] * w[o]) + b[o]
    return out


def naive_pool(x):
    c, h, w = x.shape
    ho, wo = h // 3, w // 3
    out = np.empty((c, ho, wo))
    for k in range(c):
        for i in range(ho):
            for j in range(wo):
                out[k, i, j] = x[k, 3 * i:3 * i + 3, 3 * j:3 * j + 3].max()
    return out


# --- convolution ---------------------------------------------------------

@pytest.mark.parametrize("shape", [(1, 5, 7), (3, 4, 4), (2, 1, 1)])
def test_conv_matches_direct_loops(rng, shape):
    x = rng.standard_normal(shape)
    w = rng.standard_normal((4, shape[0], 3, 3))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(K.conv2d(x, w, b), naive_conv(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_grows_each_side_by_one(rng):
    out = K.conv2d(rng.standard_normal((1, 43, 128)), rng.standard_normal((2, 1, 3, 3)), np.zeros(2))
    assert out.shape == (2, 45, 130)


def test_conv_delta_kernel_is_shifted_copy():
    x = np.arange(12.0).reshape(1, 3, 4)
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    out = K.conv2d(x, w, np.zeros(1))
    # the centre tap reproduces the input one step in from the padded border
    np.testing.assert_array_equal(out[0, 1:-1, 1:-1], x[0])
    assert out[0, 0].sum() == 0 and out[0, -1].sum() == 0


def test_conv_gradients_match_finite_differences(rng):
    x = rng.standard_normal((2, 2, 4, 3))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    state = {}

    def fwd(x, w, b):
        out, state["cache"] = K.conv2d_forward(x, w, b)
        return out

    err = K.gradient_check(fwd, lambda d: K.conv2d_backward(d, state["cache"]), [x, w, b])
    assert err < 1e-6


def test_conv_without_input_gradient(rng):
    out, cache = K.conv2d_forward(rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((2, 1, 3, 3)),
                                  np.zeros(2), need_dx=False)
    dx, dw, db = K.conv2d_backward(np.ones_like(out), cache)
    assert dx is None and dw.shape == (2, 1, 3, 3) and db.shape == (2,)


def test_conv_rejects_wrong_kernel():
    with pytest.raises(K.ShapeError):
        K.conv2d(np.zeros((2, 4, 4)), np.zeros((1, 3, 3, 3)), np.zeros(1))


# --- pooling -------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(3, 11), st.integers(3, 11), st.integers(0, 2 ** 31))
def test_maxpool_matches_brute_force(c, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((c, h, w))
    np.testing.assert_array_equal(K.maxpool2d(x), naive_pool(x))


def test_maxpool_drops_remainder():
    assert K.maxpool2d(np.zeros((1, 8, 130))).shape == (1, 2, 43)


def test_maxpool_tie_routes_gradient_to_first_maximum():
    x = np.ones((1, 1, 3, 3))
    out, cache = K.maxpool_forward(x)
    dx = K.maxpool_backward(np.ones_like(out), cache)
    assert dx[0, 0, 0, 0] == 1.0 and dx.sum() == 1.0


def test_maxpool_gradient(rng):
    x = rng.standard_normal((2, 2, 7, 6))
    state = {}

    def fwd(x):
        out, state["c"] = K.maxpool_forward(x)
        return out

    assert K.gradient_check(fwd, lambda d: (K.maxpool_backward(d, state["c"]),), [x]) < 1e-6


def test_global_max_pool(rng):
    x = rng.standard_normal((5, 6, 2))
    np.testing.assert_array_equal(K.global_max_pool(x), x.reshape(5, -1).max(axis=1))
    state = {}

    def fwd(x):
        out, state["c"] = K.global_max_pool_forward(x)
        return out

    xb = rng.standard_normal((3, 2, 4, 5))
    assert K.global_max_pool_forward(xb)[0].shape == (2, 3)
    assert K.gradient_check(fwd, lambda d: (K.global_max_pool_backward(d, state["c"]),), [xb]) < 1e-6


# --- dense, activations, sigmoid, dropout -------------------------------

def test_dense(rng):
    x, w, b = rng.standard_normal(6), rng.standard_normal((4, 6)), rng.standard_normal(4)
    np.testing.assert_allclose(K.dense(x, w, b), w @ x + b)
    state = {}

    def fwd(x, w, b):
        out, state["c"] = K.dense_forward(x, w, b)
        return out

    err = K.gradient_check(fwd, lambda d: K.dense_backward(d, state["c"]),
                           [rng.standard_normal((3, 6)), w, b])
    assert err < 1e-6


@pytest.mark.parametrize("kind,z,expected", [
    (ActivationKind("relu", 0.0), [-2.0, 0.0, 3.0], [0.0, 0.0, 3.0]),
    (ActivationKind("lrelu", 0.33), [-2.0, 0.0, 3.0], [-0.66, 0.0, 3.0]),
    (ActivationKind("lrelu", 0.01), [-100.0, 1.0], [-1.0, 1.0]),
    (ActivationKind("tanh", 0.0), [0.0, 1.0], [0.0, np.tanh(1.0)]),
])
def test_activation_values(kind, z, expected):
    np.testing.assert_allclose(K.activate(np.array(z), kind), expected)


def test_prelu_uses_per_channel_slope():
    z = -np.ones((2, 1, 2, 2))
    y = K.activate(z, ActivationKind("prelu", 0.25), alpha=np.array([0.1, 0.5]))
    np.testing.assert_allclose(y[0], -0.1)
    np.testing.assert_allclose(y[1], -0.5)


def test_derivative_at_zero_takes_positive_branch():
    for kind in (ActivationKind("relu", 0.0), ActivationKind("lrelu", 0.33)):
        _, cache = K.activate_forward(np.zeros(3), kind)
        dz, _ = K.activate_backward(np.ones(3), cache)
        np.testing.assert_array_equal(dz, 1.0)


@pytest.mark.parametrize("kind", ["tanh", "relu", "lrelu(0.33)", "lrelu(0.01)"])
def test_activation_gradients(rng, kind):
    kind = ActivationKind.parse(kind)
    z = rng.standard_normal((3, 2, 4, 4))
    z[np.abs(z) < 1e-3] = 0.5  # keep central differences off the kink
    state = {}

    def fwd(z):
        y, state["c"] = K.activate_forward(z, kind)
        return y

    assert K.gradient_check(fwd, lambda d: (K.activate_backward(d, state["c"])[0],), [z]) < 1e-6


def test_prelu_gradient_includes_slope(rng):
    kind = ActivationKind("prelu", 0.25)
    z = rng.standard_normal((3, 2, 4, 4))
    z[np.abs(z) < 1e-3] = 0.5
    alpha = np.array([0.1, 0.25, 0.4])
    state = {}

    def fwd(z, a):
        y, state["c"] = K.activate_forward(z, kind, a)
        return y

    assert K.gradient_check(fwd, lambda d: K.activate_backward(d, state["c"]), [z, alpha]) < 1e-6


def test_inplace_activation_matches_copy(rng):
    z = rng.standard_normal((2, 3, 4, 4))
    kind = ActivationKind("lrelu", 0.33)
    y_copy, _ = K.activate_forward(z, kind)
    y_inplace, _ = K.activate_forward(z.copy(), kind, inplace=True)
    np.testing.assert_array_equal(y_copy, y_inplace)


def test_activation_parse_and_validation():
    assert ActivationKind.parse("lrelu(0.01)") == ActivationKind("lrelu", 0.01)
    assert str(ActivationKind.parse("lrelu")) == "lrelu(0.33)"
    assert ActivationKind.parse("prelu").alpha == 0.25
    with pytest.raises(ValueError):
        ActivationKind("swish")
    with pytest.raises(ValueError):
        ActivationKind("lrelu", 1.5)


def test_sigmoid_is_stable_and_correct(rng):
    z = np.array([-1000.0, -30.0, 0.0, 30.0, 1000.0])
    y = K.sigmoid(z)
    assert np.all(np.isfinite(y)) and y[2] == 0.5
    assert y[0] == 0.0 and y[-1] == 1.0
    z = rng.standard_normal(50) * 5
    np.testing.assert_allclose(K.sigmoid(z), 1 / (1 + np.exp(-z)), rtol=1e-14)
    np.testing.assert_allclose(K.sigmoid(z) + K.sigmoid(-z), 1.0, rtol=1e-14)


def test_sigmoid_gradient(rng):
    state = {}

    def fwd(z):
        state["y"] = K.sigmoid(z)
        return state["y"]

    assert K.gradient_check(fwd, lambda d: (K.sigmoid_backward(d, state["y"]),),
                            [rng.standard_normal((4, 11))]) < 1e-6


def test_dropout_inverted_scaling(rng):
    x = np.ones(200_000)
    out = K.dropout(x, 0.25, True, rng)
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 1 / 0.75)
    assert abs((out == 0).mean() - 0.25) < 0.01
    assert abs(out.mean() - 1.0) < 0.01
    np.testing.assert_array_equal(K.dropout(x, 0.25, False, rng), x)


def test_dropout_backward_uses_mask(rng):
    out, mask = K.dropout_forward(np.ones(10), 0.5, True, rng)
    np.testing.assert_array_equal(K.dropout_backward(np.ones(10), mask), out)


# --- losses ----------------------------------------------------------------

def test_literal_cross_entropy_value():
    pred = np.array([[0.2, 0.7, 0.1]])
    target = np.array([[0.0, 1.0, 0.0]])
    assert K.categorical_cross_entropy(pred, target) == pytest.approx(-np.log(0.7))


def test_literal_cross_entropy_clips_and_checks_targets():
    assert np.isfinite(K.categorical_cross_entropy(np.array([[0.0, 1.0]]), np.array([[1.0, 0.0]])))
    with pytest.raises(ValueError):
        K.categorical_cross_entropy(np.array([[0.5, 0.5]]), np.array([[1.0, 1.0]]))


@pytest.mark.parametrize("name", ["literal", "normalized", "binary"])
def test_loss_gradients(rng, name):
    pred = rng.uniform(0.05, 0.95, (4, 11))
    target = np.eye(11)[rng.integers(0, 11, 4)]

    def value(p):
        if name == "literal":
            return K.categorical_cross_entropy(p, target)
        fn = K.normalized_cross_entropy if name == "normalized" else K.binary_cross_entropy
        return fn(p, target)[0]

    if name == "literal":
        grad = K.categorical_cross_entropy_grad(pred, target)
    elif name == "normalized":
        grad = K.normalized_cross_entropy(pred, target)[1]
    else:
        grad = K.binary_cross_entropy(pred, target)[1]
    err = K.gradient_check(lambda p: np.array(value(p)), lambda d: (grad * d,), [pred])
    assert err < 1e-6


def test_binary_cross_entropy_value():
    pred = np.array([[0.9, 0.2]])
    target = np.array([[1.0, 0.0]])
    loss, _ = K.binary_cross_entropy(pred, target)
    assert loss == pytest.approx(-np.log(0.9) - np.log(0.8))


# --- optimiser and initialiser ---------------------------------------------

def test_adam_matches_reference_recurrence(rng):
    p = K.Parameter(rng.standard_normal(5), "w")
    ref = p.value.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    for t in range(1, 6):
        g = rng.standard_normal(5)
        p.grad = g
        K.adam_step(p, lr=1e-2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 1e-2 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.value, ref, rtol=1e-12)
    assert p.step_count == 5


def test_adam_first_step_moves_by_learning_rate():
    p = K.Parameter(np.zeros(3), "w")
    p.grad = np.array([2.0, -0.5, 1e3])
    K.adam_step(p, lr=1e-3)
    np.testing.assert_allclose(p.value, [-1e-3, 1e-3, -1e-3], rtol=1e-6)


def test_glorot_limits(rng):
    assert K.fans((64, 32, 3, 3)) == (32 * 9, 64 * 9)
    assert K.fans((1024, 256)) == (256, 1024)
    w = K.glorot_uniform_init((64, 32, 3, 3), rng)
    lim = np.sqrt(6 / (32 * 9 + 64 * 9))
    assert np.abs(w).max() <= lim
    assert abs(w.var() - lim ** 2 / 3) < 0.05 * lim ** 2


def test_gradient_check_detects_wrong_gradient(rng):
    x = rng.standard_normal(5)
    assert K.gradient_check(lambda x: x ** 2, lambda d: (d * x,), [x]) > 0.1
