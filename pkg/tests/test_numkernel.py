import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from synrec.numkernel import (
    ACTIVATIONS,
    AdamState,
    DenseLayer,
    KernelError,
    MissingCacheError,
    ShapeError,
    adam_step,
    dense_backward,
    dense_forward,
    derive_seed,
    gaussian_reparameterize,
    grad_check,
    loss_eval,
    make_rng,
    reparameterize_backward,
    softmax,
)

from conftest import central_diff

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def test_dense_identity():
    out, _ = dense_forward([1.0, 2.0], DenseLayer(np.eye(2), np.zeros(2), "linear"))
    np.testing.assert_array_equal(out, [1.0, 2.0])


def test_dense_relu_clamps():
    out, _ = dense_forward([-3.0], DenseLayer([[1.0]], [0.0], "relu"))
    assert out[0] == 0.0


def test_dense_hand_product():
    out, _ = dense_forward([1.0, 1.0], DenseLayer([[2.0], [3.0]], [1.0], "linear"))
    assert out[0] == 6.0


def test_dense_dimension_mismatch_names_both():
    with pytest.raises(ShapeError, match="expected 3, got 2"):
        dense_forward([1.0, 2.0], DenseLayer(np.zeros((3, 1)), np.zeros(1)))


def test_dense_bias_length_checked():
    with pytest.raises(ShapeError):
        DenseLayer(np.zeros((2, 3)), np.zeros(2))


def test_backward_linear_weight_grad_is_input():
    x = np.array([0.5, -1.5, 2.0])
    _, cache = dense_forward(x, DenseLayer(np.ones((3, 1)), np.zeros(1)))
    _, gw, gb = dense_backward([1.0], cache)
    np.testing.assert_array_equal(gw[:, 0], x)
    np.testing.assert_array_equal(gb, [1.0])


def test_backward_dead_relu():
    _, cache = dense_forward([2.0], DenseLayer([[-1.0]], [0.0], "relu"))
    gin, gw, _ = dense_backward([1.0], cache)
    assert gin[0] == 0.0 and gw[0, 0] == 0.0


def test_backward_without_cache():
    with pytest.raises(MissingCacheError):
        dense_backward([1.0], None)


@pytest.mark.parametrize("activation", ACTIVATIONS)
def test_backward_matches_finite_differences_3x2(activation):
    rng = np.random.default_rng(3)
    W, b = rng.normal(size=(3, 2)), rng.normal(size=2)
    x = rng.normal(size=(4, 3))
    w_out = rng.normal(size=(4, 2))

    def loss(W_, b_, x_):
        out, _ = dense_forward(x_, DenseLayer(W_, b_, activation))
        return float(np.sum(out * w_out))

    _, cache = dense_forward(x, DenseLayer(W, b, activation))
    gin, gw, gb = dense_backward(w_out, cache)
    for analytic, numeric in ((gw, central_diff(lambda v: loss(v, b, x), W)),
                              (gb, central_diff(lambda v: loss(W, v, x), b)),
                              (gin, central_diff(lambda v: loss(W, b, v), x))):
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        assert rel.max() < 1e-4


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 4), st.sampled_from(ACTIVATIONS),
       st.integers(0, 2**32 - 1))
def test_backward_property_random_shapes(n_in, n_out, batch, activation, seed):
    rng = np.random.default_rng(seed)
    W, b = rng.normal(size=(n_in, n_out)), rng.normal(size=n_out)
    x = rng.normal(size=(batch, n_in))
    # keep pre-activations away from the relu kinks
    z = x @ W + b
    if activation in ("relu", "leaky_relu") and np.min(np.abs(z)) < 1e-3:
        return
    w_out = rng.normal(size=(batch, n_out))
    _, cache = dense_forward(x, DenseLayer(W, b, activation))
    _, gw, _ = dense_backward(w_out, cache)

    def loss(W_):
        return float(np.sum(dense_forward(x, DenseLayer(W_, b, activation))[0] * w_out))

    numeric = central_diff(loss, W)
    rel = np.abs(gw - numeric) / np.maximum(np.maximum(np.abs(gw), np.abs(numeric)), 1e-6)
    assert rel.max() < 1e-4


def test_softmax_uniform():
    np.testing.assert_allclose(softmax(np.zeros(6)), np.full(6, 1 / 6), atol=1e-15)


def test_softmax_dominant_logit():
    out = softmax([1000.0, 0, 0, 0])
    assert out[0] == pytest.approx(1.0) and np.all(np.isfinite(out))


def test_softmax_log_inputs():
    np.testing.assert_allclose(softmax(np.log([1.0, 2.0, 3.0])), [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


def test_softmax_empty():
    with pytest.raises(KernelError):
        softmax([])


@given(arrays(np.float64, st.integers(1, 12), elements=finite), finite)
def test_softmax_sums_to_one_and_is_shift_invariant(logits, shift):
    p = softmax(logits)
    assert abs(p.sum() - 1.0) <= 1e-9
    assert np.all(p > 0) or np.all(p >= 0)
    np.testing.assert_allclose(softmax(logits + shift), p, atol=1e-9)


def test_squared_loss_cases():
    assert loss_eval("squared", [1.0, 2.0], [1.0, 2.0])[0] == 0.0
    value, grad = loss_eval("squared", [0.0, 0.0], [1.0, 2.0])
    assert value == 5.0
    np.testing.assert_array_equal(grad, [-2.0, -4.0])


def test_binary_confident_correct():
    value, _ = loss_eval("binary_cross_entropy", [1 - 1e-12], [1.0])
    assert value == pytest.approx(0.0, abs=1e-9)


def test_loss_shape_mismatch():
    with pytest.raises(ShapeError):
        loss_eval("squared", [1.0, 2.0], [1.0])


@pytest.mark.parametrize("kind", ["squared", "categorical_cross_entropy", "binary_cross_entropy"])
def test_loss_gradients(kind):
    rng = np.random.default_rng(0)
    if kind == "categorical_cross_entropy":
        pred = softmax(rng.normal(size=(3, 4)))
        target = np.eye(4)[[0, 2, 3]]
    else:
        pred = rng.uniform(0.1, 0.9, size=5)
        target = (rng.random(5) > 0.5).astype(float) if kind != "squared" else rng.normal(size=5)
    _, grad = loss_eval(kind, pred, target)
    numeric = central_diff(lambda p: loss_eval(kind, p, target)[0], pred)
    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-7)


@given(arrays(np.float64, 5, elements=st.floats(0.001, 0.999)), arrays(np.float64, 5, elements=st.floats(0, 1)))
def test_losses_non_negative(pred, target):
    assert loss_eval("squared", pred, target)[0] >= 0
    assert loss_eval("binary_cross_entropy", pred, target)[0] >= -1e-12
    probs = pred / pred.sum()
    onehot = np.eye(5)[int(np.argmax(target))]
    assert loss_eval("categorical_cross_entropy", probs, onehot)[0] >= 0


grid = st.integers(-160, 160).map(lambda v: v / 8)


@given(arrays(np.float64, 4, elements=grid), arrays(np.float64, 4, elements=grid))
def test_squared_zero_iff_equal(a, b):
    value, _ = loss_eval("squared", a, b)
    assert (value == 0.0) == bool(np.array_equal(a, b))


def test_adam_zero_gradient_leaves_params():
    params = {"w": np.array([1.0, -2.0])}
    state = AdamState.for_params(params)
    adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"], [1.0, -2.0])
    assert state.step == 1


def test_adam_first_step_magnitude():
    g = np.array([0.3, -5.0])
    params = {"w": np.zeros(2)}
    state = AdamState.for_params(params, learning_rate=1e-3)
    adam_step(params, {"w": g}, state)
    # at t=1: m_hat = g, v_hat = g^2
    expected = -1e-3 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(params["w"], expected, rtol=1e-12)


def test_adam_shape_mismatch():
    params = {"w": np.zeros(2)}
    with pytest.raises(ShapeError):
        adam_step(params, {"w": np.zeros(3)}, AdamState.for_params(params))


def test_adam_deterministic():
    def run():
        rng = make_rng(11)
        params = {"w": rng.normal(size=(3, 3))}
        state = AdamState.for_params(params)
        for _ in range(5):
            adam_step(params, {"w": rng.normal(size=(3, 3))}, state)
        return params["w"]

    np.testing.assert_array_equal(run(), run())


def test_rng_streams():
    assert make_rng(5).random() == make_rng(5).random()
    assert make_rng(5, "a").random() != make_rng(5, "b").random()
    assert derive_seed(1, "x") == derive_seed(1, "x")
    assert 0 <= derive_seed(2**64 - 1, 3) < 2**63


def test_reparameterize_zero_variance():
    mean = np.array([0.5, -1.0])
    out, _ = gaussian_reparameterize(mean, np.zeros(2), make_rng(0))
    np.testing.assert_array_equal(out, mean)


def test_reparameterize_zero_noise_and_standard_case():
    mean = np.array([3.0, 4.0])
    out, _ = gaussian_reparameterize(mean, np.ones(2), noise=np.zeros(2))
    np.testing.assert_array_equal(out, mean)
    e = np.array([0.7, -0.2])
    out, _ = gaussian_reparameterize(np.zeros(2), np.ones(2), noise=e)
    np.testing.assert_array_equal(out, e)


def test_reparameterize_negative_variance():
    with pytest.raises(KernelError):
        gaussian_reparameterize(np.zeros(1), -np.ones(1), make_rng(0))


@given(arrays(np.float64, 3, elements=finite))
def test_reparameterize_zero_variance_property(mean):
    out, _ = gaussian_reparameterize(mean, np.zeros(3), make_rng(1))
    np.testing.assert_array_equal(out, mean)


def test_reparameterize_backward():
    rng = np.random.default_rng(2)
    mean, var, eps, up = rng.normal(size=3), rng.uniform(0.2, 2, 3), rng.normal(size=3), rng.normal(size=3)
    gm, gv = reparameterize_backward(up, var, eps)
    f = lambda v: float(np.sum(up * gaussian_reparameterize(mean, v, noise=eps)[0]))
    np.testing.assert_allclose(gv, central_diff(f, var), rtol=1e-6)
    np.testing.assert_array_equal(gm, up)


def test_grad_check_linear_model():
    rng = np.random.default_rng(4)
    X, y = rng.normal(size=(10, 3)), rng.normal(size=10)
    params = {"w": rng.normal(size=3)}

    def loss_fn(p):
        value, g = loss_eval("squared", X @ p["w"], y)
        return value, {"w": X.T @ g}

    assert grad_check(loss_fn, params) < 1e-6


def test_grad_check_catches_wrong_gradient():
    params = {"w": np.array([1.0, 2.0])}
    assert grad_check(lambda p: (float(np.sum(p["w"] ** 2)), {"w": p["w"]}), params) > 0.4


def test_grad_check_non_finite_loss():
    with pytest.raises(KernelError):
        grad_check(lambda p: (float("nan"), {"w": p["w"]}), {"w": np.zeros(1)})


def test_grad_check_restores_params():
    params = {"w": np.array([1.0, 2.0, 3.0])}
    grad_check(lambda p: (float(np.sum(p["w"] ** 2)), {"w": 2 * p["w"]}), params)
    np.testing.assert_array_equal(params["w"], [1.0, 2.0, 3.0])
