import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incremad.errors import ConfigError, LabelError, NumericError, ShapeError
from incremad.nn import (
    Batch,
    MlpModel,
    OptimizerState,
    backward,
    cce_loss_and_grad,
    default_widths,
    finite_diff_check,
    forward,
    forward_activations,
    init_model,
    loss_and_grads,
    per_sample_sq_grad_sum,
    sgd_step,
)


def random_batch(rng, n, d, c):
    return Batch(rng.normal(size=(n, d)), rng.integers(0, c, size=n))


# init_model ----------------------------------------------------------------

def test_init_is_deterministic():
    a, b = init_model([2, 2], seed=7), init_model([2, 2], seed=7)
    for p, q in zip(a.params, b.params):
        assert p.tobytes() == q.tobytes()


def test_default_architecture_parameter_count():
    widths = default_widths(512, 2)
    assert widths == [512, 250, 125, 64, 2]
    model = init_model(widths, seed=0)
    assert model.n_layers == 4
    expected = sum(fan_in * fan_out + fan_out for fan_in, fan_out in zip(widths[:-1], widths[1:]))
    assert expected == 167_819
    assert model.n_params() == expected


def test_init_shapes_and_scale():
    model = init_model([300, 200, 3], seed=1)
    assert model.weights[0].shape == (200, 300)
    assert model.biases[1].shape == (3,)
    assert all(np.all(b == 0) for b in model.biases)
    assert model.weights[0].var() == pytest.approx(2 / 300, rel=0.05)


@pytest.mark.parametrize("widths", [[3], [], [4, 0, 2], [4, -1]])
def test_init_rejects_degenerate_widths(widths):
    with pytest.raises(ConfigError):
        init_model(widths, seed=0)


# forward -------------------------------------------------------------------

def test_zero_model_gives_zero_logits():
    model = init_model([5, 4, 3], seed=0)
    for p in model.params:
        p[...] = 0
    out = forward(model, np.random.default_rng(0).normal(size=(6, 5)))
    assert np.all(out == 0)


def test_identity_model():
    model = MlpModel([2, 2], [np.eye(2)], [np.zeros(2)])
    np.testing.assert_array_equal(forward(model, np.array([[3.0, -1.0]])), [[3.0, -1.0]])


def test_forward_matches_hand_evaluation():
    rng = np.random.default_rng(3)
    model = init_model([4, 5, 3, 2], seed=11)
    for b in model.biases:
        b[...] = rng.normal(size=b.shape)
    x = rng.normal(size=4)

    h = list(x)
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        nxt = []
        for i in range(w.shape[0]):
            s = b[i]
            for j in range(w.shape[1]):
                s += w[i, j] * h[j]
            nxt.append(max(s, 0.0) if k < model.n_layers - 1 else s)
        h = nxt
    np.testing.assert_allclose(forward(model, x)[0], h, rtol=1e-13)


def test_forward_rejects_wrong_width():
    model = init_model([4, 2], seed=0)
    with pytest.raises(ShapeError):
        forward(model, np.zeros((3, 5)))


# cross-entropy -------------------------------------------------------------

def test_cce_uniform_two_class():
    loss, _ = cce_loss_and_grad(np.zeros((3, 2)), [0, 1, 1])
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_cce_saturated_is_stable():
    loss, grad = cce_loss_and_grad(np.array([[1000.0, -1000.0]]), [0])
    assert loss == pytest.approx(0.0, abs=1e-300)
    assert np.all(np.isfinite(grad))


def test_cce_three_class_value():
    loss, _ = cce_loss_and_grad(np.array([[1.0, 2.0, 3.0]]), [2])
    assert loss == pytest.approx(math.log(1 + math.exp(-1) + math.exp(-2)), rel=1e-14)
    assert loss == pytest.approx(0.4076, abs=1e-4)


def test_cce_gradient_is_softmax_minus_onehot_over_n():
    logits = np.array([[0.5, -0.2], [1.0, 3.0]])
    _, grad = cce_loss_and_grad(logits, [1, 0])
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    p[0, 1] -= 1
    p[1, 0] -= 1
    np.testing.assert_allclose(grad, p / 2, rtol=1e-14)


def test_cce_label_out_of_range():
    with pytest.raises(LabelError):
        cce_loss_and_grad(np.zeros((2, 2)), [0, 2])


@given(st.floats(min_value=-1e4, max_value=1e4), st.floats(min_value=-1e4, max_value=1e4),
       st.integers(0, 1))
def test_cce_never_produces_non_finite(a, b, label):
    loss, grad = cce_loss_and_grad(np.array([[a, b]]), [label])
    assert math.isfinite(loss)
    assert np.all(np.isfinite(grad))


# backward ------------------------------------------------------------------

def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(0)
    model = init_model([6, 4, 3], seed=0)
    grads = backward(model, rng.normal(size=(5, 6)), np.zeros((5, 3)))
    assert all(np.all(g == 0) for g in grads)


def test_last_bias_gradient_is_column_sum():
    rng = np.random.default_rng(1)
    model = init_model([6, 4, 3], seed=1)
    dlog = rng.normal(size=(5, 3))
    grads = backward(model, rng.normal(size=(5, 6)), dlog)
    np.testing.assert_allclose(grads[-1], dlog.sum(axis=0), rtol=1e-14)


def test_backward_shape_mismatch():
    model = init_model([6, 4, 3], seed=1)
    with pytest.raises(ShapeError):
        backward(model, np.zeros((5, 6)), np.zeros((5, 2)))


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(2)
    model = init_model([7, 6, 5, 3], seed=2)
    assert finite_diff_check(model, random_batch(rng, 6, 7, 3)) < 1e-5


def test_per_sample_squared_gradients_match_loop():
    rng = np.random.default_rng(4)
    model = init_model([5, 4, 3], seed=4)
    x = rng.normal(size=(6, 5))
    dlog = rng.normal(size=(6, 3))
    acts, _ = forward_activations(model, x)
    fast = per_sample_sq_grad_sum(model, acts, dlog)
    slow = [np.zeros_like(p) for p in model.params]
    for i in range(6):
        for acc, g in zip(slow, backward(model, x[i:i + 1], dlog[i:i + 1])):
            acc += g ** 2
    for f, s in zip(fast, slow):
        np.testing.assert_allclose(f, s, rtol=1e-12, atol=1e-15)


# sgd -----------------------------------------------------------------------

def _unit_model():
    return MlpModel([1, 1], [np.array([[1.0]])], [np.array([0.0])])


def test_first_step_moves_by_learning_rate():
    model = _unit_model()
    opt = OptimizerState.for_model(model, 0.01, 0.9)
    sgd_step(model, [np.ones((1, 1)), np.ones(1)], opt)
    assert model.weights[0][0, 0] == 1.0 - 0.01
    assert model.biases[0][0] == -0.01


def test_two_momentum_steps_unroll():
    model = _unit_model()
    opt = OptimizerState.for_model(model, 0.01, 0.9)
    g = [np.ones((1, 1)), np.ones(1)]
    sgd_step(model, g, opt)
    sgd_step(model, g, opt)
    assert model.biases[0][0] == pytest.approx(-0.029, abs=1e-15)


def test_zero_momentum_is_plain_gradient_descent():
    rng = np.random.default_rng(5)
    model = init_model([4, 3, 2], seed=5)
    reference = model.copy()
    opt = OptimizerState.for_model(model, 0.05, 0.0)
    for _ in range(5):
        batch = random_batch(rng, 4, 4, 2)
        _, g = loss_and_grads(model, batch)
        _, g_ref = loss_and_grads(reference, batch)
        sgd_step(model, g, opt)
        for p, q in zip(reference.params, g_ref):
            p -= 0.05 * q
    for p, q in zip(model.params, reference.params):
        assert p.tobytes() == q.tobytes()


def test_non_finite_gradient_names_location():
    model = init_model([3, 2], seed=0)
    opt = OptimizerState.for_model(model)
    grads = [np.zeros((2, 3)), np.zeros(2)]
    grads[0][1, 2] = np.nan
    with pytest.raises(NumericError, match=r"layer0\.weight at index \(1, 2\)"):
        sgd_step(model, grads, opt)


def test_optimizer_rejects_bad_hyperparameters():
    model = init_model([3, 2], seed=0)
    with pytest.raises(ConfigError):
        OptimizerState.for_model(model, learning_rate=0.0)
    with pytest.raises(ConfigError):
        OptimizerState.for_model(model, momentum=1.0)


# finite_diff_check ---------------------------------------------------------

def test_fd_check_linear_model_is_exact():
    rng = np.random.default_rng(6)
    model = init_model([4, 3], seed=6)
    assert finite_diff_check(model, random_batch(rng, 5, 4, 3)) < 1e-9


def test_fd_check_small_mlp():
    rng = np.random.default_rng(7)
    model = init_model([8, 5, 3], seed=7)
    assert finite_diff_check(model, random_batch(rng, 4, 8, 3)) < 1e-5


@pytest.mark.parametrize("eps", [0.0, -1e-5])
def test_fd_check_rejects_non_positive_eps(eps):
    model = init_model([2, 2], seed=0)
    with pytest.raises(ConfigError):
        finite_diff_check(model, Batch(np.zeros((1, 2)), [0]), eps)


# properties ----------------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(1, 8), st.integers(2, 4), st.integers(1, 8),
       st.integers(0, 2**32 - 1))
def test_gradient_soundness(d, h, c, n, seed):
    rng = np.random.default_rng(seed)
    model = init_model([d, h, c], seed)
    for b in model.biases:
        b[...] = rng.normal(scale=0.1, size=b.shape)
    assert finite_diff_check(model, random_batch(rng, n, d, c)) < 1e-5


def test_small_step_decreases_batch_loss():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        model = init_model([6, 8, 4, 3], seed)
        batch = random_batch(rng, 8, 6, 3)
        before, grads = loss_and_grads(model, batch)
        sgd_step(model, grads, OptimizerState.for_model(model, 1e-3, 0.9))
        after, _ = loss_and_grads(model, batch)
        assert after < before, seed


def test_training_is_bitwise_deterministic():
    def train(seed):
        rng = np.random.default_rng(seed)
        model = init_model([5, 6, 2], seed)
        opt = OptimizerState.for_model(model)
        for _ in range(20):
            _, g = loss_and_grads(model, random_batch(rng, 8, 5, 2))
            sgd_step(model, g, opt)
        return model

    a, b = train(9), train(9)
    assert a.flat().tobytes() == b.flat().tobytes()
