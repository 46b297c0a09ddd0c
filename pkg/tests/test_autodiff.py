import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dapa_lab.autodiff import (AdamState, ContractError, MLPParams, NonFiniteGradientError, Tape, Tensor,
                               adam_step, backward, concat, forward_mlp, grad_check, init_mlp, matmul,
                               paused, stack, active_tape)

finite = st.floats(-2.0, 2.0, allow_nan=False, allow_infinity=False)


def _p(a, name=None):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True, name=name)


def test_identity_layer_passes_input_through():
    mlp = MLPParams([_p(np.eye(3))], [_p(np.zeros(3))], ["identity"])
    x = np.array([0.3, -1.0, 2.5])
    np.testing.assert_array_equal(forward_mlp(mlp, x).data, x)


def test_zero_weights_return_bias():
    mlp = MLPParams([_p(np.zeros((4, 2)))], [_p([0.7, -0.2])], ["identity"])
    out = forward_mlp(mlp, np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_array_equal(out.data, np.tile([0.7, -0.2], (5, 1)))


def test_two_layer_tanh_matches_hand_value():
    # oracle: math.tanh evaluated by hand on these weights
    mlp = MLPParams([_p([[0.1, 0.2], [0.3, -0.4]]), _p([[0.7], [-0.6]])], [_p([0.05, -0.05]), _p([0.1])],
                    ["tanh", "identity"])
    assert forward_mlp(mlp, np.array([0.5, -1.0])).item() == pytest.approx(-0.29130212730743754, abs=1e-15)


def test_mlp_rejects_unchained_layers():
    with pytest.raises(ContractError):
        MLPParams([_p(np.zeros((3, 2))), _p(np.zeros((4, 1)))], [_p(np.zeros(2)), _p(np.zeros(1))],
                  ["tanh", "identity"])


def test_sum_gradient_is_ones():
    x = _p(np.arange(6.0).reshape(2, 3))
    with Tape() as tape:
        loss = x.sum()
    (g,) = backward(tape, loss, [x])
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_squared_norm_gradient_matches_formula(rng):
    w = _p(rng.normal(size=(3, 4)))
    x = rng.normal(size=(4, 1))
    with Tape() as tape:
        loss = matmul(w, x).square().sum()
    (g,) = backward(tape, loss, [w])
    np.testing.assert_allclose(g, 2 * (w.data @ x) @ x.T, rtol=1e-13)


def test_random_net_matches_finite_differences(rng):
    mlp = init_mlp([5, 7, 3], rng)
    x = rng.normal(size=(4, 5))
    rep = grad_check(lambda: forward_mlp(mlp, x).square().mean(), mlp.parameters(), tolerance=1e-6)
    assert rep.passed, rep.max_rel_error


def test_linear_function_grad_check_is_exact():
    a = _p([1.5, -2.0, 0.25])
    rep = grad_check(lambda: (a * np.array([2.0, 3.0, -1.0])).sum(), [a], tolerance=1e-9)
    assert rep.passed


@pytest.mark.parametrize("op", ["exp", "tanh", "sin", "cos", "softplus", "square", "sqrt", "log",
                                "div", "pow", "getitem", "concat", "stack", "clip", "mean", "swap"])
def test_op_gradients(op, rng):
    x = _p(rng.uniform(0.2, 1.5, size=(3, 4)))
    y = _p(rng.uniform(0.5, 1.5, size=(3, 4)))
    fns = {
        "exp": lambda: x.exp().sum(), "tanh": lambda: x.tanh().sum(), "sin": lambda: x.sin().sum(),
        "cos": lambda: x.cos().sum(), "softplus": lambda: x.softplus().sum(),
        "square": lambda: x.square().sum(), "sqrt": lambda: x.sqrt().sum(), "log": lambda: x.log().sum(),
        "div": lambda: (x / y).sum(), "pow": lambda: (x ** 1.7).sum(),
        "getitem": lambda: (x[1:, ::2] * y[:2, 1::2]).sum(),
        "concat": lambda: (concat([x, y], axis=0) ** 2).sum(),
        "stack": lambda: (stack([x, y], axis=1).sin()).sum(),
        "clip": lambda: (x.clip(0.5, 1.0) * y).sum(),
        "mean": lambda: (x * y).mean(axis=0).square().sum(),
        "swap": lambda: (x.swapaxes(0, 1) @ y).sum(),
    }
    rep = grad_check(fns[op], [x, y] if op not in ("exp", "tanh", "sin", "cos", "softplus", "square", "sqrt", "log")
                     else [x], tolerance=1e-6)
    assert rep.passed, rep.max_rel_error


def test_zero_gradient_leaves_params_and_counts_step():
    p = _p([1.0, -2.0])
    state = AdamState.for_params([p])
    adam_step(state, [p], [np.zeros(2)])
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.step == 1


def test_first_step_moments():
    p = _p([0.0, 0.0])
    g = np.array([0.5, -3.0])
    state = AdamState.for_params([p], lr=0.1)
    adam_step(state, [p], [g])
    np.testing.assert_allclose(state.m[0], 0.1 * g, rtol=1e-15)
    np.testing.assert_allclose(state.v[0], 0.001 * g * g, rtol=1e-12)


def test_first_step_value():
    # oracle: x1 = x0 - lr * g / (|g| + eps) after bias correction
    p = _p([1.0])
    state = AdamState.for_params([p], lr=0.1)
    adam_step(state, [p], [np.array([0.5])])
    assert p.data[0] == pytest.approx(0.900000002, abs=1e-15)


def test_adam_converges_on_quadratic():
    x = _p([5.0])
    state = AdamState.for_params([x], lr=0.1)
    for _ in range(200):
        with Tape() as tape:
            loss = ((x - 2.0) ** 2).sum()
        adam_step(state, [x], backward(tape, loss, [x]))
        x.grad = None
    assert abs(x.data[0] - 2.0) < 1e-3


def test_non_finite_gradient_leaves_state_untouched():
    p = _p([1.0, 2.0], name="w")
    state = AdamState.for_params([p])
    with pytest.raises(NonFiniteGradientError, match="w"):
        adam_step(state, [p], [np.array([np.nan, 0.0])])
    assert state.step == 0
    np.testing.assert_array_equal(p.data, [1.0, 2.0])


def test_paused_suspends_recording():
    x = _p([1.0])
    with Tape() as tape:
        with paused():
            assert active_tape() is None
            _ = x * 2.0
        assert active_tape() is tape
    assert len(tape) == 0


@given(arrays(np.float64, (3,), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_product_rule_property(a, b):
    x, y = _p(a), _p(b)
    with Tape() as tape:
        loss = (x * y).sum()
    gx, gy = backward(tape, loss, [x, y])
    np.testing.assert_array_equal(gx, b)
    np.testing.assert_array_equal(gy, a)


@given(arrays(np.float64, (2, 3), elements=finite))
def test_broadcast_add_gradient_sums_over_batch(a):
    b = _p(np.zeros(3))
    with Tape() as tape:
        loss = (Tensor(a) + b).square().sum()
    (g,) = backward(tape, loss, [b])
    np.testing.assert_allclose(g, 2 * a.sum(axis=0), atol=1e-12)
