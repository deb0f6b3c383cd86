import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from targetedmil import numerics as nx
from targetedmil.numerics import (
    GradCheckError,
    NonFiniteError,
    OptimizerState,
    Tensor,
    backward,
    grad_check,
    optimizer_step,
)


def param(values):
    return Tensor(np.array(values, dtype=float), requires_grad=True)


def test_grad_of_sum_is_ones():
    p = param([0.3, -1.0, 2.0])
    backward(p.sum())
    assert np.array_equal(p.grad, [1.0, 1.0, 1.0])


def test_grad_of_sum_of_squares():
    p = param([1.0, 2.0])
    backward((p * p).sum())
    assert np.array_equal(p.grad, [2.0, 4.0])


def test_logistic_grad_matches_finite_differences():
    w = param([0.3, -0.2])
    x = np.array([1.0, 2.0])
    backward(nx.sigmoid(nx.matmul(w, x)))
    h = 1e-5
    fd = []
    for i in range(2):
        up, down = w.data.copy(), w.data.copy()
        up[i] += h
        down[i] -= h
        s = lambda v: 1.0 / (1.0 + np.exp(-(v @ x)))
        fd.append((s(up) - s(down)) / (2 * h))
    np.testing.assert_allclose(w.grad, fd, rtol=1e-6)


def test_backward_requires_scalar():
    with pytest.raises(ValueError):
        backward(param([1.0, 2.0]) * 2.0)


def test_unreachable_params_get_zero_grad():
    a, b = param([1.0]), param([5.0, 6.0])
    b.grad = np.array([9.0, 9.0])
    backward((a * 3.0).sum(), params=[a, b])
    assert np.array_equal(b.grad, [0.0, 0.0])
    assert np.array_equal(a.grad, [3.0])


def test_nan_in_forward_names_the_op():
    with pytest.raises(NonFiniteError, match="log"):
        nx.log(param([-1.0]))


def test_max_with_index_ties_and_gradient():
    p = param([0.7, 0.7, 0.1])
    top, idx = nx.max_with_index(p)
    assert idx == 0
    backward(top)
    assert np.array_equal(p.grad, [1.0, 0.0, 0.0])


def test_broadcast_add_unbroadcasts_gradient():
    a = param(np.ones((3, 2)))
    b = param([1.0, 2.0])
    backward((a + b).sum())
    assert np.array_equal(b.grad, [3.0, 3.0])


# each op checked against central differences on random inputs in [-2, 2]
UNARY = {
    "sigmoid": nx.sigmoid,
    "softplus": nx.softplus,
    "exp": nx.exp,
    "square": nx.square,
    "neg": nx.neg,
    "log": lambda t: nx.log(nx.exp(t) + 0.5),
    "clip": lambda t: nx.clip(t, -5.0, 5.0),
    "sum_axis": lambda t: nx.tsum(t, axis=0),
    "mean_axis": lambda t: nx.mean(t, axis=1),
    "broadcast": lambda t: nx.broadcast_to(t, (4, 3, 2)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_op_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    p = param(rng.uniform(-2, 2, size=(3, 2)))
    weights = rng.uniform(-1, 1, size=UNARY[name](p).shape)
    rep = grad_check(lambda: (UNARY[name](p) * weights).sum(), [p], h=1e-5, tol=1e-4)
    assert rep.passed, rep


@pytest.mark.parametrize("shapes", [((3, 4), (4, 2)), ((4,), (4, 2)), ((3, 4), (4,)), ((4,), (4,))])
def test_matmul_gradients(shapes):
    rng = np.random.default_rng(7)
    a = param(rng.uniform(-2, 2, size=shapes[0]))
    b = param(rng.uniform(-2, 2, size=shapes[1]))
    out_shape = (a.data @ b.data).shape
    w = rng.uniform(-1, 1, size=out_shape)
    rep = grad_check(lambda: (nx.matmul(a, b) * w).sum(), [a, b], tol=1e-4)
    assert rep.passed, rep


def test_binary_and_concat_gradients():
    rng = np.random.default_rng(3)
    a = param(rng.uniform(-2, 2, size=(2, 3)))
    b = param(rng.uniform(-2, 2, size=(3,)))
    c = param(rng.uniform(-2, 2, size=(1, 3)))
    w = rng.uniform(-1, 1, size=(3, 3))

    def f():
        return (nx.concat([a * b - b, c], axis=0) * w).sum()

    assert grad_check(f, [a, b, c], tol=1e-4).passed


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=1, max_size=6))
def test_max_gradient_is_one_hot(values):
    p = param(values)
    top, idx = nx.max_with_index(p)
    backward(top)
    expected = np.zeros(len(values))
    expected[int(np.argmax(values))] = 1.0
    assert np.array_equal(p.grad, expected)
    assert idx == int(np.argmax(values))


def test_grad_check_exact_on_linear():
    p = param([0.5, -1.5])
    rep = grad_check(lambda: (p * 3.0).sum(), [p], h=1e-3)
    assert rep.max_rel_err < 1e-9


def test_grad_check_rejects_zero_step():
    p = param([1.0])
    with pytest.raises(GradCheckError):
        grad_check(lambda: p.sum(), [p], h=0.0)


def test_grad_check_rejects_nonfinite_probe():
    p = param([1e-6])
    with pytest.raises(GradCheckError):
        grad_check(lambda: nx.log(p).sum(), [p], h=1e-3)


def test_forward_and_backward_are_deterministic():
    def run():
        rng = np.random.default_rng(11)
        a = param(rng.uniform(-2, 2, (5, 4)))
        b = param(rng.uniform(-2, 2, (4, 3)))
        loss = nx.softplus(nx.matmul(a, b)).mean()
        backward(loss)
        return loss.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


# ---------------------------------------------------------------- optimizer


def test_zero_grad_fresh_state_leaves_params():
    p = np.array([1.0, -2.0])
    optimizer_step([p], [np.zeros(2)], OptimizerState())
    assert np.array_equal(p, [1.0, -2.0])


def test_first_step_is_sign_times_lr():
    g = np.array([0.5, -3.0, 1e-3])
    p = np.zeros(3)
    state = optimizer_step([p], [g], OptimizerState(learning_rate=0.01))
    # bias-corrected step 1: m_hat = g, v_hat = g^2
    np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
    assert state.step_count == 1


def test_zero_learning_rate_updates_moments_only():
    p = np.array([1.0])
    state = optimizer_step([p], [np.array([2.0])], OptimizerState(learning_rate=0.0))
    assert p[0] == 1.0
    np.testing.assert_allclose(state.first_moment[0], [0.2])
    np.testing.assert_allclose(state.second_moment[0], [0.004])


def test_optimizer_shape_mismatch():
    with pytest.raises(ValueError):
        optimizer_step([np.zeros(2)], [np.zeros(3)], OptimizerState())


def test_step_count_increments():
    p = np.zeros(1)
    state = OptimizerState()
    for k in range(1, 4):
        optimizer_step([p], [np.ones(1)], state)
        assert state.step_count == k
