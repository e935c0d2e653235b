import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrinet import autodiff as ad
from attrinet.autodiff import Graph, OptimizerState, Tensor


def test_sigmoid_symmetry_point():
    out = ad.op_forward("sigmoid", np.array([0.0]))
    assert out.data[0] == 0.5


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = ad.op_forward("matmul", np.eye(3), a)
    np.testing.assert_array_equal(out.data, a)


def test_concat_definition():
    out = ad.op_forward("concat", np.array([1.0, 2.0]), np.array([3.0]))
    np.testing.assert_array_equal(out.data, [1.0, 2.0, 3.0])


def test_op_forward_shape_error_names_primitive():
    with pytest.raises(ad.ShapeMismatchError, match="matmul"):
        ad.op_forward("matmul", np.zeros((2, 3)), np.zeros((2, 3)))


def test_op_forward_rejects_non_finite():
    with pytest.raises(ad.NonFiniteError):
        ad.op_forward("sigmoid", np.array([np.nan]))


def test_op_forward_unknown_tag():
    with pytest.raises(ValueError, match="unknown primitive"):
        ad.op_forward("convolve", np.zeros(3))


# ---------------------------------------------------------------------------
# binary cross-entropy


def test_bce_perfect_prediction():
    loss = ad.bce_loss(Tensor(np.array([1.0])), np.array([1.0]))
    assert 0.0 <= float(loss.data) <= 1e-6


def test_bce_uninformative_is_ln2():
    loss = ad.bce_loss(Tensor(np.array([0.5, 0.5])), np.array([1.0, 0.0]))
    assert math.isclose(float(loss.data), math.log(2.0), rel_tol=1e-12)


def test_bce_hand_evaluated():
    loss = ad.bce_loss(Tensor(np.array([0.9, 0.2])), np.array([1.0, 0.0]))
    expected = -(math.log(0.9) + math.log(0.8)) / 2.0  # 0.164252...
    assert math.isclose(float(loss.data), expected, rel_tol=1e-12)
    assert math.isclose(expected, 0.164252, abs_tol=5e-7)


def test_bce_rejects_bad_labels():
    with pytest.raises(ValueError, match="labels"):
        ad.bce_loss(Tensor(np.array([0.5])), np.array([2.0]))


def test_bce_rejects_length_mismatch():
    with pytest.raises(ad.ShapeMismatchError):
        ad.bce_loss(Tensor(np.array([0.5, 0.5])), np.array([1.0]))


@given(st.lists(st.floats(min_value=1e-6, max_value=1 - 1e-6), min_size=1, max_size=20),
       st.data())
@settings(max_examples=50, deadline=None)
def test_bce_non_negative(probs, data):
    labels = np.array([data.draw(st.sampled_from([0.0, 1.0])) for _ in probs])
    loss = float(ad.bce_loss(Tensor(np.array(probs)), labels).data)
    assert loss >= 0.0


# ---------------------------------------------------------------------------
# backward


def test_sigmoid_gradient_at_zero():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with Graph() as g:
        loss = ad.mean(ad.sigmoid(x))
    g.backward(loss)
    assert math.isclose(x.grad[0], 0.25, rel_tol=1e-12)


def test_unused_parameter_gets_zero_gradient():
    x = Tensor(np.array([[1.0, 2.0]]))
    w = Tensor(np.random.default_rng(0).normal(size=(2, 1)), requires_grad=True)
    w_dead = Tensor(np.random.default_rng(1).normal(size=(2, 1)), requires_grad=True)
    with Graph() as g:
        _dead_end = ad.matmul(x, w_dead)
        loss = ad.mean(ad.matmul(x, w))
    g.backward(loss)
    np.testing.assert_array_equal(w_dead.grad, np.zeros((2, 1)))
    assert np.any(w.grad != 0)


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        y = ad.sigmoid(x)
    with pytest.raises(ValueError, match="scalar"):
        g.backward(y)


def test_backward_requires_loss_from_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with Graph() as g:
        ad.sigmoid(x)
    stray = ad.mean(Tensor(np.ones(2)))
    with pytest.raises(ValueError, match="not produced"):
        g.backward(stray)


def test_backward_twice_identical():
    rng = np.random.default_rng(3)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 4)))
    y = rng.integers(0, 2, 10).astype(float).reshape(5, 2)
    with Graph() as g:
        loss = ad.bce_loss(ad.sigmoid(ad.matmul(x, w)), y)
    g.backward(loss)
    first = w.grad.copy()
    g.backward(loss)
    np.testing.assert_array_equal(first, w.grad)


def test_logistic_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(10, 1)), requires_grad=True)
    x = rng.normal(size=(6, 10))
    y = rng.integers(0, 2, 6).astype(float)

    def f():
        p = ad.reshape(ad.sigmoid(ad.matmul(Tensor(x), w)), (6,))
        return ad.bce_loss(p, y)

    assert ad.finite_diff_check(f, [w], h=1e-5) <= 1e-5


def _scalarize(out):
    return ad.mean(out) if out.data.size > 1 else ad.reshape(out, ())


PRIMITIVE_CASES = [
    "matmul", "add", "add_bias", "multiply", "scale", "negate", "concat",
    "slice", "reshape", "transpose", "gather", "sigmoid", "tanh", "relu",
    "log", "mean",
]


@pytest.mark.parametrize("op", PRIMITIVE_CASES)
@pytest.mark.parametrize("seed", range(7))
def test_primitive_gradients_match_finite_differences(op, seed):
    # 16 primitives x 7 seeds > 100 random probes in total
    rng = np.random.default_rng((hash(op) % 2**32, seed))
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)

    def build():
        if op == "matmul":
            return _scalarize(ad.matmul(a, Tensor(rng_fixed)))
        if op == "add":
            return _scalarize(ad.add(a, Tensor(rng_fixed[:3, :4])))
        if op == "add_bias":
            return _scalarize(ad.add(a, bias))
        if op == "multiply":
            return _scalarize(ad.multiply(a, Tensor(rng_fixed[:3, :4])))
        if op == "scale":
            return _scalarize(ad.scale(a, 2.5))
        if op == "negate":
            return _scalarize(ad.negate(a))
        if op == "concat":
            return _scalarize(ad.concat([a, Tensor(rng_fixed[:3, :2])], axis=1))
        if op == "slice":
            return _scalarize(ad.slice_axis(a, 1, 3, axis=1))
        if op == "reshape":
            return _scalarize(ad.reshape(a, (2, 6)))
        if op == "transpose":
            return _scalarize(ad.matmul(ad.transpose(a), a))
        if op == "gather":
            return _scalarize(ad.gather_rows(a, np.array([0, 2, 2])))
        if op == "sigmoid":
            return _scalarize(ad.sigmoid(a))
        if op == "tanh":
            return _scalarize(ad.tanh(a))
        if op == "relu":
            return _scalarize(ad.multiply(ad.relu(a), a))
        if op == "log":
            return _scalarize(ad.log(ad.add(ad.multiply(a, a), ones)))
        if op == "mean":
            return ad.mean(a)
        raise AssertionError(op)

    rng_fixed = rng.normal(size=(4, 5))
    bias = Tensor(rng.normal(size=4), requires_grad=True)
    ones = Tensor(np.ones((3, 4)))
    params = [a, bias] if op == "add_bias" else [a]
    assert ad.finite_diff_check(build, params, h=1e-5) <= 1e-5


def test_relu_gradient_zero_below_threshold():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    with Graph() as g:
        loss = ad.mean(ad.relu(x))
    g.backward(loss)
    np.testing.assert_allclose(x.grad, [0.0, 0.5])


@given(st.lists(st.floats(min_value=-30, max_value=30), min_size=1, max_size=30))
@settings(max_examples=50, deadline=None)
def test_sigmoid_tanh_strict_ranges(values):
    x = np.array(values)
    s = ad.sigmoid(Tensor(x)).data
    t = ad.tanh(Tensor(x)).data
    assert np.all((s > 0.0) & (s < 1.0))
    assert np.all((t > -1.0) & (t < 1.0))


# ---------------------------------------------------------------------------
# optimizer


def _params(shape=(3,), value=1.0, grad=None):
    p = Tensor(np.full(shape, value), requires_grad=True)
    if grad is not None:
        p.grad = np.full(shape, grad)
    return p


def test_adam_zero_gradient_leaves_parameters():
    p = _params(grad=0.0)
    state = OptimizerState()
    adam_before = p.data.copy()
    ad.adam_step([p], state)
    np.testing.assert_array_equal(p.data, adam_before)


def test_adam_first_step_moves_by_lr_sign():
    for g in (0.3, -2.0, 11.0):
        p = _params(grad=g)
        state = OptimizerState(lr=1e-3)
        ad.adam_step([p], state)
        np.testing.assert_allclose(p.data, 1.0 - 1e-3 * np.sign(g), atol=1e-9)


def test_adam_bookkeeping_after_two_steps():
    p = _params(grad=0.5)
    state = OptimizerState()
    ad.adam_step([p], state)
    p.grad = np.full(3, 0.5)
    ad.adam_step([p], state)
    assert state.step == 2
    assert np.all(state.v[id(p)] > 0)


def test_adam_shape_mismatch():
    p = _params()
    p.grad = np.zeros(5)
    with pytest.raises(ad.ShapeMismatchError):
        ad.adam_step([p], OptimizerState())


def test_adam_non_finite_gradient():
    p = _params(grad=np.inf)
    with pytest.raises(ad.NonFiniteError):
        ad.adam_step([p], OptimizerState())


def test_adam_skips_frozen_parameters():
    p = _params(grad=1.0)
    p.requires_grad = False
    state = OptimizerState()
    ad.adam_step([p], state)
    np.testing.assert_array_equal(p.data, np.ones(3))
    assert not state.m


def test_optimizer_state_validation():
    with pytest.raises(ValueError):
        OptimizerState(lr=-1.0)


# ---------------------------------------------------------------------------
# finite-difference checker


def test_finite_diff_exact_for_quadratic():
    w = Tensor(np.random.default_rng(0).normal(size=6), requires_grad=True)

    def f():
        return ad.scale(ad.mean(ad.multiply(w, w)), 3.0)

    assert ad.finite_diff_check(f, [w], h=1e-5) <= 1e-9


def test_finite_diff_rejects_bad_step():
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda: ad.mean(w), [w], h=0.0)
