import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from xmd import tensor as tn
from xmd.tensor import GradCheckError, ShapeError, Tensor, backward, grad_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_matmul_identity():
    a = leaf([[1.0, 2.0], [3.0, 4.0]])
    out = tn.matmul(a, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_shape_error_names_op_and_shapes():
    with pytest.raises(ShapeError) as exc:
        tn.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3)" in msg


def test_add_rejects_general_broadcast():
    with pytest.raises(ShapeError):
        tn.add(leaf(np.ones((2, 3))), leaf(np.ones((2, 1))))


def test_log_softmax_uniform():
    out = tn.log_softmax(leaf([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, -np.log(3.0) * np.ones(3), rtol=0, atol=1e-15)


def test_log_softmax_large_logits_finite():
    out = tn.log_softmax(leaf([1e4, -1e4, 0.0]))
    assert np.all(np.isfinite(out.data))


def test_layer_norm_moments():
    x = leaf(np.random.default_rng(0).normal(size=8) * 3 + 1)
    y = tn.layer_norm(x, eps=0.0).data
    assert abs(y.mean()) < 1e-12
    assert abs(y.var() - 1.0) < 1e-12


def test_square_gradient():
    x = leaf([3.0])
    backward(tn.mul(x, x))
    assert x.grad[0] == 6.0


def test_relu_gate_gradient():
    x = leaf([-1.0, 2.0])
    backward(tn.tensor_sum(tn.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_shared_input_accumulates():
    x = leaf([1.5])
    backward(tn.add(x, x))
    assert x.grad[0] == 2.0


def test_backward_rejects_non_scalar():
    with pytest.raises(ShapeError):
        backward(tn.relu(leaf([1.0, 2.0])))


def test_grads_reset_between_passes():
    x = leaf([2.0])
    backward(tn.mul(x, x))
    backward(tn.mul(x, x))
    assert x.grad[0] == 4.0


def test_take_out_of_range():
    with pytest.raises(IndexError):
        tn.take(leaf(np.ones((3, 2))), np.array([3]))


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with tn.no_grad():
        y = tn.mul(x, x)
    assert y.is_leaf and not y.requires_grad


def test_grad_check_square():
    x = leaf([3.0])
    rep = grad_check(lambda: tn.mul(x, x), [x], epsilon=1e-5, tolerance=1e-6)
    assert rep.passed and rep.checked == 1


def test_softmax_ce_gradient_closed_form():
    z = leaf(np.random.default_rng(1).normal(size=5))
    target = 2
    onehot = np.eye(5)[target]
    loss = tn.scale(tn.masked_sum(tn.log_softmax(z), onehot), -1.0)
    backward(loss)
    p = np.exp(z.data - z.data.max())
    p /= p.sum()
    np.testing.assert_allclose(z.grad, p - onehot, rtol=1e-6, atol=1e-12)
    rep = grad_check(lambda: tn.scale(tn.masked_sum(tn.log_softmax(z), onehot), -1.0), [z],
                     epsilon=1e-5, tolerance=1e-6)
    assert rep.passed


def test_grad_check_reports_nonfinite_coordinate():
    x = leaf([1e-6])

    def g():
        if x.data[0] < 0:
            return Tensor([np.nan])
        return tn.mul(x, x)

    with pytest.raises(GradCheckError, match="coordinate 0"):
        grad_check(g, [x], epsilon=1e-5)


def test_grad_check_rejects_bad_epsilon():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        grad_check(lambda: tn.mul(x, x), [x], epsilon=0.0)


def _unary_cases():
    w = np.array([0.3, -1.2, 0.7, 2.0])
    return {
        "relu": lambda x: tn.masked_sum(tn.relu(x), w),
        "log_softmax": lambda x: tn.masked_sum(tn.log_softmax(x), w),
        "softmax": lambda x: tn.masked_sum(tn.softmax(x), w),
        "layer_norm": lambda x: tn.masked_sum(tn.layer_norm(x), w),
        "scale": lambda x: tn.masked_sum(tn.scale(x, -2.5), w),
        "mul": lambda x: tn.masked_sum(tn.mul(x, x), w),
        "narrow": lambda x: tn.tensor_sum(tn.narrow(x, 0, 1, 3)),
    }


@pytest.mark.parametrize("name", sorted(_unary_cases()))
@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_primitive_gradients_match_finite_differences(name, seed):
    values = np.random.default_rng(seed).uniform(-2, 2, 4)
    if name == "relu":
        values = np.where(np.abs(values) < 1e-3, 0.5, values)  # keep clear of the kink
    x = leaf(values)
    rep = grad_check(lambda: _unary_cases()[name](x), [x], epsilon=1e-5, tolerance=1e-5)
    assert rep.passed, (name, rep.max_rel_error)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matmul_gradient(seed):
    rng = np.random.default_rng(seed)
    a, b = leaf(rng.uniform(-2, 2, (2, 3))), leaf(rng.uniform(-2, 2, (3, 2)))
    w = np.arange(4.0).reshape(2, 2) - 1.5
    rep = grad_check(lambda: tn.masked_sum(tn.matmul(a, b), w), [a, b], epsilon=1e-5,
                     tolerance=1e-5)
    assert rep.passed


def test_batched_matmul_and_gather_gradients():
    rng = np.random.default_rng(2)
    a, b = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 4, 3)))
    table = leaf(rng.normal(size=(5, 3)))
    ids = np.array([[0, 4, 4], [1, 0, 2]])
    w = rng.normal(size=(2, 3, 3))

    def f():
        return tn.masked_sum(tn.add(tn.matmul(a, b), tn.take(table, ids)), w)

    assert grad_check(f, [a, b, table], epsilon=1e-5, tolerance=1e-5).passed


def test_layer_norm_affine_reshape_transpose_concat_gradients():
    rng = np.random.default_rng(4)
    x = leaf(rng.normal(size=(2, 3, 4)))
    g, b = leaf(rng.normal(size=4)), leaf(rng.normal(size=4))
    y = leaf(rng.normal(size=(2, 1, 4)))
    w = rng.normal(size=(4, 2, 4))

    def f():
        h = tn.layer_norm(tn.concat([x, y], axis=1), g, b)
        h = tn.transpose(tn.reshape(h, (2, 4, 4)), (1, 0, 2))
        return tn.masked_sum(h, w)

    assert grad_check(f, [x, g, b, y], epsilon=1e-5, tolerance=1e-5).passed


def test_trailing_broadcast_gradient():
    rng = np.random.default_rng(5)
    x, v = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=4))
    w = rng.normal(size=(3, 4))
    rep = grad_check(lambda: tn.masked_sum(tn.mul(tn.add(x, v), v), w), [x, v], epsilon=1e-5,
                     tolerance=1e-5)
    assert rep.passed


def test_sampled_coordinates():
    x = leaf(np.linspace(-1, 1, 50))
    rep = grad_check(lambda: tn.masked_sum(tn.mul(x, x), np.ones(50)), [x], n_samples=7)
    assert rep.checked == 7 and rep.passed


def test_floor_separates_roundoff_from_relative_error():
    # a 1e-9 gradient on a loss of 1e3: central differences only see roundoff
    x = leaf([0.5])
    offset = Tensor(np.array([1e3]))

    def f():
        return tn.tensor_sum(tn.add(tn.scale(x, 1e-9), offset))

    strict = grad_check(f, [x], epsilon=1e-6, tolerance=1e-4)
    loose = grad_check(f, [x], epsilon=1e-6, tolerance=1e-4, floor=1e-2)
    assert not strict.passed and strict.max_rel_error > 1e-2
    assert loose.passed and loose.below_floor == 1 and loose.floor == 1e-2
