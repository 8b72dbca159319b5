import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adamkml import diffcore as dc
from adamkml.diffcore import Tensor
from adamkml.errors import InvalidArgumentError, InvalidShapeError, NumericError


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def test_conv_of_ones_sums_window():
    out = dc.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_1x1_scale_and_shift():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = dc.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)), Tensor(np.array([1.0])))
    np.testing.assert_array_equal(out.data[0, 0], [[3, 5], [7, 9]])


def test_conv_shape_with_padding():
    rng = np.random.default_rng(0)
    out = dc.conv2d(Tensor(rng.normal(size=(2, 4, 8, 8))), Tensor(rng.normal(size=(8, 4, 3, 3))), padding=1)
    assert out.shape == (2, 8, 8, 8)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(3, 9), w=st.integers(3, 9), k=st.sampled_from([1, 3]),
       stride=st.integers(1, 2), pad=st.integers(0, 1))
def test_conv_output_shape_formula(h, w, k, stride, pad):
    out = dc.conv2d(Tensor(np.zeros((1, 2, h, w))), Tensor(np.zeros((3, 2, k, k))), stride=stride, padding=pad)
    assert out.shape == (1, 3, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(InvalidShapeError):
        dc.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_elementwise_values():
    np.testing.assert_array_equal(dc.hadamard(Tensor([1.0, 2, 3]), Tensor([4.0, 5, 6])).data, [4, 10, 18])
    np.testing.assert_allclose(dc.leaky_relu(Tensor([-1.0, 2.0])).data, [-0.2, 2.0])
    assert dc.softplus(Tensor([0.0])).data[0] == pytest.approx(np.log(2), abs=1e-12)
    np.testing.assert_array_equal(dc.elementwise("add", Tensor([1.0]), Tensor([2.0])).data, [3.0])


def test_hadamard_shape_mismatch():
    with pytest.raises(InvalidShapeError):
        dc.hadamard(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_unknown_elementwise_op():
    with pytest.raises(InvalidArgumentError):
        dc.elementwise("cosh", Tensor([1.0]))


def test_outer_product_cases():
    np.testing.assert_array_equal(dc.outer_product(Tensor([1.0, 2]), Tensor([3.0, 4, 5])).data,
                                  [[3, 4, 5], [6, 8, 10]])
    np.testing.assert_array_equal(dc.outer_product(Tensor([0.0, 0]), Tensor([7.0])).data, [[0], [0]])
    np.testing.assert_array_equal(dc.outer_product(Tensor([1.0]), Tensor([1.0])).data, [[1]])
    with pytest.raises(InvalidShapeError):
        dc.outer_product(Tensor(np.ones((2, 2))), Tensor([1.0]))


def test_bce_values():
    assert dc.bce_with_logits(Tensor([0.0]), 1.0).data == pytest.approx(np.log(2))
    assert dc.bce_with_logits(Tensor([0.0]), 0.0).data == pytest.approx(np.log(2))
    assert dc.bce_with_logits(Tensor([10.0]), 1.0).data == pytest.approx(np.logaddexp(0, 10.0) - 10.0, rel=1e-9)
    assert float(dc.bce_with_logits(Tensor([10.0]), 1.0).data) == pytest.approx(4.5399e-5, rel=1e-4)


def test_bce_rejects_empty_and_soft_targets():
    with pytest.raises(InvalidArgumentError):
        dc.bce_with_logits(Tensor(np.zeros(0)), 1.0)
    with pytest.raises(InvalidArgumentError):
        dc.bce_with_logits(Tensor([0.0]), 0.5)


def test_backward_square():
    w = leaf(3.0)
    g = dc.backward(dc.hadamard(w, w), {"w": w})
    assert g["w"] == 6.0


def test_backward_constant_weights():
    w = leaf([1.0, -2.0, 0.5])
    c = np.array([0.3, 4.0, -1.0])
    g = dc.backward(dc.tsum(dc.hadamard(w, Tensor(c))), {"w": w})
    np.testing.assert_array_equal(g["w"], c)


def test_backward_zero_multiplier_gives_exact_zero():
    w = leaf([1.5, -2.0])
    loss = dc.tsum(dc.hadamard(w, Tensor(np.zeros(2))))
    assert (dc.backward(loss, {"w": w})["w"] == 0).all()


def test_backward_unreached_parameter_is_zero():
    a, b = leaf([1.0]), leaf([2.0, 3.0])
    g = dc.backward(dc.tsum(a), {"a": a, "b": b})
    np.testing.assert_array_equal(g["b"], [0.0, 0.0])


def test_backward_needs_scalar():
    with pytest.raises(InvalidArgumentError):
        dc.backward(leaf([1.0, 2.0]))


def test_graph_freed_after_backward():
    w = leaf([1.0, 2.0])
    loss = dc.tsum(dc.tanh(w))
    dc.backward(loss)
    assert loss._parents == ()


def test_non_finite_is_rejected():
    with np.errstate(invalid="ignore"), pytest.raises(NumericError):
        dc.hadamard(Tensor([np.inf]), Tensor([0.0]))


def test_grad_check_oracle():
    assert dc.grad_check(lambda w: dc.tsum(dc.hadamard(w, w)), [3.0]) < 1e-6
    assert dc.grad_check(lambda w: dc.tsum(dc.tanh(w)), [0.5]) < 1e-6
    assert dc.grad_check(lambda w: dc.tsum(Tensor(np.ones(1))), [0.5]) == 0.0


def test_composite_conv_graph_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(size=(2, 2, 5, 5)))
    bias = Tensor(rng.normal(size=3))

    def f(k):
        h = dc.leaky_relu(dc.conv2d(x, k, bias, stride=2, padding=1))
        logits = dc.linear(dc.reshape(h, (2, 27)), Tensor(rng_w), None)
        return dc.bce_with_logits(dc.reshape(logits, (2,)), 1.0)

    rng_w = np.random.default_rng(4).normal(size=(1, 27))
    assert dc.grad_check(f, rng.normal(size=(3, 2, 3, 3))) < 1e-4


def test_expand_sums_back():
    a = leaf(np.arange(3.0).reshape(3, 1))
    out = dc.expand(a, (2, 3, 4))
    g = dc.backward(dc.tsum(out), {"a": a})
    np.testing.assert_array_equal(g["a"], np.full((3, 1), 8.0))


def test_assemble_rows_partition():
    a, b = leaf(np.ones((2, 3))), leaf(np.zeros((1, 3)))
    out = dc.assemble_rows([(a, [0, 2]), (b, [1])], 3)
    np.testing.assert_array_equal(out.data[:, 0], [1, 0, 1])
    with pytest.raises(InvalidArgumentError):
        dc.assemble_rows([(a, [0, 1])], 3)


def test_upsample_nearest():
    x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
    out = dc.upsample2x(x).data[0, 0]
    np.testing.assert_array_equal(out[:2, :2], np.zeros((2, 2)))
    np.testing.assert_array_equal(out[2:, 2:], np.full((2, 2), 3.0))


def test_operators():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    np.testing.assert_array_equal((a + b).data, [4, 7])
    np.testing.assert_array_equal((b - a).data, [2, 3])
    np.testing.assert_array_equal((a * 2.0).data, [2, 4])
    np.testing.assert_array_equal((a * b).data, [3, 10])
    assert float((Tensor(np.eye(2)) @ Tensor(np.ones((2, 1)))).sum().data) == 2.0
