"""Tensor primitives: forward values, backward rules, tape contracts."""

import numpy as np
import numpy.testing as npt
import pytest

from sidetune import autodiff as ad
from sidetune.autodiff import Tape, Tensor, backward, const, param, primitive_forward
from sidetune.errors import ContractError, DimensionError, NumericError
from sidetune.rng import Rng


def test_matmul_identity():
    tape = Tape()
    a = const([[1.0, 2.0], [3.0, 4.0]])
    eye = const(np.eye(2))
    out = ad.matmul(a, eye, tape)
    npt.assert_array_equal(out.data, [[1.0, 2.0], [3.0, 4.0]])


def test_relu_definition():
    tape = Tape()
    out = ad.relu(const([-1.0, 0.0, 2.0]), tape)
    npt.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_mse_mean_reduction():
    tape = Tape()
    loss = ad.mse_loss(const([1.0, 3.0]), const([1.0, 1.0]), tape)
    assert loss.item() == 2.0


def test_l1_mean_reduction():
    tape = Tape()
    loss = ad.l1_loss(const([1.0, 4.0]), const([1.0, 1.0]), tape)
    assert loss.item() == 1.5


def test_backward_linear_chain():
    # loss = mse(w*x, y) with w=1, x=2, y=0 -> d loss / d w = 8
    tape = Tape()
    w = param([[1.0]])
    x = const([[2.0]])
    pred = ad.matmul(x, w, tape)
    loss = ad.mse_loss(pred, const([[0.0]]), tape)
    w.zero_grad()
    backward(tape, loss)
    npt.assert_array_equal(w.grad, [[8.0]])


def test_backward_unused_leaf_zero():
    tape = Tape()
    w = param([[1.0]])
    unused = param([[5.0]])
    loss = ad.mse_loss(ad.matmul(const([[2.0]]), w, tape), const([[0.0]]), tape)
    w.zero_grad()
    unused.zero_grad()
    backward(tape, loss)
    npt.assert_array_equal(unused.grad, [[0.0]])


def test_backward_requires_scalar_loss():
    tape = Tape()
    out = ad.add(const([1.0, 2.0]), const([3.0, 4.0]), tape)
    with pytest.raises(ContractError):
        backward(tape, out)


def test_backward_requires_loss_on_tape():
    tape = Tape()
    ad.add(const([1.0]), const([1.0]), tape)
    stray = const(np.asarray(0.5))
    with pytest.raises(ContractError):
        backward(tape, stray)


def test_shape_mismatch_names_op():
    tape = Tape()
    with pytest.raises(DimensionError, match="matmul"):
        ad.matmul(const(np.ones((2, 3))), const(np.ones((2, 3))), tape)


def test_non_finite_input_rejected():
    tape = Tape()
    with pytest.raises(NumericError):
        ad.relu(const([np.inf, 1.0]), tape)


def test_overflow_raises_instead_of_propagating():
    tape = Tape()
    big = const(np.full((2, 2), 1e200))
    with pytest.raises(NumericError):
        ad.mse_loss(big, const(np.zeros((2, 2))), tape)


@pytest.mark.parametrize("seed", range(5))
def test_extreme_magnitude_inputs_finite_or_raise(seed):
    rng = Rng(seed)
    scales = [1e-300, 1e-10, 1.0, 1e10, 1e154, 1e300]
    for scale in scales:
        x = const(rng.normal((3, 3)) * scale)
        for kind in ("relu", "tanh", "sigmoid"):
            tape = Tape()
            out = primitive_forward(kind, (x,), tape)
            assert np.all(np.isfinite(out.data))
        tape = Tape()
        try:
            out = primitive_forward("elementwise_mul", (x, x), tape)
            assert np.all(np.isfinite(out.data))
        except NumericError:
            pass


def test_scalar_blend_values_and_grads():
    tape = Tape()
    alpha = param(np.asarray(0.5))
    b = const([2.0, 4.0])
    s = const([0.0, 2.0])
    out = ad.scalar_blend(alpha, b, s, tape)
    npt.assert_array_equal(out.data, [1.0, 3.0])
    loss = ad.mse_loss(out, const([0.0, 0.0]), tape)
    alpha.zero_grad()
    backward(tape, loss)
    # d/d alpha mean((alpha*b + (1-alpha)*s)^2) = mean(2*out*(b-s))
    expected = np.mean(2.0 * out.data * (b.data - s.data))
    npt.assert_allclose(alpha.grad, expected, rtol=1e-12)


def test_scalar_blend_alpha_one_gives_exact_zero_side_grad():
    tape = Tape()
    alpha = const(np.asarray(1.0))
    b = const([1.5, -2.0])
    s = param([3.0, 4.0])
    out = ad.scalar_blend(alpha, b, s, tape)
    npt.assert_array_equal(out.data, b.data)
    loss = ad.mse_loss(out, const([0.0, 0.0]), tape)
    s.zero_grad()
    backward(tape, loss)
    assert np.all(s.grad == 0.0)


def test_softmax_cross_entropy_matches_log_softmax():
    logits = np.array([[2.0, 1.0, 0.1], [0.0, 0.0, 0.0]])
    labels = np.array([0.0, 2.0])
    tape = Tape()
    loss = ad.softmax_cross_entropy(const(logits), const(labels), tape)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    expected = -(logp[0, 0] + logp[1, 2]) / 2.0
    npt.assert_allclose(loss.item(), expected, rtol=1e-12)


def test_softmax_cross_entropy_rejects_bad_labels():
    tape = Tape()
    with pytest.raises(ContractError):
        ad.softmax_cross_entropy(const(np.zeros((2, 3))), const([0.0, 3.0]), tape)
    with pytest.raises(ContractError):
        ad.softmax_cross_entropy(const(np.zeros((2, 3))), const([0.5, 1.0]), tape)


def test_conv2d_known_answer():
    # Single 2x2 averaging-style kernel over a 1x1x3x3 image.
    x = np.arange(9, dtype=np.float64).reshape(1, 1, 3, 3)
    w = np.ones((1, 1, 2, 2))
    tape = Tape()
    out = ad.conv2d(const(x), const(w), None, tape)
    npt.assert_array_equal(out.data, [[[[8.0, 12.0], [20.0, 24.0]]]])


def test_conv2d_stride_and_pad():
    x = np.ones((1, 1, 4, 4))
    w = np.ones((2, 1, 3, 3))
    b = np.array([0.0, 1.0])
    tape = Tape()
    out = ad.conv2d(const(x), const(w), const(b), tape, stride=2, pad=1)
    assert out.shape == (1, 2, 2, 2)
    # corner window under pad=1 covers a 2x2 patch of ones
    assert out.data[0, 0, 0, 0] == 4.0
    assert out.data[0, 1, 0, 0] == 5.0


def test_avgpool2d_forward():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    tape = Tape()
    out = ad.avgpool2d(const(x), tape, kernel=2)
    npt.assert_array_equal(out.data, [[[[2.5, 4.5], [10.5, 12.5]]]])


def test_flatten_round_trip_gradient():
    x = param(np.arange(8, dtype=np.float64).reshape(2, 2, 2))
    tape = Tape()
    out = ad.flatten(x, tape)
    assert out.shape == (2, 4)
    loss = ad.mse_loss(out, const(np.zeros((2, 4))), tape)
    x.zero_grad()
    backward(tape, loss)
    assert x.grad.shape == (2, 2, 2)


def test_tape_linearity_of_backward():
    # backward(sum of losses) == sum of backwards, rel error < 1e-10
    rng = Rng(7)
    w = param(rng.normal((3, 2)))
    x = const(rng.normal((4, 3)))
    y1 = const(rng.normal((4, 2)))
    y2 = const(rng.normal((4, 2)))

    tape = Tape()
    pred = ad.matmul(x, w, tape)
    l1 = ad.mse_loss(pred, y1, tape)
    l2 = ad.mse_loss(pred, y2, tape)
    total = ad.add(l1, l2, tape)

    w.zero_grad()
    backward(tape, l1)
    g1 = w.grad.copy()
    w.zero_grad()
    backward(tape, l2)
    g2 = w.grad.copy()
    w.zero_grad()
    backward(tape, total)
    npt.assert_allclose(w.grad, g1 + g2, rtol=1e-10)


def test_grad_accumulates_across_backward_calls():
    w = param([[1.0]])
    tape = Tape()
    loss = ad.mse_loss(ad.matmul(const([[2.0]]), w, tape), const([[0.0]]), tape)
    w.zero_grad()
    backward(tape, loss)
    backward(tape, loss)
    npt.assert_array_equal(w.grad, [[16.0]])


def test_unknown_op_kind():
    with pytest.raises(ContractError):
        primitive_forward("outer_product", (const([1.0]),), Tape())
