"""Finite-difference oracle vs analytic gradients for the core primitives."""

import numpy as np
import pytest

from sidetune import autodiff as ad
from sidetune.autodiff import Tape, const, param
from sidetune.gradcheck import grad_check_fn, relative_error
from sidetune.rng import Rng


def _check(loss_builder, params, tol=1e-5, fd_step=1e-4):
    report = grad_check_fn(loss_builder, params, tolerance=tol, fd_step=fd_step)
    assert report.passed, f"max rel error {report.max_rel_error:.3e} exceeds {tol}"
    return report


@pytest.mark.parametrize("seed", range(20))
def test_matmul_add_chain(seed):
    rng = Rng(seed)
    w = param(rng.normal((4, 3)), name="w")
    b = param(rng.normal((3,)), name="b")
    x = const(rng.normal((5, 4)))
    y = const(rng.normal((5, 3)))

    def loss(tape: Tape):
        return ad.mse_loss(ad.add(ad.matmul(x, w, tape), b, tape), y, tape)

    _check(loss, [("w", w), ("b", b)])


@pytest.mark.parametrize("kind", ["tanh", "sigmoid"])
def test_smooth_activations(kind):
    rng = Rng(99)
    w = param(rng.normal((3, 3)), name="w")
    x = const(rng.normal((4, 3)))
    y = const(rng.normal((4, 3)))

    def loss(tape: Tape):
        h = ad.matmul(x, w, tape)
        h = ad.primitive_forward(kind, (h,), tape)
        return ad.mse_loss(h, y, tape)

    _check(loss, [("w", w)])


def test_relu_with_inputs_away_from_kink():
    rng = Rng(5)
    # keep every pre-activation at least 0.1 from zero so the FD probe
    # cannot cross the kink
    vals = rng.uniform(0.1, 1.0, (4, 3)) * rng.signs((4, 3))
    x = param(vals, name="x")
    y = const(rng.normal((4, 3)))

    def loss(tape: Tape):
        return ad.mse_loss(ad.relu(x, tape), y, tape)

    _check(loss, [("x", x)], fd_step=1e-5)


def test_l1_away_from_kink():
    rng = Rng(6)
    x = param(rng.normal((4, 2)), name="x")
    y = const(x.data + 0.5 + rng.uniform(0.0, 1.0, (4, 2)))

    def loss(tape: Tape):
        return ad.l1_loss(x, y, tape)

    _check(loss, [("x", x)])


@pytest.mark.parametrize("seed", range(10))
def test_conv_pool_pipeline(seed):
    rng = Rng(seed)
    w1 = param(rng.normal((2, 1, 3, 3), scale=0.5), name="w1")
    b1 = param(rng.normal((2,), scale=0.1), name="b1")
    x = const(rng.normal((2, 1, 6, 6)))
    y = const(rng.normal((2, 8)))

    def loss(tape: Tape):
        h = ad.conv2d(x, w1, b1, tape, stride=1, pad=1)
        h = ad.tanh(h, tape)
        h = ad.avgpool2d(h, tape, kernel=3, stride=3)
        h = ad.flatten(h, tape)
        return ad.mse_loss(h, y, tape)

    _check(loss, [("w1", w1), ("b1", b1)])


def test_conv_strided_gradients():
    rng = Rng(17)
    w = param(rng.normal((3, 2, 2, 2), scale=0.5), name="w")
    x = param(rng.normal((2, 2, 5, 5)), name="x")
    y = const(rng.normal((2, 3, 2, 2)))

    def loss(tape: Tape):
        return ad.mse_loss(ad.conv2d(x, w, None, tape, stride=2, pad=0), y, tape)

    _check(loss, [("w", w), ("x", x)])


def test_softmax_cross_entropy_gradients():
    rng = Rng(21)
    w = param(rng.normal((5, 4)), name="w")
    x = const(rng.normal((6, 5)))
    labels = const(rng.integers(4, size=6).astype(np.float64))

    def loss(tape: Tape):
        return ad.softmax_cross_entropy(ad.matmul(x, w, tape), labels, tape)

    _check(loss, [("w", w)])


def test_scalar_blend_alpha_gradient():
    rng = Rng(33)
    a = param(np.asarray(0.3), name="alpha")
    b = const(rng.normal((4, 3)))
    s = const(rng.normal((4, 3)))
    y = const(rng.normal((4, 3)))

    def loss(tape: Tape):
        return ad.mse_loss(ad.scalar_blend(a, b, s, tape), y, tape)

    _check(loss, [("alpha", a)])


def test_elementwise_and_sub_gradients():
    rng = Rng(44)
    u = param(rng.normal((3, 3)), name="u")
    v = param(rng.normal((3, 3)), name="v")
    y = const(rng.normal((3, 3)))

    def loss(tape: Tape):
        prod = ad.elementwise_mul(u, v, tape)
        return ad.mse_loss(ad.sub(prod, y, tape), const(np.zeros((3, 3))), tape)

    _check(loss, [("u", u), ("v", v)])


def test_relative_error_floor():
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 1.0) == 0.0
    assert relative_error(1.0, 2.0) == 0.5


def test_report_failure_mode():
    # deliberately wrong "analytic" gradient: compare loss of p against
    # a detached constant so p never receives the real gradient
    p = param(np.asarray([1.0]), name="p")

    def loss(tape: Tape):
        return ad.mse_loss(const(p.data * 2.0), const(np.zeros(1)), tape)

    report = grad_check_fn(loss, [("p", p)])
    assert not report.passed


def test_grad_check_model_level_linear():
    # the model-facing entry: a linear 4->3 network against an MSE target
    from sidetune.gradcheck import grad_check
    from sidetune.nets import NetworkSpec, build_network, linear

    rng = Rng(3)
    net = build_network(
        NetworkSpec(layers=(linear(4, 3),), input_shape=(4,)), rng.child("net")
    )
    report = grad_check(net, rng.child("x").normal((5, 4)), 1e-5, rng=rng.child("t"))
    assert report.passed, report


def test_grad_check_model_level_alpha_blend():
    from sidetune.gradcheck import grad_check
    from sidetune.merge import AlphaBlend, AlphaParam
    from sidetune.nets import NetworkSpec, build_network, linear, tanh as tanh_l

    rng = Rng(4)
    spec = NetworkSpec(layers=(linear(5, 4), tanh_l(), linear(4, 4)), input_shape=(5,))
    base = build_network(spec, rng.child("base"))
    side = build_network(spec, rng.child("side"))
    op = AlphaBlend(AlphaParam("learnable"))

    class Blended:
        def forward(self, x, tape):
            return op.forward(base.forward(x, tape), side.forward(x, tape), tape)

        def parameters(self):
            pairs = [(f"side.{n}", t) for n, t in side.parameters()]
            pairs += op.parameters()  # includes d loss / d alpha
            return pairs

    report = grad_check(Blended(), rng.child("x").normal((4, 5)), 1e-5, rng=rng.child("t"))
    assert report.passed, report
    assert "alpha.raw" in report.per_param


def test_grad_check_model_level_film_heads():
    from sidetune.gradcheck import grad_check
    from sidetune.merge import Film
    from sidetune.nets import NetworkSpec, build_network, linear, tanh as tanh_l

    rng = Rng(11)
    spec = NetworkSpec(layers=(linear(5, 4), tanh_l(), linear(4, 4)), input_shape=(5,))
    base = build_network(spec, rng.child("base"))
    side = build_network(spec, rng.child("side"))
    op = Film(4, rng.child("op"))

    class Modulated:
        def forward(self, x, tape):
            return op.forward(base.forward(x, tape), side.forward(x, tape), tape)

        def parameters(self):
            return op.parameters()  # trunk + gamma head + beta head

    report = grad_check(Modulated(), rng.child("x").normal((4, 5)), 1e-5,
                        rng=rng.child("t"), fd_step=1e-6)
    assert report.passed, report
    assert any(n.startswith("gamma.") for n in report.per_param)
    assert any(n.startswith("beta.") for n in report.per_param)
