"""Finite-difference verification of analytic gradients.

The oracle used everywhere is the central difference
(f(p+h) - f(p-h)) / 2h, evaluated through forward passes only, so it is
independent of every backward rule it checks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tape, Tensor, backward

ERROR_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    passed: bool
    per_param: dict[str, float]

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"{verdict} (max rel error {self.max_rel_error:.3e}, tol {self.tolerance:.1e})"


def relative_error(analytic: float, numeric: float) -> float:
    denom = max(abs(analytic), abs(numeric), ERROR_FLOOR)
    return abs(analytic - numeric) / denom


def analytic_gradients(
    loss_fn: Callable[[Tape], Tensor],
    named_params: list[tuple[str, Tensor]],
) -> dict[str, np.ndarray]:
    tape = Tape()
    loss = loss_fn(tape)
    for _, p in named_params:
        p.zero_grad()
    backward(tape, loss)
    return {name: p.grad.copy() for name, p in named_params}


def grad_check_fn(
    loss_fn: Callable[[Tape], Tensor],
    named_params: list[tuple[str, Tensor]],
    tolerance: float = 1e-5,
    fd_step: float = 1e-4,
    order: int = 2,
) -> GradCheckReport:
    """Compare analytic gradients of `loss_fn` against central differences.

    `loss_fn` must build a fresh graph on the tape it is given and return a
    scalar loss. `order` 2 is the classic two-point central difference;
    order 4 uses the five-point stencil, which removes the h^2 truncation
    term at the cost of twice the evaluations.
    """
    if order not in (2, 4):
        raise ValueError(f"unsupported stencil order {order}")
    analytic = analytic_gradients(loss_fn, named_params)

    def eval_loss() -> float:
        return float(loss_fn(Tape()).data)

    def numeric_at(flat: np.ndarray, i: int) -> float:
        orig = flat[i]

        def f(offset: float) -> float:
            flat[i] = orig + offset
            value = eval_loss()
            flat[i] = orig
            return value

        if order == 2:
            return (f(fd_step) - f(-fd_step)) / (2.0 * fd_step)
        return (
            8.0 * (f(fd_step) - f(-fd_step)) - (f(2.0 * fd_step) - f(-2.0 * fd_step))
        ) / (12.0 * fd_step)

    per_param: dict[str, float] = {}
    worst = 0.0
    for name, p in named_params:
        flat = p.data.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        param_worst = 0.0
        for i in range(flat.size):
            numeric = numeric_at(flat, i)
            param_worst = max(param_worst, relative_error(a_flat[i], numeric))
        per_param[name] = param_worst
        worst = max(worst, param_worst)
    return GradCheckReport(
        max_rel_error=worst,
        tolerance=tolerance,
        passed=worst < tolerance,
        per_param=per_param,
    )


def grad_check(
    model,
    input_batch,
    tolerance: float = 1e-5,
    *,
    target: np.ndarray | None = None,
    rng=None,
    fd_step: float = 1e-4,
) -> GradCheckReport:
    """Gradient-check a model against a mean-squared-error objective.

    `model` needs `forward(x, tape) -> Tensor` and `parameters() ->
    list[(name, Tensor)]`. A random regression target is drawn when none is
    supplied (requires `rng`). Always returns a report; never raises on a
    failed check.
    """
    from .autodiff import const, mse_loss

    x = const(np.asarray(input_batch, dtype=np.float64))
    if target is None:
        probe = model.forward(x, Tape())
        if rng is None:
            raise ValueError("grad_check: need rng to draw a target, or pass target=")
        target = rng.normal(probe.shape)
    t = const(np.asarray(target, dtype=np.float64))

    def loss_fn(tape: Tape) -> Tensor:
        return mse_loss(model.forward(x, tape), t, tape)

    return grad_check_fn(loss_fn, list(model.parameters()), tolerance, fd_step)


# --- the full verification suite ------------------------------------------
# One named check per layer kind, merge operator, the PNN laterals, and the
# EWC penalty, repeated across seeds. Double-precision central differences
# on an O(1) loss cannot certify 1e-5 relative accuracy for gradient
# entries below ~1e-6 (the probe difference drowns in rounding noise), and
# they break down within a step of a relu kink. Each check therefore draws
# fresh instances until the problem is well posed for the oracle: every
# relu pre-activation keeps a margin from zero and no analytic gradient
# entry falls inside the FD noise band. The accepted instance is then
# verified per parameter with a five-point stencil.

SUITE_TOLERANCE = 1e-5
_SUITE_STEP = 1e-4
_NOISE_BAND = 3e-6
_KINK_MARGIN = 1e-2


def _fd_checkable(grads: dict[str, np.ndarray]) -> bool:
    for g in grads.values():
        mags = np.abs(g.reshape(-1))
        if np.any((mags > 0.0) & (mags < _NOISE_BAND)):
            return False
    return True


def _robust_report(make_instance, rng, tries: int = 40) -> GradCheckReport:
    """Draw instances until well posed, then run the five-point check."""
    loss_fn = params = None
    for k in range(tries):
        built = make_instance(rng.child(f"try-{k}"))
        if built is None:
            continue  # kink margin violated; redraw
        loss_fn, params = built
        if _fd_checkable(analytic_gradients(loss_fn, params)):
            break
    if loss_fn is None:
        built = make_instance(rng.child("fallback"))
        loss_fn, params = built if built is not None else make_instance(rng.child("last"))
    return grad_check_fn(loss_fn, params, SUITE_TOLERANCE, _SUITE_STEP, order=4)


def _suite_checks(seed: int):
    from . import autodiff as ad
    from .autodiff import const
    from .merge import AlphaParam, build_merge
    from .nets import NetworkSpec, build_network, linear, relu, tanh, conv, avgpool, flatten
    from .rng import Rng
    from .strategies import ewc_penalty, pnn_lateral_forward

    rng = Rng(seed)

    def mlp(din, hidden, dout, act=tanh):
        return NetworkSpec(layers=(linear(din, hidden), act(), linear(hidden, dout)),
                           input_shape=(din,))

    def mse_instance(net, x, target_rng):
        xt = const(x)
        target = const(target_rng.normal(net.forward(xt, Tape()).shape))

        def loss_fn(tape):
            return ad.mse_loss(net.forward(xt, tape), target, tape)

        return loss_fn, net.parameters()

    def make_tanh(r):
        net = build_network(mlp(5, 4, 3), r.child("net"))
        return mse_instance(net, r.child("x").normal((6, 5)), r.child("t"))

    def make_relu(r):
        net = build_network(mlp(5, 4, 3, act=relu), r.child("net"))
        x = r.child("x").normal((6, 5))
        w = net.store.get("0.linear.weight").data
        b = net.store.get("0.linear.bias").data
        if np.abs(x @ w + b).min() < _KINK_MARGIN:
            return None
        return mse_instance(net, x, r.child("t"))

    def make_conv(r):
        spec = NetworkSpec(
            layers=(conv(1, 2, 3, stride=1, pad=1), tanh(), avgpool(2), flatten(),
                    linear(2 * 3 * 3, 4)),
            input_shape=(1, 6, 6),
        )
        net = build_network(spec, r.child("net"))
        return mse_instance(net, r.child("x").normal((2, 1, 6, 6)), r.child("t"))

    def make_sce(r):
        net = build_network(mlp(6, 5, 4), r.child("net"))
        x = const(r.child("x").normal((5, 6)))
        labels = const(r.child("y").integers(4, size=5).astype(np.float64))

        def loss_fn(tape):
            return ad.softmax_cross_entropy(net.forward(x, tape), labels, tape)

        return loss_fn, net.parameters()

    def make_l1(r):
        net = build_network(mlp(4, 4, 3), r.child("net"))
        x = const(r.child("x").normal((4, 4)))
        probe = net.forward(x, Tape())
        target = const(probe.data + 0.5 + r.child("t").uniform(0.0, 1.0, probe.shape))

        def loss_fn(tape):
            return ad.l1_loss(net.forward(x, tape), target, tape)

        return loss_fn, net.parameters()

    def make_merge(kind):
        def make(r):
            base = build_network(mlp(5, 4, 4), r.child("base"))
            side = build_network(mlp(5, 3, 4), r.child("side"))
            alpha = AlphaParam("learnable") if kind == "alpha_blend" else None
            op = build_merge(kind, 4, r.child("op"), alpha=alpha)
            x = r.child("x").normal((6, 5))
            b = base.forward(const(x), Tape()).data
            for net in [getattr(op, "net", None), getattr(op, "trunk", None)]:
                if net is None:
                    continue
                pre = b @ net.store.get("0.linear.weight").data + net.store.get(
                    "0.linear.bias"
                ).data
                if np.abs(pre).min() < _KINK_MARGIN:
                    return None
            xt = const(x)
            target = const(r.child("t").normal((6, 4)))

            def loss_fn(tape):
                out = op.forward(base.forward(xt, tape), side.forward(xt, tape), tape)
                return ad.mse_loss(out, target, tape)

            params = [(f"base.{n}", t) for n, t in base.parameters()]
            params += [(f"side.{n}", t) for n, t in side.parameters()]
            params += [(f"merge.{n}", t) for n, t in op.parameters()]
            return loss_fn, params

        return make

    def make_pnn(r):
        base = build_network(mlp(5, 6, 4), r.child("base"))
        col = build_network(mlp(5, 3, 4), r.child("col"))
        adapter_spec = NetworkSpec(layers=(linear(6, 3),), input_shape=(6,),
                                   role="merge_internal")
        adapter = build_network(adapter_spec, r.child("adapter"))
        x = const(r.child("x").normal((5, 5)))
        target = const(r.child("t").normal((5, 4)))

        def loss_fn(tape):
            _, hidden = base.forward_with_hidden(x, tape)
            out = pnn_lateral_forward(hidden, col, [adapter], x, tape)
            return ad.mse_loss(out, target, tape)

        params = [(f"col.{n}", t) for n, t in col.parameters()]
        params += [(f"adapter.{n}", t) for n, t in adapter.parameters()]
        return loss_fn, params

    def check_ewc_penalty():
        r = rng.child("ewc")
        theta = [r.normal((3, 2)), r.normal((4,))]
        anchors = [t + r.normal(t.shape) * 0.3 for t in theta]
        fishers = [np.abs(r.normal(t.shape)) for t in theta]
        lam = 2.0
        _, grads = ewc_penalty(theta, anchors, fishers, lam)
        worst = 0.0
        h = _SUITE_STEP
        for t, g in zip(theta, grads):
            flat, gflat = t.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up, _ = ewc_penalty(theta, anchors, fishers, lam)
                flat[i] = orig - h
                down, _ = ewc_penalty(theta, anchors, fishers, lam)
                flat[i] = orig
                worst = max(worst, relative_error(gflat[i], (up - down) / (2 * h)))
        # the penalty is quadratic, so central differences are near-exact
        return GradCheckReport(worst, 1e-7, worst < 1e-7, {"penalty": worst})

    robust = [
        ("layer/linear+tanh", make_tanh),
        ("layer/relu", make_relu),
        ("layer/conv2d+avgpool2d+flatten", make_conv),
        ("loss/softmax_cross_entropy", make_sce),
        ("loss/l1", make_l1),
        ("merge/alpha_blend(dL/dalpha)", make_merge("alpha_blend")),
        ("merge/product", make_merge("product")),
        ("merge/mlp_adapter", make_merge("mlp_adapter")),
        ("merge/film", make_merge("film")),
        ("pnn/laterals", make_pnn),
    ]
    checks = [(name, lambda m=maker: _robust_report(m, rng.child(name)))
              for name, maker in robust]
    checks.append(("ewc/penalty", check_ewc_penalty))
    return checks


def run_gradcheck_suite(seeds: int = 20, base_seed: int = 0):
    """Run every named check across `seeds` seeds.

    Returns (all_passed, report_lines, worst_by_check).
    """
    lines: list[str] = []
    worst: dict[str, float] = {}
    all_passed = True
    for s in range(base_seed, base_seed + seeds):
        for name, check in _suite_checks(s):
            report = check()
            worst[name] = max(worst.get(name, 0.0), report.max_rel_error)
            if not report.passed:
                all_passed = False
                lines.append(f"FAIL {name} seed={s} max_rel_error={report.max_rel_error:.3e}")
    for name in sorted(worst):
        tol = 1e-7 if name == "ewc/penalty" else SUITE_TOLERANCE
        status = "PASS" if worst[name] < tol else "FAIL"
        lines.append(f"{status} {name} worst_rel_error={worst[name]:.3e} over {seeds} seeds")
    return all_passed, lines, worst
