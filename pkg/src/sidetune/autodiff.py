"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every forward primitive validates its inputs, computes the exact
textbook result, and records a backward rule on the tape. `backward`
replays the tape in reverse, accumulating gradients into an internal
map and finally adding them onto the `.grad` buffers of parameter
leaves. Gradient accumulation is additive; callers zero parameter
gradients at step boundaries.

Everything is float64. At desk scale, tight gradient tolerances matter
more than speed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, NumericError

Array = np.ndarray


def _as_f64(values) -> Array:
    return np.asarray(values, dtype=np.float64)


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.data = _as_f64(values)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def add_grad(self, g: Array) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"


def param(values, name: str | None = None) -> Tensor:
    """A trainable leaf."""
    return Tensor(values, requires_grad=True, name=name)


def const(values, name: str | None = None) -> Tensor:
    """A non-trainable leaf (inputs, targets, fixed scalars)."""
    return Tensor(values, requires_grad=False, name=name)


@dataclass
class TapeRecord:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[Array], tuple[Array | None, ...]]


@dataclass
class Tape:
    """Orderly record of primitive ops; replayed in reverse by `backward`."""

    records: list[TapeRecord] = field(default_factory=list)
    _produced: set[int] = field(default_factory=set)

    def record(self, kind, inputs, output, backward) -> None:
        self.records.append(TapeRecord(kind, tuple(inputs), output, backward))
        self._produced.add(id(output))

    def produced(self, t: Tensor) -> bool:
        return id(t) in self._produced


def _require_finite(kind: str, arrays: Sequence[Array], role: str) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(f"{kind}: non-finite {role} value")


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum `g` back down to `shape` after numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _stable_sigmoid(x: Array) -> Array:
    flat = x.ravel()
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ex = np.exp(flat[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out.reshape(x.shape)


# --- primitive builders -------------------------------------------------
# Each returns (output_data, backward) where backward maps the upstream
# gradient to one gradient per input (None for inputs that take none).


def _check_arity(kind: str, inputs, n, allow=None) -> None:
    counts = {n} if allow is None else allow
    if len(inputs) not in counts:
        raise ContractError(f"{kind}: expected {sorted(counts)} inputs, got {len(inputs)}")


def _op_matmul(inputs, attrs):
    _check_arity("matmul", inputs, 2)
    a, b = (t.data for t in inputs)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    out = a @ b

    def backward(g):
        return g @ b.T, a.T @ g

    return out, backward


def _op_add(inputs, attrs):
    _check_arity("add", inputs, 2)
    a, b = (t.data for t in inputs)
    try:
        out = a + b
    except ValueError:
        raise DimensionError(f"add: incompatible shapes {a.shape} + {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return out, backward


def _op_sub(inputs, attrs):
    _check_arity("sub", inputs, 2)
    a, b = (t.data for t in inputs)
    try:
        out = a - b
    except ValueError:
        raise DimensionError(f"sub: incompatible shapes {a.shape} - {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return out, backward


def _op_elementwise_mul(inputs, attrs):
    _check_arity("elementwise_mul", inputs, 2)
    a, b = (t.data for t in inputs)
    try:
        out = a * b
    except ValueError:
        raise DimensionError(
            f"elementwise_mul: incompatible shapes {a.shape} * {b.shape}"
        ) from None

    def backward(g):
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

    return out, backward


def _op_scalar_blend(inputs, attrs):
    """alpha*b + (1-alpha)*s with a scalar blending weight."""
    _check_arity("scalar_blend", inputs, 3)
    alpha, b, s = (t.data for t in inputs)
    if alpha.size != 1:
        raise DimensionError(f"scalar_blend: alpha must be scalar, got shape {alpha.shape}")
    if b.shape != s.shape:
        raise DimensionError(f"scalar_blend: branch shapes differ, {b.shape} vs {s.shape}")
    a = alpha.reshape(())
    out = a * b + (1.0 - a) * s

    def backward(g):
        d_alpha = np.sum(g * (b - s)).reshape(alpha.shape)
        return d_alpha, g * a, g * (1.0 - a)

    return out, backward


def _op_relu(inputs, attrs):
    _check_arity("relu", inputs, 1)
    x = inputs[0].data
    out = np.maximum(x, 0.0)

    def backward(g):
        return (g * (x > 0.0),)

    return out, backward


def _op_tanh(inputs, attrs):
    _check_arity("tanh", inputs, 1)
    out = np.tanh(inputs[0].data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return out, backward


def _op_sigmoid(inputs, attrs):
    _check_arity("sigmoid", inputs, 1)
    out = _stable_sigmoid(inputs[0].data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return out, backward


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _op_conv2d(inputs, attrs):
    """Direct 2-D cross-correlation over NCHW inputs with OIHW kernels."""
    _check_arity("conv2d", inputs, None, allow={2, 3})
    x = inputs[0].data
    w = inputs[1].data
    bias = inputs[2].data if len(inputs) == 3 else None
    sh, sw = _pair(attrs.get("stride", 1))
    ph, pw = _pair(attrs.get("pad", 0))
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d: need NCHW input and OIHW kernel, got {x.shape}, {w.shape}")
    n, c, h, wd = x.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise DimensionError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if bias is not None and bias.shape != (co,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({co},)")
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise DimensionError(f"conv2d: bad stride/pad ({sh},{sw})/({ph},{pw})")
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise DimensionError(
            f"conv2d: kernel {w.shape[2:]} does not fit input {x.shape[2:]} with pad ({ph},{pw})"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out = np.einsum("nchwij,ocij->nohw", win, w)
    if bias is not None:
        out = out + bias[None, :, None, None]

    def backward(g):
        dw = np.einsum("nchwij,nohw->ocij", win, g)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += np.einsum(
                    "nohw,oc->nchw", g, w[:, :, i, j]
                )
        dx = dxp[:, :, ph : ph + h, pw : pw + wd]
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    return out, backward


def _op_avgpool2d(inputs, attrs):
    _check_arity("avgpool2d", inputs, 1)
    x = inputs[0].data
    kh, kw = _pair(attrs.get("kernel", 2))
    sh, sw = _pair(attrs.get("stride", (kh, kw)))
    if x.ndim != 4:
        raise DimensionError(f"avgpool2d: need NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if kh > h or kw > w:
        raise DimensionError(f"avgpool2d: window ({kh},{kw}) larger than input {x.shape[2:]}")
    ho = (h - kh) // sh + 1
    wo = (w - kw) // sw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out = win.mean(axis=(-2, -1))
    scale = 1.0 / (kh * kw)

    def backward(g):
        dx = np.zeros_like(x)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += g * scale
        return (dx,)

    return out, backward


def _op_flatten(inputs, attrs):
    _check_arity("flatten", inputs, 1)
    x = inputs[0].data
    if x.ndim < 2:
        raise DimensionError(f"flatten: need a batch dimension, got shape {x.shape}")
    out = x.reshape(x.shape[0], -1)

    def backward(g):
        return (g.reshape(x.shape),)

    return out, backward


def _op_mse_loss(inputs, attrs):
    _check_arity("mse_loss", inputs, 2)
    p, t = (t.data for t in inputs)
    if p.shape != t.shape:
        raise DimensionError(f"mse_loss: shapes differ, {p.shape} vs {t.shape}")
    diff = p - t
    out = np.mean(diff * diff)

    def backward(g):
        d = g * 2.0 * diff / diff.size
        return d, -d

    return np.asarray(out), backward


def _op_l1_loss(inputs, attrs):
    _check_arity("l1_loss", inputs, 2)
    p, t = (t.data for t in inputs)
    if p.shape != t.shape:
        raise DimensionError(f"l1_loss: shapes differ, {p.shape} vs {t.shape}")
    diff = p - t
    out = np.mean(np.abs(diff))

    def backward(g):
        d = g * np.sign(diff) / diff.size
        return d, -d

    return np.asarray(out), backward


def _op_softmax_cross_entropy(inputs, attrs):
    """Mean cross-entropy of row-wise softmax against integer labels."""
    _check_arity("softmax_cross_entropy", inputs, 2)
    logits, labels = (t.data for t in inputs)
    if logits.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: labels shape {labels.shape} != ({logits.shape[0]},)"
        )
    idx = labels.astype(np.int64)
    if not np.array_equal(idx, labels) or idx.min() < 0 or idx.max() >= logits.shape[1]:
        raise ContractError("softmax_cross_entropy: labels must be integers in [0, num_classes)")
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    n = logits.shape[0]
    out = -logp[np.arange(n), idx].mean()
    softmax = np.exp(logp)

    def backward(g):
        d = softmax.copy()
        d[np.arange(n), idx] -= 1.0
        return g * d / n, None

    return np.asarray(out), backward


_OPS: dict[str, Callable] = {
    "matmul": _op_matmul,
    "add": _op_add,
    "sub": _op_sub,
    "elementwise_mul": _op_elementwise_mul,
    "scalar_blend": _op_scalar_blend,
    "relu": _op_relu,
    "tanh": _op_tanh,
    "sigmoid": _op_sigmoid,
    "conv2d": _op_conv2d,
    "avgpool2d": _op_avgpool2d,
    "flatten": _op_flatten,
    "mse_loss": _op_mse_loss,
    "softmax_cross_entropy": _op_softmax_cross_entropy,
    "l1_loss": _op_l1_loss,
}

OP_KINDS = tuple(sorted(_OPS))


def primitive_forward(op_kind: str, inputs: Sequence[Tensor], tape: Tape, **attrs) -> Tensor:
    """Run one primitive, record it on the tape, and return the output tensor."""
    if op_kind not in _OPS:
        raise ContractError(f"unknown op kind {op_kind!r}")
    _require_finite(op_kind, [t.data for t in inputs], "input")
    # overflow surfaces as a NumericError below, not as a numpy warning
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        out_data, backward_fn = _OPS[op_kind](tuple(inputs), attrs)
    _require_finite(op_kind, [out_data], "output")
    out = Tensor(out_data)
    tape.record(op_kind, inputs, out, backward_fn)
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every parameter leaf's grad buffer."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not tape.produced(loss):
        raise ContractError("backward: loss was not produced on this tape")
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(tape.records):
        g_out = grads.get(id(rec.output))
        if g_out is None:
            continue
        input_grads = rec.backward(g_out)
        for t, gi in zip(rec.inputs, input_grads):
            if gi is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t
    for key, t in holders.items():
        if t.requires_grad:
            t.add_grad(grads[key])


# --- ergonomic wrappers -------------------------------------------------


def matmul(a: Tensor, b: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("matmul", (a, b), tape)


def add(a: Tensor, b: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("add", (a, b), tape)


def sub(a: Tensor, b: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("sub", (a, b), tape)


def elementwise_mul(a: Tensor, b: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("elementwise_mul", (a, b), tape)


def scalar_blend(alpha: Tensor, b: Tensor, s: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("scalar_blend", (alpha, b, s), tape)


def relu(x: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("relu", (x,), tape)


def tanh(x: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("tanh", (x,), tape)


def sigmoid(x: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("sigmoid", (x,), tape)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None, tape: Tape, stride=1, pad=0) -> Tensor:
    inputs = (x, w) if bias is None else (x, w, bias)
    return primitive_forward("conv2d", inputs, tape, stride=stride, pad=pad)


def avgpool2d(x: Tensor, tape: Tape, kernel=2, stride=None) -> Tensor:
    if stride is None:
        stride = kernel
    return primitive_forward("avgpool2d", (x,), tape, kernel=kernel, stride=stride)


def flatten(x: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("flatten", (x,), tape)


def mse_loss(pred: Tensor, target: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("mse_loss", (pred, target), tape)


def l1_loss(pred: Tensor, target: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("l1_loss", (pred, target), tape)


def softmax_cross_entropy(logits: Tensor, labels: Tensor, tape: Tape) -> Tensor:
    return primitive_forward("softmax_cross_entropy", (logits, labels), tape)
