"""First-order optimizers that update parameter tensors in place."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import ContractError

OPTIMIZER_KINDS = ("sgd", "adam")


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def init_optimizer(
    kind: str,
    params: list[Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> OptimizerState:
    if kind not in OPTIMIZER_KINDS:
        raise ContractError(f"unknown optimizer kind {kind!r}")
    state = OptimizerState(kind=kind, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    if kind == "adam":
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    return state


def optimizer_step(state: OptimizerState, params: list[Tensor]) -> None:
    """Apply one SGD or bias-corrected Adam update; increments the step counter."""
    if state.kind == "adam" and len(params) != len(state.m):
        raise ContractError(
            f"optimizer_step: {len(params)} params but state tracks {len(state.m)}"
        )
    for p in params:
        if p.grad is None:
            raise ContractError(f"optimizer_step: parameter {p.name or p} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ContractError(f"optimizer_step: grad shape {p.grad.shape} != {p.data.shape}")
    state.step_count += 1
    if state.kind == "sgd":
        for p in params:
            p.data -= state.lr * p.grad
        return
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for i, p in enumerate(params):
        g = p.grad
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
