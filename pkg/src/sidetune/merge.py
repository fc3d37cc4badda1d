"""Combiners that fuse base and side representations, plus alpha schedules.

Four operators are supported, all differentiable w.r.t. their learnables:

  alpha_blend  alpha*b + (1-alpha)*s, alpha learnable (sigmoid of a raw
               scalar, initialized so alpha = 0.5 exactly) or scheduled
  product      b * s elementwise
  mlp_adapter  F(b) + s with F a two-layer perceptron
  film         gamma(b) * s + beta(b) with a shared trunk and two heads

The schedule clock is optimizer steps. Fixed curricula recover classic
regimes: constant 1 is feature extraction, constant 0 is fine-tuning
(given a side that starts as a copy of the base), a step switch is
stage-wise training, and hyperbolic decay k/(k+step) anneals from the
frozen prior toward the learned estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, const, param
from .errors import ContractError, DimensionError, NetworkSpecError
from .nets import NetworkSpec, build_network, linear, relu
from .rng import Rng

MERGE_KINDS = ("alpha_blend", "product", "mlp_adapter", "film")
CURRICULUM_KINDS = ("constant", "stage_switch", "hyperbolic")


@dataclass(frozen=True)
class AlphaCurriculum:
    """A fixed schedule for the blending weight, clocked by optimizer steps."""

    kind: str
    c: float = 1.0
    switch_step: int = 0
    k: float = 1.0

    def __post_init__(self):
        if self.kind not in CURRICULUM_KINDS:
            raise ContractError(f"unknown alpha curriculum {self.kind!r}")
        if self.kind == "constant" and not 0.0 <= self.c <= 1.0:
            raise ContractError(f"constant alpha must lie in [0,1], got {self.c}")
        if self.kind == "stage_switch" and self.switch_step < 0:
            raise ContractError("stage_switch step must be >= 0")
        if self.kind == "hyperbolic" and not self.k > 0.0:
            raise ContractError(f"hyperbolic decay needs k > 0, got {self.k}")

    def value(self, step: int) -> float:
        if step < 0:
            raise ContractError(f"schedule step must be >= 0, got {step}")
        if self.kind == "constant":
            return self.c
        if self.kind == "stage_switch":
            return 1.0 if step < self.switch_step else 0.0
        return self.k / (self.k + step)


def constant_alpha(c: float) -> AlphaCurriculum:
    return AlphaCurriculum("constant", c=c)


def stage_switch_alpha(switch_step: int) -> AlphaCurriculum:
    return AlphaCurriculum("stage_switch", switch_step=switch_step)


def hyperbolic_alpha(k: float) -> AlphaCurriculum:
    return AlphaCurriculum("hyperbolic", k=k)


class AlphaParam:
    """Blending weight: learnable through a sigmoid, or driven by a schedule.

    The sigmoid keeps the effective alpha inside (0,1) no matter what the
    optimizer does to the raw scalar; raw = 0.0 gives alpha = 0.5 exactly.
    """

    def __init__(self, mode: str = "learnable", schedule: AlphaCurriculum | None = None,
                 init: float = 0.5):
        if mode not in ("learnable", "scheduled"):
            raise ContractError(f"unknown alpha mode {mode!r}")
        self.mode = mode
        self.schedule = schedule
        self.raw: Tensor | None = None
        if mode == "learnable":
            if not 0.0 < init < 1.0:
                raise ContractError(f"learnable alpha init must lie in (0,1), got {init}")
            self.raw = param(np.asarray(math.log(init / (1.0 - init))), name="alpha.raw")
        elif schedule is None:
            raise ContractError("scheduled alpha needs a curriculum")

    def value(self, step: int) -> float:
        if self.mode == "learnable":
            r = float(self.raw.data)
            return 1.0 / (1.0 + math.exp(-r)) if r >= 0 else math.exp(r) / (1.0 + math.exp(r))
        return self.schedule.value(step)

    def tensor(self, step: int, tape: Tape) -> Tensor:
        if self.mode == "learnable":
            return ad.sigmoid(self.raw, tape)
        return const(np.asarray(self.schedule.value(step)))

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [("alpha.raw", self.raw)] if self.mode == "learnable" else []


def alpha_value(p: AlphaParam, step: int) -> float:
    """Effective blending weight at a given optimizer step; always in [0,1]."""
    return p.value(step)


class MergeOperator:
    kind = "?"

    def forward(self, b: Tensor, s: Tensor, tape: Tape, step: int = 0) -> Tensor:
        raise NotImplementedError

    def parameters(self, trainable_only: bool = False) -> list[tuple[str, Tensor]]:
        return []

    def final_alpha(self, step: int) -> float | None:
        return None


class AlphaBlend(MergeOperator):
    kind = "alpha_blend"

    def __init__(self, alpha: AlphaParam | None = None):
        self.alpha = alpha if alpha is not None else AlphaParam("learnable")

    def forward(self, b, s, tape, step=0):
        return ad.scalar_blend(self.alpha.tensor(step, tape), b, s, tape)

    def parameters(self, trainable_only: bool = False):
        return self.alpha.parameters()

    def final_alpha(self, step):
        return self.alpha.value(step)


class Product(MergeOperator):
    kind = "product"

    def forward(self, b, s, tape, step=0):
        if b.shape != s.shape:
            raise DimensionError(f"product merge: branch shapes differ, {b.shape} vs {s.shape}")
        return ad.elementwise_mul(b, s, tape)


def _check_feature_matrix(kind: str, b: Tensor, s: Tensor, width: int) -> None:
    if b.shape != s.shape:
        raise DimensionError(f"{kind} merge: branch shapes differ, {b.shape} vs {s.shape}")
    if len(b.shape) != 2 or b.shape[1] != width:
        raise DimensionError(f"{kind} merge: expected (batch, {width}) features, got {b.shape}")


class MlpAdapter(MergeOperator):
    """F(b) + s with F a two-layer perceptron, hidden width = feature width."""

    kind = "mlp_adapter"

    def __init__(self, feature_dim: int, rng: Rng):
        spec = NetworkSpec(
            layers=(linear(feature_dim, feature_dim), relu(), linear(feature_dim, feature_dim)),
            input_shape=(feature_dim,),
            role="merge_internal",
        )
        self.feature_dim = feature_dim
        self.net = build_network(spec, rng)

    def forward(self, b, s, tape, step=0):
        _check_feature_matrix(self.kind, b, s, self.feature_dim)
        return ad.add(self.net.forward(b, tape), s, tape)

    def parameters(self, trainable_only: bool = False):
        return [(f"adapter.{n}", t) for n, t in self.net.parameters(trainable_only)]


class Film(MergeOperator):
    """gamma(b) * s + beta(b); gamma/beta share a trunk with two linear heads.

    The gamma head's bias starts at one so modulation begins near identity.
    """

    kind = "film"

    def __init__(self, feature_dim: int, rng: Rng):
        self.feature_dim = feature_dim
        trunk_spec = NetworkSpec(
            layers=(linear(feature_dim, feature_dim), relu()),
            input_shape=(feature_dim,),
            role="merge_internal",
        )
        head_spec = NetworkSpec(
            layers=(linear(feature_dim, feature_dim),),
            input_shape=(feature_dim,),
            role="merge_internal",
        )
        self.trunk = build_network(trunk_spec, rng.child("trunk"))
        self.gamma_head = build_network(head_spec, rng.child("gamma"))
        self.beta_head = build_network(head_spec, rng.child("beta"))
        self.gamma_head.store.get("0.linear.bias").data[...] = 1.0

    def forward(self, b, s, tape, step=0):
        _check_feature_matrix(self.kind, b, s, self.feature_dim)
        t = self.trunk.forward(b, tape)
        gamma = self.gamma_head.forward(t, tape)
        beta = self.beta_head.forward(t, tape)
        return ad.add(ad.elementwise_mul(gamma, s, tape), beta, tape)

    def parameters(self, trainable_only: bool = False):
        out = []
        for prefix, net in (("trunk", self.trunk), ("gamma", self.gamma_head),
                            ("beta", self.beta_head)):
            out.extend((f"{prefix}.{n}", t) for n, t in net.parameters(trainable_only))
        return out


def build_merge(
    kind: str,
    feature_dim: int,
    rng: Rng,
    alpha: AlphaParam | None = None,
) -> MergeOperator:
    if kind == "alpha_blend":
        return AlphaBlend(alpha)
    if kind == "product":
        return Product()
    if kind == "mlp_adapter":
        return MlpAdapter(feature_dim, rng)
    if kind == "film":
        return Film(feature_dim, rng)
    raise NetworkSpecError(f"unknown merge kind {kind!r}")


def merge_forward(op: MergeOperator, b: Tensor, s: Tensor, tape: Tape, step: int = 0) -> Tensor:
    return op.forward(b, s, tape, step=step)


def report_alpha(strategy) -> list[float]:
    """Final blending weight per trained task, in task order.

    Only the relative ordering is meaningful: a more relevant base ends
    up with a larger alpha.
    """
    alphas = strategy.final_alphas()
    if any(a is None for a in alphas):
        raise ContractError("report_alpha: strategy does not use an alpha-blend merge")
    return [float(a) for a in alphas]
