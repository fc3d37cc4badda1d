"""Adaptation strategies with a uniform train-task / evaluate contract.

Additive kinds (sidetune, features, pnn_lite, independent) never touch
base parameters: each task gets its own modules and a readout, so earlier
tasks keep their exact trained behavior. Substitutive kinds (finetune,
ewc, psp) share base weights across tasks and can forget.

Per-task randomness is derived from named substreams of the task rng
passed to `train_task`, never from draw order, so training a task is
bit-identical whether it runs first or eighth in a sequence. Stream names
are shared across strategies ("head", "order", ...) which is what makes
the curriculum reductions exact: side-tuning with alpha fixed at 1
reproduces feature extraction bitwise, and with alpha fixed at 0 plus a
copied side it reproduces fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, backward, const
from .errors import ContractError, DimensionError, NetworkSpecError, TaskSetupError
from .merge import AlphaCurriculum, AlphaParam, MergeOperator, build_merge
from .nets import (
    InitScheme,
    Network,
    NetworkSpec,
    build_network,
    init_side,
    linear,
    save_params,
    load_params,
    zero_final_layer,
)
from .optim import init_optimizer, optimizer_step
from .rng import Rng
from .tasks import Dataset, TaskSpec

STRATEGY_KINDS = (
    "sidetune",
    "finetune",
    "features",
    "scratch",
    "ewc",
    "psp",
    "pnn_lite",
    "independent",
)
ADDITIVE_KINDS = ("sidetune", "features", "pnn_lite", "independent")


@dataclass(frozen=True)
class TrainerConfig:
    optimizer: str = "adam"
    lr: float = 1e-2
    batch_size: int = 32
    regression_loss: str = "mse"  # or "l1"


@dataclass
class TrainLog:
    task_id: int
    losses: list[float]
    final_alpha: float | None
    steps: int


@dataclass
class Metric:
    loss: float
    error_rate: float | None


def build_head(feature_dim: int, out_dim: int, rng: Rng) -> Network:
    spec = NetworkSpec(layers=(linear(feature_dim, out_dim),), input_shape=(feature_dim,),
                       role="readout")
    return build_network(spec, rng)


def _loss(task: TaskSpec, pred: Tensor, y: Tensor, tape: Tape, regression_loss: str) -> Tensor:
    if task.kind == "classification":
        return ad.softmax_cross_entropy(pred, y, tape)
    if regression_loss == "l1":
        return ad.l1_loss(pred, y, tape)
    return ad.mse_loss(pred, y, tape)


class Strategy:
    """Template for all adaptation methods; subclasses fill four hooks."""

    kind = "?"
    additive = False

    def __init__(self, base: Network | None, cfg: TrainerConfig):
        self.base = base
        self.cfg = cfg
        self.tasks: dict[int, TaskSpec] = {}
        self.heads: dict[int, Network] = {}
        self.logs: list[TrainLog] = []
        self._final_steps: dict[int, int] = {}

    # --- hooks -----------------------------------------------------------

    def begin_task(self, task: TaskSpec, rng: Rng) -> list[Tensor]:
        """Create per-task modules; return trainables besides the head."""
        return []

    def features(self, task_id: int, x: Tensor, tape: Tape, step: int) -> Tensor:
        raise NotImplementedError

    def grad_hook(self, task: TaskSpec) -> float:
        """Add regularizer gradients after backward; returns penalty value."""
        return 0.0

    def end_task(self, task: TaskSpec, rng: Rng) -> None:
        pass

    def abort_task(self, task: TaskSpec) -> None:
        """Undo begin_task (used by zero-shot evaluation)."""

    # --- shared machinery --------------------------------------------------

    def feature_dim(self, task: TaskSpec) -> int:
        shape = self.base.output_shape()
        if len(shape) != 1:
            raise TaskSetupError(f"{self.kind}: base must emit flat features, got {shape}")
        return shape[0]

    def _validate_task(self, task: TaskSpec) -> None:
        if self.base is not None and task.input_shape != self.base.spec.input_shape:
            raise TaskSetupError(
                f"task {task.task_id} input shape {task.input_shape} does not match "
                f"base input shape {self.base.spec.input_shape}"
            )

    def train_task(self, task: TaskSpec, steps: int, rng: Rng, on_step=None) -> TrainLog:
        if task.task_id in self.tasks:
            raise ContractError(f"task {task.task_id} was already trained")
        self._validate_task(task)
        self.tasks[task.task_id] = task
        extra = self.begin_task(task, rng)
        head = build_head(self.feature_dim(task), task.target_dim, rng.child("head"))
        self.heads[task.task_id] = head
        params = extra + head.param_tensors()
        opt = init_optimizer(self.cfg.optimizer, params, self.cfg.lr)
        order = rng.child("order")
        n = task.train.n
        bs = min(self.cfg.batch_size, n)
        losses: list[float] = []
        for step in range(steps):
            idx = order.integers(n, size=bs)
            bx, by = task.train.take(idx)
            tape = Tape()
            feats = self.features(task.task_id, const(bx), tape, step)
            pred = head.forward(feats, tape)
            loss = _loss(task, pred, const(by), tape, self.cfg.regression_loss)
            for p in params:
                p.zero_grad()
            backward(tape, loss)
            self.grad_hook(task)
            optimizer_step(opt, params)
            losses.append(loss.item())
            if on_step is not None:
                on_step(step, self)
        self._final_steps[task.task_id] = steps
        self.end_task(task, rng)
        log = TrainLog(task.task_id, losses, self.task_alpha(task.task_id), steps)
        self.logs.append(log)
        return log

    def _resolve_split(self, task: TaskSpec, split) -> Dataset:
        if isinstance(split, Dataset):
            return split
        if split == "val":
            return task.val
        if split == "train":
            return task.train
        raise ContractError(f"unknown split {split!r}")

    def evaluate(self, task, split="val", zero_shot: bool = False, rng: Rng | None = None) -> Metric:
        """Deterministic loss (and error rate for classification) on a split."""
        if isinstance(task, TaskSpec):
            task_id, spec = task.task_id, task
        else:
            task_id, spec = int(task), self.tasks.get(int(task))
        if task_id not in self.tasks:
            if not zero_shot:
                raise ContractError(f"task {task_id} was never trained (pass zero_shot=True)")
            if spec is None or rng is None:
                raise ContractError("zero-shot evaluation needs a TaskSpec and an rng")
            return self._zero_shot_eval(spec, split, rng)
        spec = self.tasks[task_id]
        ds = self._resolve_split(spec, split)
        return self._eval_on(task_id, spec, ds)

    def _eval_on(self, task_id: int, spec: TaskSpec, ds: Dataset) -> Metric:
        tape = Tape()
        step = self._final_steps.get(task_id, 0)
        feats = self.features(task_id, const(ds.inputs), tape, step)
        pred = self.heads[task_id].forward(feats, tape)
        loss = _loss(spec, pred, const(ds.targets), tape, self.cfg.regression_loss)
        error = None
        if spec.kind == "classification":
            hits = np.argmax(pred.data, axis=1) == ds.targets.astype(np.int64)
            error = float(1.0 - hits.mean())
        return Metric(loss=loss.item(), error_rate=error)

    def _zero_shot_eval(self, spec: TaskSpec, split, rng: Rng) -> Metric:
        self._validate_task(spec)
        self.tasks[spec.task_id] = spec
        try:
            self.begin_task(spec, rng)
            self.heads[spec.task_id] = build_head(
                self.feature_dim(spec), spec.target_dim, rng.child("head")
            )
            return self._eval_on(spec.task_id, spec, self._resolve_split(spec, split))
        finally:
            self.abort_task(spec)
            self.tasks.pop(spec.task_id, None)
            self.heads.pop(spec.task_id, None)

    def task_alpha(self, task_id: int) -> float | None:
        return None

    def final_alphas(self) -> list[float | None]:
        return [log.final_alpha for log in self.logs]

    def base_checksum(self) -> str | None:
        return self.base.checksum() if self.base is not None else None

    def parameters(self, trainable_only: bool = False, include_heads: bool = True):
        pairs: list[tuple[str, Tensor]] = []
        if self.base is not None:
            pairs.extend(
                (f"base/{n}", t) for n, t in self.base.parameters(trainable_only=trainable_only)
            )
        pairs.extend(self._task_parameters())
        if include_heads:
            for tid in sorted(self.heads):
                pairs.extend(
                    (f"task{tid}/head/{n}", t) for n, t in self.heads[tid].parameters()
                )
        return pairs

    def _task_parameters(self) -> list[tuple[str, Tensor]]:
        return []


class SideTune(Strategy):
    """One frozen base, one fresh side network + merge + readout per task."""

    kind = "sidetune"
    additive = True

    def __init__(
        self,
        base: Network,
        side_spec: NetworkSpec,
        cfg: TrainerConfig,
        merge_kind: str = "alpha_blend",
        alpha_mode: str = "learnable",
        alpha_schedule: AlphaCurriculum | None = None,
        init_scheme: InitScheme = InitScheme(),
    ):
        super().__init__(base, cfg)
        self.base.freeze()
        if side_spec.output_shape() != base.output_shape():
            raise NetworkSpecError(
                f"side output {side_spec.output_shape()} != base output {base.output_shape()}"
            )
        self.side_spec = side_spec
        self.merge_kind = merge_kind
        self.alpha_mode = alpha_mode
        self.alpha_schedule = alpha_schedule
        self.init_scheme = init_scheme
        self.sides: dict[int, Network] = {}
        self.merges: dict[int, MergeOperator] = {}

    def _alpha(self) -> AlphaParam | None:
        if self.merge_kind != "alpha_blend":
            return None
        if self.alpha_mode == "learnable":
            return AlphaParam("learnable")
        return AlphaParam("scheduled", self.alpha_schedule)

    def begin_task(self, task: TaskSpec, rng: Rng) -> list[Tensor]:
        side = build_network(self.side_spec, rng.child("side"))
        if self.init_scheme.kind == "distill":
            sample_rng = rng.child("distill")
            train_inputs = task.train.inputs

            def sampler(k: int) -> np.ndarray:
                return train_inputs[sample_rng.integers(len(train_inputs), size=k)]

            init_side(side, self.base, self.init_scheme, data_sampler=sampler, rng=sample_rng)
        else:
            init_side(side, self.base, self.init_scheme)
        merge = build_merge(
            self.merge_kind, self.feature_dim(task), rng.child("merge"), alpha=self._alpha()
        )
        self.sides[task.task_id] = side
        self.merges[task.task_id] = merge
        return side.param_tensors() + [t for _, t in merge.parameters()]

    def abort_task(self, task: TaskSpec) -> None:
        self.sides.pop(task.task_id, None)
        self.merges.pop(task.task_id, None)

    def features(self, task_id, x, tape, step):
        b = self.base.forward(x, tape)
        s = self.sides[task_id].forward(x, tape)
        return self.merges[task_id].forward(b, s, tape, step=step)

    def task_alpha(self, task_id):
        return self.merges[task_id].final_alpha(self._final_steps[task_id])

    def _task_parameters(self):
        pairs = []
        for tid in sorted(self.sides):
            pairs.extend((f"task{tid}/side/{n}", t) for n, t in self.sides[tid].parameters())
            pairs.extend((f"task{tid}/merge/{n}", t) for n, t in self.merges[tid].parameters())
        return pairs


class Features(Strategy):
    """Frozen base as a fixed feature extractor; trains readouts only."""

    kind = "features"
    additive = True

    def __init__(self, base: Network, cfg: TrainerConfig):
        super().__init__(base, cfg)
        self.base.freeze()

    def features(self, task_id, x, tape, step):
        return self.base.forward(x, tape)


class FineTune(Strategy):
    """Pretrained weights as initialization; every task updates the base."""

    kind = "finetune"

    def features(self, task_id, x, tape, step):
        return self.base.forward(x, tape)

    def begin_task(self, task, rng):
        return self.base.param_tensors()


class FreshPerTask(Strategy):
    """A brand-new network per task (kinds: scratch, independent)."""

    additive = True

    def __init__(self, net_spec: NetworkSpec, cfg: TrainerConfig, kind: str):
        super().__init__(None, cfg)
        if kind not in ("scratch", "independent"):
            raise ContractError(f"FreshPerTask cannot be kind {kind!r}")
        self.kind = kind
        self.net_spec = net_spec
        self.nets: dict[int, Network] = {}

    def feature_dim(self, task):
        shape = self.net_spec.output_shape()
        if len(shape) != 1:
            raise TaskSetupError(f"{self.kind}: net must emit flat features, got {shape}")
        return shape[0]

    def _validate_task(self, task):
        if task.input_shape != self.net_spec.input_shape:
            raise TaskSetupError(
                f"task {task.task_id} input shape {task.input_shape} does not match "
                f"net input shape {self.net_spec.input_shape}"
            )

    def begin_task(self, task, rng):
        net = build_network(self.net_spec, rng.child("net"))
        self.nets[task.task_id] = net
        return net.param_tensors()

    def abort_task(self, task):
        self.nets.pop(task.task_id, None)

    def features(self, task_id, x, tape, step):
        return self.nets[task_id].forward(x, tape)

    def _task_parameters(self):
        pairs = []
        for tid in sorted(self.nets):
            pairs.extend((f"task{tid}/net/{n}", t) for n, t in self.nets[tid].parameters())
        return pairs


@dataclass
class EwcState:
    lam: float
    gamma: float
    fisher: list[np.ndarray] | None = None
    anchors: list[np.ndarray] | None = None
    tasks_consolidated: int = 0


def ewc_penalty(
    values: list[np.ndarray],
    anchors: list[np.ndarray],
    fishers: list[np.ndarray],
    lam: float,
) -> tuple[float, list[np.ndarray]]:
    """Quadratic anchor penalty lam/2 * sum F (theta - theta*)^2 and its gradient."""
    value = 0.0
    grads = []
    for theta, anchor, f in zip(values, anchors, fishers):
        d = theta - anchor
        value += 0.5 * lam * float(np.sum(f * d * d))
        grads.append(lam * f * d)
    return value, grads


class Ewc(Strategy):
    """Online EWC: one running Fisher diagonal with decay, one anchor."""

    kind = "ewc"

    def __init__(
        self,
        base: Network,
        cfg: TrainerConfig,
        lam: float = 1.0,
        gamma: float = 1.0,
        fisher_samples: int = 512,
    ):
        super().__init__(base, cfg)
        self.state = EwcState(lam=lam, gamma=gamma)
        self.fisher_samples = fisher_samples

    def features(self, task_id, x, tape, step):
        return self.base.forward(x, tape)

    def begin_task(self, task, rng):
        return self.base.param_tensors()

    def grad_hook(self, task):
        if self.state.anchors is None:
            return 0.0
        params = self.base.param_tensors()
        value, grads = ewc_penalty(
            [p.data for p in params], self.state.anchors, self.state.fisher, self.state.lam
        )
        for p, g in zip(params, grads):
            p.grad += g
        return value

    def end_task(self, task, rng):
        self.consolidate(task, rng.child("fisher"))

    def consolidate(self, task: TaskSpec, rng: Rng) -> None:
        """Estimate the Fisher diagonal on the just-trained task and anchor."""
        if task.task_id not in self._final_steps:
            raise ContractError("ewc consolidation requires a trained task")
        params = self.base.param_tensors()
        head = self.heads[task.task_id]
        n = task.train.n
        count = min(self.fisher_samples, n) if self.fisher_samples else n
        idx = rng.integers(n, size=count)
        fisher = [np.zeros_like(p.data) for p in params]
        for i in idx:
            bx = task.train.inputs[i : i + 1]
            by = task.train.targets[i : i + 1]
            tape = Tape()
            feats = self.base.forward(const(bx), tape)
            pred = head.forward(feats, tape)
            loss = _loss(task, pred, const(by), tape, self.cfg.regression_loss)
            for p in params:
                p.zero_grad()
            backward(tape, loss)
            for f, p in zip(fisher, params):
                f += p.grad * p.grad
        for f in fisher:
            f /= count
        if self.state.fisher is None:
            self.state.fisher = fisher
        else:
            self.state.fisher = [
                self.state.gamma * old + new for old, new in zip(self.state.fisher, fisher)
            ]
        self.state.anchors = [p.data.copy() for p in params]
        self.state.tasks_consolidated += 1


def make_psp_keys(base: Network, rng: Rng) -> dict[str, np.ndarray]:
    """One +-1 key per parameterized layer, sized to the layer's input axis."""
    keys = {}
    for i, layer in enumerate(base.spec.layers):
        if layer.kind == "linear":
            keys[f"{i}.linear.weight"] = rng.signs((layer.in_features,))
        elif layer.kind == "conv2d":
            keys[f"{i}.conv2d.weight"] = rng.signs((layer.in_channels,))
    return keys


def psp_apply_key(net: Network, keys: dict[str, np.ndarray]) -> None:
    """Multiply each layer's input axis by its +-1 key, in place.

    Applying the same key twice restores the weights exactly.
    """
    for name, key in keys.items():
        w = net.store.get(name)
        if name.endswith("linear.weight"):
            if w.data.shape[0] != key.shape[0]:
                raise DimensionError(
                    f"psp key for {name} has {key.shape[0]} entries, layer input is "
                    f"{w.data.shape[0]}"
                )
            w.data *= key[:, None]
        else:  # conv weight (O, C, kh, kw): key the input-channel axis
            if w.data.shape[1] != key.shape[0]:
                raise DimensionError(
                    f"psp key for {name} has {key.shape[0]} entries, layer input is "
                    f"{w.data.shape[1]}"
                )
            w.data *= key[None, :, None, None]


class Psp(Strategy):
    """Parameter superposition with real +-1 context keys on layer inputs."""

    kind = "psp"

    def __init__(self, base: Network, cfg: TrainerConfig):
        super().__init__(base, cfg)
        self.keys: dict[int, dict[str, np.ndarray]] = {}

    def features(self, task_id, x, tape, step):
        return self.base.forward(x, tape)

    def begin_task(self, task, rng):
        keys = make_psp_keys(self.base, rng.child("key"))
        self.keys[task.task_id] = keys
        psp_apply_key(self.base, keys)  # train in keyed coordinates
        return self.base.param_tensors()

    def end_task(self, task, rng):
        psp_apply_key(self.base, self.keys[task.task_id])  # involution: unkey

    def abort_task(self, task):
        keys = self.keys.pop(task.task_id, None)
        if keys:
            psp_apply_key(self.base, keys)

    def _eval_on(self, task_id, spec, ds):
        psp_apply_key(self.base, self.keys[task_id])
        try:
            return super()._eval_on(task_id, spec, ds)
        finally:
            psp_apply_key(self.base, self.keys[task_id])


_PNN_ALLOWED = {"linear", "relu", "tanh", "flatten"}


def pnn_lateral_forward(
    base_hidden: list[Tensor],
    column: Network,
    adapters: list[Network],
    x: Tensor,
    tape: Tape,
) -> Tensor:
    """Column forward where each hidden layer also receives an adapted base tap."""
    h = x
    act_seen = 0
    for i, layer in enumerate(column.spec.layers):
        if layer.kind == "linear":
            if act_seen > 0:
                if act_seen - 1 >= len(adapters) or act_seen - 1 >= len(base_hidden):
                    raise NetworkSpecError("pnn taps and adapters misaligned with column")
                lateral = adapters[act_seen - 1].forward(base_hidden[act_seen - 1], tape)
                h = ad.add(h, lateral, tape)
            w = column.store.get(f"{i}.linear.weight")
            b = column.store.get(f"{i}.linear.bias")
            h = ad.add(ad.matmul(h, w, tape), b, tape)
        elif layer.kind == "relu":
            h = ad.relu(h, tape)
            act_seen += 1
        elif layer.kind == "tanh":
            h = ad.tanh(h, tape)
            act_seen += 1
        elif layer.kind == "flatten":
            h = ad.flatten(h, tape)
    return h


class PnnLite(Strategy):
    """Per-task side column with one linear adapter per hidden base tap.

    Single prior column (the frozen base) only; the column's layer-kind
    sequence must mirror the base so taps align.
    """

    kind = "pnn_lite"
    additive = True

    def __init__(
        self,
        base: Network,
        side_spec: NetworkSpec,
        cfg: TrainerConfig,
        merge_kind: str = "alpha_blend",
        alpha_mode: str = "learnable",
        alpha_schedule: AlphaCurriculum | None = None,
        adapter_init: str = "zero",
    ):
        super().__init__(base, cfg)
        self.base.freeze()
        base_kinds = [l.kind for l in base.spec.layers]
        side_kinds = [l.kind for l in side_spec.layers]
        if not set(base_kinds) <= _PNN_ALLOWED:
            raise NetworkSpecError(f"pnn_lite supports MLP bases, got layers {base_kinds}")
        if base_kinds != side_kinds:
            raise NetworkSpecError(
                f"pnn_lite column layers {side_kinds} must mirror base layers {base_kinds}"
            )
        if side_spec.output_shape() != base.output_shape():
            raise NetworkSpecError("pnn_lite column output must match base output")
        self.side_spec = side_spec
        self.merge_kind = merge_kind
        self.alpha_mode = alpha_mode
        self.alpha_schedule = alpha_schedule
        self.adapter_init = adapter_init
        self.columns: dict[int, Network] = {}
        self.adapters: dict[int, list[Network]] = {}
        self.merges: dict[int, MergeOperator] = {}

    def _hidden_dims(self, spec: NetworkSpec) -> list[int]:
        dims = []
        shape = spec.input_shape
        from .nets import _apply_shape

        for i, layer in enumerate(spec.layers):
            shape = _apply_shape(layer, shape, i)
            if layer.kind in ("relu", "tanh"):
                dims.append(shape[0])
        return dims

    def begin_task(self, task, rng):
        # the column draws from the same stream a sidetune side would, so
        # zero adapters reproduce a plain side-tune forward exactly
        column = build_network(self.side_spec, rng.child("side"))
        base_dims = self._hidden_dims(self.base.spec)
        side_dims = self._hidden_dims(self.side_spec)
        # the last activation's tap feeds the final linear; earlier ones interleave
        n_taps = 0
        linear_count = sum(1 for l in self.side_spec.layers if l.kind == "linear")
        n_taps = min(linear_count - 1, len(base_dims))
        adapters = []
        ad_rng = rng.child("adapters")
        for t in range(n_taps):
            spec = NetworkSpec(
                layers=(linear(base_dims[t], side_dims[t]),),
                input_shape=(base_dims[t],),
                role="merge_internal",
            )
            adapter = build_network(spec, ad_rng.child(f"tap-{t}"))
            if self.adapter_init == "zero":
                for _, p in adapter.parameters():
                    p.data[...] = 0.0
            adapters.append(adapter)
        alpha = None
        if self.merge_kind == "alpha_blend":
            alpha = (
                AlphaParam("learnable")
                if self.alpha_mode == "learnable"
                else AlphaParam("scheduled", self.alpha_schedule)
            )
        merge = build_merge(self.merge_kind, self.feature_dim(task), rng.child("merge"),
                            alpha=alpha)
        self.columns[task.task_id] = column
        self.adapters[task.task_id] = adapters
        self.merges[task.task_id] = merge
        params = column.param_tensors()
        for adapter in adapters:
            params.extend(adapter.param_tensors())
        params.extend(t for _, t in merge.parameters())
        return params

    def abort_task(self, task):
        self.columns.pop(task.task_id, None)
        self.adapters.pop(task.task_id, None)
        self.merges.pop(task.task_id, None)

    def features(self, task_id, x, tape, step):
        b, hidden = self.base.forward_with_hidden(x, tape)
        s = pnn_lateral_forward(hidden, self.columns[task_id], self.adapters[task_id], x, tape)
        return self.merges[task_id].forward(b, s, tape, step=step)

    def task_alpha(self, task_id):
        return self.merges[task_id].final_alpha(self._final_steps[task_id])

    def _task_parameters(self):
        pairs = []
        for tid in sorted(self.columns):
            pairs.extend((f"task{tid}/column/{n}", t) for n, t in self.columns[tid].parameters())
            for k, adapter in enumerate(self.adapters[tid]):
                pairs.extend(
                    (f"task{tid}/adapter{k}/{n}", t) for n, t in adapter.parameters()
                )
            pairs.extend((f"task{tid}/merge/{n}", t) for n, t in self.merges[tid].parameters())
        return pairs


def build_strategy(
    kind: str,
    *,
    base: Network | None = None,
    cfg: TrainerConfig = TrainerConfig(),
    side_spec: NetworkSpec | None = None,
    net_spec: NetworkSpec | None = None,
    merge_kind: str = "alpha_blend",
    alpha_mode: str = "learnable",
    alpha_schedule: AlphaCurriculum | None = None,
    init_scheme: InitScheme = InitScheme(),
    lam: float = 1.0,
    ewc_gamma: float = 1.0,
    fisher_samples: int = 512,
) -> Strategy:
    """Uniform constructor used by the harness and the CLI."""
    if kind == "sidetune":
        return SideTune(base, side_spec, cfg, merge_kind, alpha_mode, alpha_schedule,
                        init_scheme)
    if kind == "features":
        return Features(base, cfg)
    if kind == "finetune":
        return FineTune(base, cfg)
    if kind in ("scratch", "independent"):
        spec = net_spec if net_spec is not None else base.spec if base is not None else None
        if spec is None:
            raise ContractError(f"{kind} needs a net_spec (or a base to copy the shape from)")
        return FreshPerTask(spec, cfg, kind)
    if kind == "ewc":
        return Ewc(base, cfg, lam=lam, gamma=ewc_gamma, fisher_samples=fisher_samples)
    if kind == "psp":
        return Psp(base, cfg)
    if kind == "pnn_lite":
        return PnnLite(base, side_spec, cfg, merge_kind, alpha_mode, alpha_schedule)
    raise ContractError(f"unknown strategy kind {kind!r}")


# --- boosting ---------------------------------------------------------------


@dataclass
class BoostStack:
    """Side networks fit one at a time to the residual of the ensemble."""

    base: Network
    members: list[Network] = field(default_factory=list)
    head: Network | None = None
    member_final_losses: list[float] = field(default_factory=list)
    member_logs: list[list[float]] = field(default_factory=list)

    def forward(self, x: Tensor, tape: Tape, upto: int | None = None) -> Tensor:
        rep = self.base.forward(x, tape)
        members = self.members if upto is None else self.members[:upto]
        for member in members:
            rep = ad.add(rep, member.forward(x, tape), tape)
        return rep

    def parameters(self, trainable_only: bool = False):
        pairs = [(f"base/{n}", t) for n, t in self.base.parameters(trainable_only)]
        for j, member in enumerate(self.members):
            pairs.extend((f"member{j}/{n}", t) for n, t in member.parameters())
        if self.head is not None:
            pairs.extend((f"head/{n}", t) for n, t in self.head.parameters())
        return pairs


def boost_fit(
    base: Network,
    member_spec: NetworkSpec,
    task: TaskSpec,
    num_members: int,
    steps_each: int,
    cfg: TrainerConfig,
    rng: Rng,
) -> BoostStack:
    """Fit `num_members` side networks greedily on one task.

    Each member starts with a zeroed final layer, so the ensemble output is
    unchanged when it joins and training can only improve the fit. Training
    is full-batch so recorded per-member losses are directly comparable.
    """
    if num_members < 1:
        raise ContractError(f"boost_fit needs num_members >= 1, got {num_members}")
    base.freeze()
    stack = BoostStack(base=base)
    feat_dim = base.output_shape()[0]
    stack.head = build_head(feat_dim, task.target_dim, rng.child("head"))
    x = const(task.train.inputs)
    y = const(task.train.targets)

    def full_loss() -> float:
        tape = Tape()
        pred = stack.head.forward(stack.forward(x, tape), tape)
        return _loss(task, pred, y, tape, cfg.regression_loss).item()

    for j in range(num_members):
        member = build_network(member_spec, rng.child(f"member-{j}"))
        zero_final_layer(member)
        stack.members.append(member)
        params = member.param_tensors() + stack.head.param_tensors()
        opt = init_optimizer(cfg.optimizer, params, cfg.lr)
        log = []
        for _ in range(steps_each):
            tape = Tape()
            pred = stack.head.forward(stack.forward(x, tape), tape)
            loss = _loss(task, pred, y, tape, cfg.regression_loss)
            for p in params:
                p.zero_grad()
            backward(tape, loss)
            optimizer_step(opt, params)
            log.append(loss.item())
        stack.member_logs.append(log)
        stack.member_final_losses.append(full_loss())
    return stack


# --- strategy checkpoints -----------------------------------------------


def save_strategy(strategy: Strategy, path) -> None:
    """Checkpoint every parameter, preceded by a strategy-kind header record."""
    records = [(f"!strategy:{strategy.kind}", np.zeros(0))]
    records.extend((name, t.data) for name, t in strategy.parameters())
    save_params(path, records)


def load_strategy(strategy: Strategy, path) -> Strategy:
    """Restore a checkpoint into an identically-structured strategy."""
    from .errors import DataFormatError

    loaded = load_params(path)
    kinds = [k.split(":", 1)[1] for k in loaded if k.startswith("!strategy:")]
    if kinds != [strategy.kind]:
        raise DataFormatError(
            f"checkpoint is for strategy {kinds or 'unknown'}, not {strategy.kind!r}"
        )
    expected = dict(strategy.parameters())
    entries = {k: v for k, v in loaded.items() if not k.startswith("!")}
    if set(entries) != set(expected):
        raise DataFormatError("checkpoint parameter ids do not match the strategy")
    for name, arr in entries.items():
        if expected[name].data.shape != arr.shape:
            raise DataFormatError(f"shape mismatch for {name!r}")
        expected[name].data[...] = arr
    return strategy
