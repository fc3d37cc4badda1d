"""Sequence runner, evaluation grid, and the derived metrics.

`run_sequence` trains a strategy over a task sequence and, after each
stage, evaluates every task trained so far on its validation split. The
resulting lower-triangular grid backs three metrics:

  forgetting_j  = E[m][j] - E[j][j]       (grid metric: error rate for
                                           classification, loss otherwise)
  rigidity_i    = ln(L_seq_i / L_first_i) (natural log; losses only)
  average rank  = per-task rank of each method, ties averaged, then meaned

Rigidity controls reuse the exact per-task random streams, so a control
run of task i is bit-identical to training task i as a one-task sequence;
strategies that are genuinely order-independent come out at exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

from .errors import ContractError
from .rng import Rng
from .strategies import Metric, Strategy, TrainLog
from .tasks import SequenceSpec, TaskSpec


@dataclass
class EvalGrid:
    """E[i][j]: metric of task j's validation split after training stage i (j <= i)."""

    m: int
    kinds: list[str]  # per-task metric kind: "error_rate" or "loss"
    cells: dict[tuple[int, int], Metric] = field(default_factory=dict)

    def put(self, stage: int, task_index: int, metric: Metric) -> None:
        if not 1 <= task_index <= stage <= self.m:
            raise ContractError(f"grid cell ({stage},{task_index}) outside lower triangle")
        self.cells[(stage, task_index)] = metric

    def metric(self, stage: int, task_index: int) -> Metric:
        if (stage, task_index) not in self.cells:
            raise ContractError(f"grid cell ({stage},{task_index}) not populated")
        return self.cells[(stage, task_index)]

    def value(self, stage: int, task_index: int) -> float:
        """Primary grid metric: error rate for classification, loss otherwise."""
        cell = self.metric(stage, task_index)
        if self.kinds[task_index - 1] == "error_rate":
            return cell.error_rate
        return cell.loss

    def loss(self, stage: int, task_index: int) -> float:
        return self.metric(stage, task_index).loss

    def complete(self) -> bool:
        return all((i, j) in self.cells for i in range(1, self.m + 1) for j in range(1, i + 1))


@dataclass
class RunResult:
    grid: EvalGrid
    logs: list[TrainLog]
    base_checksums: list[str | None]
    strategy: Strategy | None = None
    control_losses: list[float] | None = None
    rigidity: list[float] | None = None
    final_alphas: list[float | None] = field(default_factory=list)


def run_sequence(
    strategy: Strategy,
    sequence: SequenceSpec,
    steps_per_task: int,
    rng: Rng,
) -> RunResult:
    """Train each task in order; evaluate all earlier tasks after each stage.

    Per-task streams derive from the task id, not the position, so subsets
    of a sequence replay identically.
    """
    kinds = ["error_rate" if t.kind == "classification" else "loss" for t in sequence.tasks]
    grid = EvalGrid(m=sequence.m, kinds=kinds)
    logs: list[TrainLog] = []
    checksums: list[str | None] = []
    for i, task in enumerate(sequence.tasks, start=1):
        logs.append(strategy.train_task(task, steps_per_task, rng.child(f"task-{task.task_id}")))
        checksums.append(strategy.base_checksum())
        for j, earlier in enumerate(sequence.tasks[:i], start=1):
            grid.put(i, j, strategy.evaluate(earlier.task_id, "val"))
    return RunResult(
        grid=grid,
        logs=logs,
        base_checksums=checksums,
        strategy=strategy,
        final_alphas=strategy.final_alphas(),
    )


def compute_forgetting(grid: EvalGrid) -> list[float]:
    """Per task: end-of-sequence metric minus just-after-training metric."""
    if not grid.complete():
        raise ContractError("compute_forgetting needs a fully populated grid")
    m = grid.m
    return [grid.value(m, j) - grid.value(j, j) for j in range(1, m + 1)]


def compute_rigidity(
    losses_in_sequence: list[float],
    losses_trained_first: list[float],
) -> list[float]:
    """Natural-log ratio of in-sequence loss over trained-first loss, per task."""
    if len(losses_in_sequence) != len(losses_trained_first):
        raise ContractError(
            "rigidity needs matching in-sequence and trained-first measurements "
            f"({len(losses_in_sequence)} vs {len(losses_trained_first)})"
        )
    out = []
    for actual, first in zip(losses_in_sequence, losses_trained_first):
        if actual <= 0.0 or first <= 0.0:
            raise ContractError(f"rigidity undefined for nonpositive losses ({actual}, {first})")
        out.append(math.log(actual / first))
    return out


def tie_averaged_ranks(values: list[float]) -> list[float]:
    """Rank 1 = best (lowest); exact ties share the average of their positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        avg = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = avg
        i = j + 1
    return ranks


def compute_avg_rank(table: dict[str, list[float]]) -> dict[str, float]:
    """Average rank per method over tasks; every method must cover every task."""
    if not table:
        raise ContractError("rank table is empty")
    lengths = {len(v) for v in table.values()}
    if len(lengths) != 1:
        raise ContractError(f"rank table is ragged: per-method task counts {lengths}")
    (n_tasks,) = lengths
    if n_tasks == 0:
        raise ContractError("rank table has no tasks")
    methods = list(table)
    sums = {m: 0.0 for m in methods}
    for t in range(n_tasks):
        ranks = tie_averaged_ranks([table[m][t] for m in methods])
        for m, r in zip(methods, ranks):
            sums[m] += r
    return {m: sums[m] / n_tasks for m in methods}


def run_rigidity_controls(
    strategy_factory: Callable[[], Strategy],
    sequence: SequenceSpec,
    steps_per_task: int,
    rng: Rng,
) -> list[float]:
    """Loss of each task when trained first: a fresh strategy per one-task run.

    Task ids (hence random streams) are preserved, so the control is
    bit-identical to the corresponding prefix of the full sequence run.
    """
    losses = []
    for task in sequence.tasks:
        control = strategy_factory()
        single = SequenceSpec(family=sequence.family, tasks=[task])
        result = run_sequence(control, single, steps_per_task, rng)
        losses.append(result.grid.loss(1, 1))
    return losses


def run_with_controls(
    strategy_factory: Callable[[], Strategy],
    sequence: SequenceSpec,
    steps_per_task: int,
    rng: Rng,
) -> RunResult:
    """Full sequence run plus trained-first controls and the rigidity column."""
    result = run_sequence(strategy_factory(), sequence, steps_per_task, rng)
    result.control_losses = run_rigidity_controls(strategy_factory, sequence, steps_per_task, rng)
    in_sequence = [result.grid.loss(j, j) for j in range(1, sequence.m + 1)]
    result.rigidity = compute_rigidity(in_sequence, result.control_losses)
    return result


@dataclass
class MethodReport:
    name: str
    result: RunResult
    per_task_metric: list[float]
    forgetting: list[float]
    rigidity: list[float] | None
    trainable_params: int
    total_params: int
    avg_rank: float | None = None


@dataclass
class ComparisonReport:
    methods: list[MethodReport]
    avg_ranks: dict[str, float]

    def rank_table(self) -> dict[str, list[float]]:
        return {m.name: m.per_task_metric for m in self.methods}


def compare_strategies(
    factories: dict[str, Callable[[], Strategy]],
    sequence: SequenceSpec,
    steps_per_task: int | dict[str, int],
    rng_for: Callable[[str], Rng],
    with_controls: bool = True,
    jobs: int = 1,
) -> ComparisonReport:
    """Run every method on the same sequence and rank final per-task metrics."""
    from concurrent.futures import ThreadPoolExecutor
    from .nets import count_params

    names = list(factories)

    def steps_for(name: str) -> int:
        if isinstance(steps_per_task, dict):
            return steps_per_task[name]
        return steps_per_task

    def run_one(name: str) -> MethodReport:
        factory = factories[name]
        rng = rng_for(name)
        if with_controls:
            result = run_with_controls(factory, sequence, steps_for(name), rng)
        else:
            result = run_sequence(factory(), sequence, steps_for(name), rng)
        per_task = [result.grid.value(sequence.m, j) for j in range(1, sequence.m + 1)]
        return MethodReport(
            name=name,
            result=result,
            per_task_metric=per_task,
            forgetting=compute_forgetting(result.grid),
            rigidity=result.rigidity,
            trainable_params=count_params(result.strategy, trainable_only=True),
            total_params=count_params(result.strategy),
        )

    if jobs > 1 and len(names) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(run_one, names))
    else:
        reports = [run_one(name) for name in names]
    avg_ranks = compute_avg_rank({r.name: r.per_task_metric for r in reports})
    for report in reports:
        report.avg_rank = avg_ranks[report.name]
    reports.sort(key=lambda r: (r.avg_rank, r.name))
    return ComparisonReport(methods=reports, avg_ranks=avg_ranks)


def ablation_run(
    sequence: SequenceSpec,
    base_factory: Callable[[], "object"],
    side_spec,
    cfg,
    steps_per_task: int,
    rng_for: Callable[[str], Rng],
    merge_kind: str = "alpha_blend",
) -> ComparisonReport:
    """Base-only vs side-only vs full side-tuning on one sequence."""
    from .strategies import build_strategy

    factories = {
        "base_only": lambda: build_strategy("features", base=base_factory(), cfg=cfg),
        "side_only": lambda: build_strategy("scratch", net_spec=side_spec, cfg=cfg),
        "sidetune": lambda: build_strategy(
            "sidetune", base=base_factory(), side_spec=side_spec, cfg=cfg,
            merge_kind=merge_kind,
        ),
    }
    return compare_strategies(
        factories, sequence, steps_per_task, rng_for, with_controls=False
    )


@dataclass
class BoostComparison:
    member_losses: list[float]
    stack_params: int
    deep_loss: float
    deep_params: int


def boost_comparison(
    base_factory: Callable[[], "object"],
    member_spec,
    deep_spec,
    task: TaskSpec,
    num_members: int,
    steps_each: int,
    cfg,
    rng: Rng,
) -> BoostComparison:
    """Parameter-matched shootout: k shallow boosted members vs one deep side."""
    from .nets import count_params
    from .strategies import boost_fit, build_strategy

    stack = boost_fit(
        base_factory(), member_spec, task, num_members, steps_each, cfg, rng.child("stack")
    )
    stack_params = sum(t.size for name, t in stack.parameters() if not name.startswith("base/"))

    deep = build_strategy(
        "sidetune", base=base_factory(), side_spec=deep_spec, cfg=cfg,
        merge_kind="alpha_blend",
    )
    deep.train_task(task, num_members * steps_each, rng.child("deep").child(f"task-{task.task_id}"))
    deep_loss = deep.evaluate(task.task_id, "train").loss
    deep_params = count_params(deep, trainable_only=True)
    return BoostComparison(
        member_losses=stack.member_final_losses,
        stack_params=stack_params,
        deep_loss=deep_loss,
        deep_params=deep_params,
    )
