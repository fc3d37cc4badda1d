"""Artifact writers: delimited results, run manifests, and figures.

CSV bodies are byte-deterministic for a given config and seed: rows are
canonically ordered, floats are written with shortest round-trip repr,
and run ids derive from the config hash. Figures are matplotlib SVGs
rendered with a fixed hash salt and no timestamp metadata, so the same
CSV always produces identical bytes.
"""

from __future__ import annotations

import csv
import json
import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import DataFormatError  # noqa: E402
from .harness import MethodReport, RunResult  # noqa: E402
from .tasks import SequenceSpec  # noqa: E402

plt.rcParams["svg.hashsalt"] = "sidetune-lab"

RESULTS_COLUMNS = (
    "run_id",
    "strategy",
    "task_trained",
    "task_evaled",
    "metric_kind",
    "value",
    "seed",
    "step_budget",
)

METRICS_COLUMNS = (
    "run_id",
    "strategy",
    "task",
    "forgetting",
    "rigidity",
    "final_alpha",
    "seed",
)

COMPARE_COLUMNS = (
    "run_id",
    "strategy",
    "avg_rank",
    "mean_forgetting",
    "mean_rigidity",
    "trainable_params",
    "total_params",
    "seed",
)

BOOST_COLUMNS = ("run_id", "arm", "member_index", "train_loss", "trainable_params", "seed")


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(v) for v in row])
    return path


def results_rows(
    run_id: str,
    label: str,
    seed: int,
    steps: int,
    result: RunResult,
    sequence: SequenceSpec,
) -> list[tuple]:
    """One row per grid cell per metric kind, controls appended."""
    rows = []
    m = sequence.m
    for i in range(1, m + 1):
        for j in range(1, i + 1):
            cell = result.grid.metric(i, j)
            rows.append((run_id, label, i, j, "loss", cell.loss, seed, steps))
            if cell.error_rate is not None:
                rows.append((run_id, label, i, j, "error_rate", cell.error_rate, seed, steps))
    if result.control_losses is not None:
        for j, loss in enumerate(result.control_losses, start=1):
            rows.append((f"{run_id}/ctrl-{j}", label, j, j, "loss", loss, seed, steps))
    return rows


def metrics_rows(run_id, label, seed, result: RunResult, sequence: SequenceSpec, forgetting):
    rows = []
    for j in range(1, sequence.m + 1):
        rigidity = result.rigidity[j - 1] if result.rigidity is not None else None
        alpha = result.final_alphas[j - 1] if j - 1 < len(result.final_alphas) else None
        rows.append((run_id, label, j, forgetting[j - 1], rigidity, alpha, seed))
    return rows


def compare_rows(run_id, seed, methods: list[MethodReport]):
    rows = []
    for m in methods:
        mean_rigidity = (
            sum(m.rigidity) / len(m.rigidity) if m.rigidity is not None else None
        )
        rows.append(
            (
                run_id,
                m.name,
                m.avg_rank,
                sum(m.forgetting) / len(m.forgetting),
                mean_rigidity,
                m.trainable_params,
                m.total_params,
                seed,
            )
        )
    return rows


def write_manifest(path, manifest: dict) -> Path:
    """Atomic write: the manifest exists fully formed or not at all."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)
    return path


# --- figures ------------------------------------------------------------------


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _safe_name(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "-" for c in label)


def _no_data_figure(path: Path, title: str) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.set_title(title)
    ax.set_xlabel("training stage")
    ax.set_ylabel("metric")
    ax.annotate("no data", xy=(0.5, 0.5), xycoords="axes fraction",
                ha="center", va="center", fontsize=14)
    return _save(fig, path)


@dataclass
class ParsedResults:
    """results.csv decomposed into main grids and control cells."""

    # (strategy) -> task -> {stage: value}; per-task preferred metric kind
    grids: dict[str, dict[int, dict[int, float]]]
    losses: dict[str, dict[int, dict[int, float]]]
    control_losses: dict[str, dict[int, float]]
    stages: dict[str, int]


def read_results_csv(path) -> ParsedResults:
    path = Path(path)
    grids: dict = defaultdict(lambda: defaultdict(dict))
    losses: dict = defaultdict(lambda: defaultdict(dict))
    errors: dict = defaultdict(lambda: defaultdict(dict))
    controls: dict = defaultdict(dict)
    stages: dict = defaultdict(int)
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != RESULTS_COLUMNS:
            raise DataFormatError(f"{path}: line 1: expected header {','.join(RESULTS_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RESULTS_COLUMNS):
                raise DataFormatError(
                    f"{path}: line {lineno}: expected {len(RESULTS_COLUMNS)} fields, got {len(row)}"
                )
            run_id, strategy, trained, evaled, kind, value, _seed, _steps = row
            try:
                i, j, v = int(trained), int(evaled), float(value)
            except ValueError as err:
                raise DataFormatError(f"{path}: line {lineno}: {err}") from None
            if kind not in ("loss", "error_rate"):
                raise DataFormatError(f"{path}: line {lineno}: unknown metric kind {kind!r}")
            if "/ctrl-" in run_id:
                if kind == "loss":
                    controls[strategy][j] = v
                continue
            stages[strategy] = max(stages[strategy], i)
            if kind == "loss":
                losses[strategy][j][i] = v
            else:
                errors[strategy][j][i] = v
    for strategy in losses:
        for j, cells in losses[strategy].items():
            preferred = errors[strategy].get(j) or cells
            grids[strategy][j] = preferred
    return ParsedResults(
        grids={k: dict(v) for k, v in grids.items()},
        losses={k: dict(v) for k, v in losses.items()},
        control_losses=dict(controls),
        stages=dict(stages),
    )


def render_figures(results_csv, out_dir) -> list[Path]:
    """Learning-curve, forgetting, and rigidity figures from a results CSV."""
    import math

    out_dir = Path(out_dir)
    parsed = read_results_csv(results_csv)
    written: list[Path] = []
    if not parsed.grids:
        return [_no_data_figure(out_dir / "curves.svg", "evaluation grid")]

    for strategy in sorted(parsed.grids):
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for j in sorted(parsed.grids[strategy]):
            cells = parsed.grids[strategy][j]
            xs = sorted(cells)
            line, = ax.plot(xs, [cells[i] for i in xs], marker="o", label=f"task {j}")
            line.set_gid(f"curve-task-{j}")
        ax.set_title(f"{strategy}: task metric vs training stage")
        ax.set_xlabel("training stage")
        ax.set_ylabel("validation metric")
        ax.legend(loc="best", fontsize=8)
        written.append(_save(fig, out_dir / f"curves_{_safe_name(strategy)}.svg"))

    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    strategies = sorted(parsed.grids)
    width = 0.8 / len(strategies)
    for k, strategy in enumerate(strategies):
        tasks = sorted(parsed.grids[strategy])
        final_stage = parsed.stages[strategy]
        values = [
            parsed.grids[strategy][j].get(final_stage, float("nan"))
            - parsed.grids[strategy][j][j]
            for j in tasks
        ]
        xs = [j + (k - (len(strategies) - 1) / 2.0) * width for j in tasks]
        bars = ax.bar(xs, values, width=width, label=strategy)
        for b in bars:
            b.set_gid(f"forgetting-{_safe_name(strategy)}")
    ax.set_title("forgetting per task (final - just-after-training)")
    ax.set_xlabel("task")
    ax.set_ylabel("metric increase")
    ax.legend(loc="best", fontsize=8)
    written.append(_save(fig, out_dir / "forgetting.svg"))

    if parsed.control_losses:
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for strategy in sorted(parsed.control_losses):
            tasks = sorted(parsed.control_losses[strategy])
            ys = []
            for j in tasks:
                actual = parsed.losses[strategy][j][j]
                first = parsed.control_losses[strategy][j]
                ys.append(math.log(actual / first))
            line, = ax.plot(tasks, ys, marker="s", label=strategy)
            line.set_gid(f"rigidity-{_safe_name(strategy)}")
        ax.axhline(0.0, color="gray", linewidth=0.8)
        ax.set_title("rigidity: ln(in-sequence loss / trained-first loss)")
        ax.set_xlabel("task position")
        ax.set_ylabel("log-ratio")
        ax.legend(loc="best", fontsize=8)
        written.append(_save(fig, out_dir / "rigidity.svg"))
    return written
