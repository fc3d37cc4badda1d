"""Experiment orchestration: resolved config in, artifacts on disk out.

Every random draw descends from the config seed through named streams:
"sequence" for data, "base-pretrain" for the shared base, and per-method
"run" streams (offset by the strategy's seed_offset). The run id is a
hash of the resolved config plus seed, so rerunning an emitted manifest
reproduces identical CSV bytes.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .config import require_shared_budgets, resolve_config, run_id_for
from .errors import ConfigError
from .harness import ComparisonReport, boost_comparison, compare_strategies
from .merge import AlphaCurriculum
from .nets import InitScheme, Network, NetworkSpec, build_network, LayerSpec
from .report import (
    BOOST_COLUMNS,
    COMPARE_COLUMNS,
    METRICS_COLUMNS,
    RESULTS_COLUMNS,
    compare_rows,
    metrics_rows,
    render_figures,
    results_rows,
    write_csv,
    write_manifest,
)
from .rng import MAX_SEED, Rng
from .strategies import TrainerConfig, build_strategy, save_strategy
from .tasks import (
    SequenceSpec,
    export_sequence_idx,
    gen_blobs_source,
    gen_permuted_tasks,
    gen_rotated_regression,
    gen_split_class_tasks,
    load_cifar_bin,
    load_idx,
)


def arch_to_spec(arch: list[dict], input_shape: tuple[int, ...], role: str) -> NetworkSpec:
    layers = []
    for entry in arch:
        kind = entry["kind"]
        if kind == "linear":
            layers.append(LayerSpec("linear", in_features=entry["in"], out_features=entry["out"]))
        elif kind == "conv2d":
            layers.append(
                LayerSpec(
                    "conv2d",
                    in_channels=entry["in"],
                    out_channels=entry["out"],
                    kernel=entry["kernel"],
                    stride=entry.get("stride", 1),
                    pad=entry.get("pad", 0),
                )
            )
        elif kind == "avgpool2d":
            layers.append(
                LayerSpec("avgpool2d", kernel=entry["kernel"],
                          stride=entry.get("stride", entry["kernel"]))
            )
        else:
            layers.append(LayerSpec(kind))
    return NetworkSpec(layers=tuple(layers), input_shape=input_shape, role=role)


def build_sequence(cfg: dict, seed: int) -> SequenceSpec:
    seq = cfg["sequence"]
    family = seq["family"]
    rng = Rng(seed).child("sequence")
    val_fraction = seq.get("val_fraction", 0.25)
    if family == "rotated_regression":
        return gen_rotated_regression(
            seq["tasks"],
            seq.get("input_dim", 16),
            seq.get("out_dim", 16),
            rng,
            n_train=seq.get("train_size", 256),
            n_val=seq.get("val_size", 128),
            noise=seq.get("noise", 0.0),
            max_angle=seq.get("max_angle", 1.0471975511965976),
        )
    if family == "file_backed":
        if "source_images" in seq:
            source = load_idx(seq["source_images"], seq.get("source_labels"))
        else:
            source = load_cifar_bin(seq["source_cifar"], seq.get("cifar_variant"))
        if "classes_per_task" in seq:
            return gen_split_class_tasks(source, seq["classes_per_task"], rng, val_fraction)
        return gen_permuted_tasks(source, seq.get("tasks", 1), rng, val_fraction)
    source = gen_blobs_source(
        seq.get("num_classes", 10),
        seq.get("input_dim", 16),
        seq.get("examples_per_class", 40),
        rng.child("source"),
    )
    if family == "permuted":
        return gen_permuted_tasks(source, seq["tasks"], rng.child("family"), val_fraction)
    return gen_split_class_tasks(source, seq["classes_per_task"], rng.child("family"),
                                 val_fraction)


def trainer_config(cfg: dict) -> TrainerConfig:
    t = cfg["training"]
    return TrainerConfig(
        optimizer=t["optimizer"],
        lr=t["lr"],
        batch_size=t["batch_size"],
        regression_loss=t["regression_loss"],
    )


def build_base(cfg: dict, sequence: SequenceSpec, seed: int) -> Network:
    """Build (and optionally pretrain on the first task) the shared base."""
    input_shape = sequence.tasks[0].input_shape
    spec = arch_to_spec(cfg["base"]["arch"], input_shape, "base")
    rng = Rng(seed).child("base-pretrain")
    net = build_network(spec, rng.child("init"))
    if cfg["base"]["pretrain"] == "first_task":
        proto = build_strategy("finetune", base=net, cfg=trainer_config(cfg))
        proto.train_task(sequence.tasks[0], cfg["base"]["pretrain_steps"], rng.child("train"))
    return net


def _schedule_from(entry: dict) -> AlphaCurriculum:
    kind = entry["kind"]
    if kind == "constant":
        return AlphaCurriculum("constant", c=entry.get("c", 1.0))
    if kind == "stage_switch":
        return AlphaCurriculum("stage_switch", switch_step=entry.get("switch_step", 0))
    return AlphaCurriculum("hyperbolic", k=entry.get("k", 1.0))


def strategy_factory(entry: dict, cfg: dict, base_proto: Network | None,
                     sequence: SequenceSpec):
    """A zero-argument builder producing a fresh strategy per call."""
    kind = entry["kind"]
    tcfg = trainer_config(cfg)
    input_shape = sequence.tasks[0].input_shape

    kwargs: dict = {"cfg": tcfg}
    if kind in ("sidetune", "pnn_lite"):
        merge = entry["merge"]
        kwargs["merge_kind"] = merge["kind"]
        kwargs["alpha_mode"] = merge.get("alpha_mode", "learnable")
        if kwargs["alpha_mode"] == "scheduled":
            kwargs["alpha_schedule"] = _schedule_from(merge["schedule"])
        side_arch = entry.get("side_arch", cfg["base"]["arch"])
        kwargs["side_spec"] = arch_to_spec(side_arch, input_shape, "side")
        init = entry.get("init", {"kind": "xavier"})
        kwargs["init_scheme"] = InitScheme(
            kind=init.get("kind", "xavier"),
            distill_steps=init.get("distill_steps", 2000),
            distill_lr=init.get("distill_lr", 1e-2),
            distill_batch=init.get("distill_batch", 64),
        )
    if kind in ("scratch", "independent"):
        net_arch = entry.get("net_arch", cfg["base"]["arch"])
        kwargs["net_spec"] = arch_to_spec(net_arch, input_shape, "base")
    if kind == "ewc":
        kwargs["lam"] = entry["lam"]
        kwargs["ewc_gamma"] = entry["ewc_gamma"]
        kwargs["fisher_samples"] = entry["fisher_samples"]

    def factory():
        base = base_proto.copy() if kind not in ("scratch", "independent") else None
        return build_strategy(kind, base=base, **kwargs)

    return factory


@dataclass
class ExperimentArtifacts:
    run_id: str
    out_dir: Path
    report: ComparisonReport
    results_csv: Path | None = None
    metrics_csv: Path | None = None
    compare_csv: Path | None = None
    boost_csv: Path | None = None
    manifest_path: Path | None = None
    figures: list[Path] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def run_experiment(
    raw_config: dict,
    seed: int | None = None,
    out_dir: str | Path | None = None,
    jobs: int = 1,
    mode: str = "run",
    write_figures: bool = True,
) -> ExperimentArtifacts:
    """Execute a run/compare experiment and write every artifact.

    A manifest is always written; if the run dies mid-way the manifest is
    flagged status="partial" with the error before the exception continues.
    """
    if mode not in ("run", "compare"):
        raise ConfigError(f"unknown experiment mode {mode!r}")
    resolved = resolve_config(raw_config, expand_ewc_grid=(mode == "compare"))
    if mode == "compare":
        require_shared_budgets(resolved)
    seed = resolved["seed"] if seed is None else int(seed)
    run_id = run_id_for(resolved, seed)
    out_dir = Path(out_dir or resolved.get("output_dir") or Path("runs") / run_id)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = ExperimentArtifacts(run_id=run_id, out_dir=out_dir, report=None)
    started = time.monotonic()
    manifest: dict = {
        "run_id": run_id,
        "seed": seed,
        "code_version": __version__,
        "mode": mode,
        "resolved_config": resolved,
        "status": "partial",
    }
    try:
        _execute(resolved, seed, out_dir, jobs, mode, artifacts, manifest, write_figures)
        manifest["status"] = "complete"
    except Exception as err:
        manifest["error"] = f"{type(err).__name__}: {err}"
        manifest["timings"] = {"total_seconds": time.monotonic() - started}
        artifacts.manifest_path = write_manifest(out_dir / "manifest.json", manifest)
        raise
    manifest["timings"] = {"total_seconds": time.monotonic() - started}
    artifacts.manifest_path = write_manifest(out_dir / "manifest.json", manifest)
    return artifacts


def _execute(resolved, seed, out_dir, jobs, mode, artifacts, manifest, write_figures):
    sequence = build_sequence(resolved, seed)
    base_proto = (
        build_base(resolved, sequence, seed)
        if any(e["kind"] not in ("scratch", "independent") for e in resolved["strategies"])
        else None
    )
    factories = {}
    seeds_by_name = {}
    steps_by_name = {}
    default_steps = resolved["training"]["steps_per_task"]
    for entry in resolved["strategies"]:
        name = entry["name"]
        factories[name] = strategy_factory(entry, resolved, base_proto, sequence)
        seeds_by_name[name] = (seed + entry["seed_offset"]) % (MAX_SEED + 1)
        steps_by_name[name] = entry.get("steps_per_task", default_steps)

    with_controls = bool(resolved["rigidity_controls"]) or mode == "compare"
    report = compare_strategies(
        factories,
        sequence,
        steps_by_name,
        rng_for=lambda name: Rng(seeds_by_name[name]).child("run"),
        with_controls=with_controls,
        jobs=jobs,
    )
    artifacts.report = report

    all_rows, metric_rows = [], []
    for method in report.methods:
        rows = results_rows(
            run_id=artifacts.run_id,
            label=method.name,
            seed=seeds_by_name[method.name],
            steps=steps_by_name[method.name],
            result=method.result,
            sequence=sequence,
        )
        all_rows.extend(rows)
        metric_rows.extend(
            metrics_rows(
                artifacts.run_id,
                method.name,
                seeds_by_name[method.name],
                method.result,
                sequence,
                method.forgetting,
            )
        )
    all_rows.sort(key=lambda r: (r[1], r[0], r[2], r[3], r[4]))
    artifacts.results_csv = write_csv(out_dir / "results.csv", RESULTS_COLUMNS, all_rows)
    artifacts.metrics_csv = write_csv(out_dir / "metrics.csv", METRICS_COLUMNS, metric_rows)
    if mode == "compare":
        artifacts.compare_csv = write_csv(
            out_dir / "compare.csv",
            COMPARE_COLUMNS,
            compare_rows(artifacts.run_id, seed, report.methods),
        )

    checkpoint_dir = out_dir / "checkpoints"
    checkpoint_dir.mkdir(exist_ok=True)
    from .report import _safe_name

    for method in report.methods:
        path = checkpoint_dir / f"{_safe_name(method.name)}.stnt"
        save_strategy(method.result.strategy, path)
        artifacts.checkpoints.append(path)

    if resolved.get("boost"):
        artifacts.boost_csv = _run_boost(resolved, seed, sequence, base_proto, out_dir,
                                         artifacts.run_id)

    manifest["sequence"] = {
        "family": sequence.family,
        "tasks": sequence.m,
        "input_shape": list(sequence.tasks[0].input_shape),
    }
    manifest["methods"] = {
        m.name: {
            "avg_rank": m.avg_rank,
            "forgetting": m.forgetting,
            "rigidity": m.rigidity,
            "final_alphas": m.result.final_alphas,
            "trainable_params": m.trainable_params,
            "total_params": m.total_params,
            "seed": seeds_by_name[m.name],
            "step_budget": steps_by_name[m.name],
            "lam": next(
                (e["lam"] for e in resolved["strategies"]
                 if e["name"] == m.name and "lam" in e),
                None,
            ),
        }
        for m in report.methods
    }
    manifest["artifacts"] = {
        "results_csv": str(artifacts.results_csv),
        "metrics_csv": str(artifacts.metrics_csv),
        "compare_csv": str(artifacts.compare_csv) if artifacts.compare_csv else None,
        "boost_csv": str(artifacts.boost_csv) if artifacts.boost_csv else None,
        "checkpoints": [str(p) for p in artifacts.checkpoints],
    }
    if write_figures:
        artifacts.figures = render_figures(artifacts.results_csv, out_dir / "figures")
        manifest["artifacts"]["figures"] = [str(p) for p in artifacts.figures]


def _run_boost(resolved, seed, sequence, base_proto, out_dir, run_id):
    boost = resolved["boost"]
    task = sequence.tasks[boost.get("task_index", 1) - 1]
    input_shape = task.input_shape
    member_spec = arch_to_spec(boost["member_arch"], input_shape, "side")
    deep_spec = arch_to_spec(boost.get("deep_arch", boost["member_arch"]), input_shape, "side")
    tcfg = trainer_config(resolved)
    if "lr" in boost:
        tcfg = TrainerConfig(
            optimizer=tcfg.optimizer,
            lr=boost["lr"],
            batch_size=tcfg.batch_size,
            regression_loss=tcfg.regression_loss,
        )
    comparison = boost_comparison(
        base_factory=base_proto.copy,
        member_spec=member_spec,
        deep_spec=deep_spec,
        task=task,
        num_members=boost["num_members"],
        steps_each=boost["steps_per_member"],
        cfg=tcfg,
        rng=Rng(seed).child("boost"),
    )
    rows = [
        (run_id, "stack", j + 1, loss, comparison.stack_params, seed)
        for j, loss in enumerate(comparison.member_losses)
    ]
    rows.append((run_id, "deep", None, comparison.deep_loss, comparison.deep_params, seed))
    return write_csv(out_dir / "boost.csv", BOOST_COLUMNS, rows)


def run_gen_data(raw_config: dict, seed: int | None, out_dir) -> list[Path]:
    """Materialize the configured sequence as IDX files plus an index JSON."""
    resolved = resolve_config(raw_config)
    seed = resolved["seed"] if seed is None else int(seed)
    sequence = build_sequence(resolved, seed)
    out_dir = Path(out_dir or resolved.get("output_dir") or "data")
    files = export_sequence_idx(sequence, out_dir)
    index = {
        "family": sequence.family,
        "tasks": sequence.m,
        "seed": seed,
        "files": [str(p) for p in files],
    }
    write_manifest(out_dir / "sequence.json", index)
    return files
