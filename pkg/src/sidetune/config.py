"""Experiment configuration: one JSON document, schema-validated, strict.

Unknown keys fail validation before any compute. Defaults are applied
after validation and encode the standard choices: learnable alpha
starting at 0.5, Adam, and the {1, 1e5} EWC strength grid (expanded when
an ewc entry omits "lam" in a comparison).
"""

from __future__ import annotations

import copy
import hashlib
import json

import jsonschema

from .errors import ConfigError

CONFIG_VERSION = 1

_LAYER_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["linear", "conv2d", "relu", "tanh", "avgpool2d", "flatten"]},
        "in": {"type": "integer", "minimum": 1},
        "out": {"type": "integer", "minimum": 1},
        "kernel": {"type": "integer", "minimum": 1},
        "stride": {"type": "integer", "minimum": 1},
        "pad": {"type": "integer", "minimum": 0},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_ARCH_SCHEMA = {"type": "array", "items": _LAYER_SCHEMA, "minItems": 1}

_SCHEDULE_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["constant", "stage_switch", "hyperbolic"]},
        "c": {"type": "number", "minimum": 0.0, "maximum": 1.0},
        "switch_step": {"type": "integer", "minimum": 0},
        "k": {"type": "number", "exclusiveMinimum": 0.0},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_MERGE_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["alpha_blend", "product", "mlp_adapter", "film"]},
        "alpha_mode": {"enum": ["learnable", "scheduled"]},
        "schedule": _SCHEDULE_SCHEMA,
    },
    "additionalProperties": False,
}

_INIT_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["xavier", "copy_base", "low_energy", "distill"]},
        "distill_steps": {"type": "integer", "minimum": 1},
        "distill_lr": {"type": "number", "exclusiveMinimum": 0.0},
        "distill_batch": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}

_STRATEGY_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {
            "enum": [
                "sidetune",
                "finetune",
                "features",
                "scratch",
                "ewc",
                "psp",
                "pnn_lite",
                "independent",
            ]
        },
        "name": {"type": "string", "minLength": 1},
        "seed_offset": {"type": "integer", "minimum": 0},
        "side_arch": _ARCH_SCHEMA,
        "net_arch": _ARCH_SCHEMA,
        "merge": _MERGE_SCHEMA,
        "init": _INIT_SCHEMA,
        "lam": {"type": "number", "exclusiveMinimum": 0.0},
        "ewc_gamma": {"type": "number", "minimum": 0.0, "maximum": 1.0},
        "fisher_samples": {"type": "integer", "minimum": 1},
        "steps_per_task": {"type": "integer", "minimum": 1},
    },
    "required": ["kind"],
    "additionalProperties": False,
}

_SEQUENCE_SCHEMA = {
    "type": "object",
    "properties": {
        "family": {"enum": ["permuted", "split_class", "rotated_regression", "file_backed"]},
        "tasks": {"type": "integer", "minimum": 1},
        "input_dim": {"type": "integer", "minimum": 1},
        "num_classes": {"type": "integer", "minimum": 2},
        "examples_per_class": {"type": "integer", "minimum": 2},
        "classes_per_task": {"type": "integer", "minimum": 1},
        "out_dim": {"type": "integer", "minimum": 1},
        "noise": {"type": "number", "minimum": 0.0},
        "max_angle": {"type": "number", "minimum": 0.0},
        "train_size": {"type": "integer", "minimum": 1},
        "val_size": {"type": "integer", "minimum": 1},
        "val_fraction": {"type": "number", "exclusiveMinimum": 0.0, "exclusiveMaximum": 1.0},
        "source_images": {"type": "string"},
        "source_labels": {"type": "string"},
        "source_cifar": {"type": "string"},
        "cifar_variant": {"enum": ["cifar10", "cifar100"]},
    },
    "required": ["family"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "properties": {
        "version": {"const": CONFIG_VERSION},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "output_dir": {"type": "string", "minLength": 1},
        "sequence": _SEQUENCE_SCHEMA,
        "base": {
            "type": "object",
            "properties": {
                "arch": _ARCH_SCHEMA,
                "pretrain": {"enum": ["first_task", "none"]},
                "pretrain_steps": {"type": "integer", "minimum": 1},
            },
            "required": ["arch"],
            "additionalProperties": False,
        },
        "training": {
            "type": "object",
            "properties": {
                "steps_per_task": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "optimizer": {"enum": ["adam", "sgd"]},
                "lr": {"type": "number", "exclusiveMinimum": 0.0},
                "regression_loss": {"enum": ["mse", "l1"]},
            },
            "additionalProperties": False,
        },
        "strategies": {"type": "array", "items": _STRATEGY_SCHEMA, "minItems": 1},
        "rigidity_controls": {"type": "boolean"},
        "boost": {
            "type": "object",
            "properties": {
                "task_index": {"type": "integer", "minimum": 1},
                "num_members": {"type": "integer", "minimum": 1},
                "steps_per_member": {"type": "integer", "minimum": 1},
                "member_arch": _ARCH_SCHEMA,
                "deep_arch": _ARCH_SCHEMA,
                "lr": {"type": "number", "exclusiveMinimum": 0.0},
            },
            "required": ["num_members", "steps_per_member", "member_arch"],
            "additionalProperties": False,
        },
    },
    "required": ["version", "seed", "sequence", "base", "strategies"],
    "additionalProperties": False,
}

_TRAINING_DEFAULTS = {
    "steps_per_task": 200,
    "batch_size": 32,
    "optimizer": "adam",
    "lr": 1e-2,
    "regression_loss": "mse",
}

_MERGE_DEFAULTS = {"kind": "alpha_blend", "alpha_mode": "learnable"}

EWC_LAMBDA_GRID = (1.0, 1e5)


def validate_config(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for err in errors:
            where = "/".join(str(p) for p in err.absolute_path) or "<root>"
            lines.append(f"  at {where}: {err.message}")
        raise ConfigError("configuration failed schema validation:\n" + "\n".join(lines))


def resolve_config(raw: dict, expand_ewc_grid: bool = False) -> dict:
    """Validate and fill defaults; returns a canonical copy of the config."""
    validate_config(raw)
    cfg = copy.deepcopy(raw)
    training = dict(_TRAINING_DEFAULTS)
    training.update(cfg.get("training", {}))
    cfg["training"] = training
    base = cfg["base"]
    base.setdefault("pretrain", "first_task")
    base.setdefault("pretrain_steps", 200)
    cfg.setdefault("rigidity_controls", False)
    strategies = []
    for entry in cfg["strategies"]:
        entry = dict(entry)
        entry.setdefault("seed_offset", 0)
        if entry["kind"] in ("sidetune", "pnn_lite"):
            merge = dict(_MERGE_DEFAULTS)
            merge.update(entry.get("merge", {}))
            if merge["alpha_mode"] == "scheduled" and "schedule" not in merge:
                raise ConfigError(f"strategy {entry['kind']}: scheduled alpha needs a schedule")
            entry["merge"] = merge
            entry.setdefault("init", {"kind": "xavier"})
        if entry["kind"] == "ewc":
            entry.setdefault("ewc_gamma", 1.0)
            entry.setdefault("fisher_samples", 512)
            if "lam" not in entry:
                if expand_ewc_grid:
                    for lam in EWC_LAMBDA_GRID:
                        grid_entry = dict(entry)
                        grid_entry["lam"] = lam
                        grid_entry.setdefault("name", f"ewc(lam={lam:g})")
                        strategies.append(grid_entry)
                    continue
                entry["lam"] = 1.0
        entry.setdefault("name", _default_name(entry))
        strategies.append(entry)
    names = [e["name"] for e in strategies]
    if len(set(names)) != len(names):
        raise ConfigError(f"strategy names are not unique: {names}")
    cfg["strategies"] = strategies
    _check_sequence(cfg["sequence"])
    return cfg


def _default_name(entry: dict) -> str:
    kind = entry["kind"]
    if kind == "ewc" and "lam" in entry:
        return f"ewc(lam={entry['lam']:g})"
    if kind in ("sidetune", "pnn_lite"):
        merge_kind = entry.get("merge", _MERGE_DEFAULTS).get("kind", "alpha_blend")
        if merge_kind != "alpha_blend":
            return f"{kind}/{merge_kind}"
    return kind


def _check_sequence(seq: dict) -> None:
    family = seq["family"]
    if family in ("permuted", "rotated_regression") and "tasks" not in seq:
        raise ConfigError(f"{family} sequence needs a task count ('tasks')")
    if family == "split_class" and "classes_per_task" not in seq:
        raise ConfigError("split_class sequence needs 'classes_per_task'")
    if family == "file_backed":
        has_idx = "source_images" in seq
        has_cifar = "source_cifar" in seq
        if has_idx == has_cifar:
            raise ConfigError(
                "file_backed sequence needs exactly one of source_images / source_cifar"
            )


def require_shared_budgets(cfg: dict) -> None:
    """Comparisons demand one budget for every method."""
    steps = {e.get("steps_per_task") for e in cfg["strategies"]}
    steps.discard(None)
    if steps:
        raise ConfigError(
            "compare requires a shared training budget; per-strategy "
            f"steps_per_task overrides are not allowed (found {sorted(steps)})"
        )


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_id_for(resolved: dict, seed: int) -> str:
    """Deterministic run identifier; independent of the output directory."""
    core = {k: v for k, v in resolved.items() if k != "output_dir"}
    core["seed"] = seed
    return hashlib.sha256(canonical_json(core).encode("utf-8")).hexdigest()[:12]


def load_config(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return raw
