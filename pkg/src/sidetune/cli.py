"""Command-line front end.

Subcommands:
  run        execute the configured experiment, write CSV/manifest/figures
  compare    run every configured strategy and emit the average-rank table
  plot       re-render figures from an existing results CSV
  gen-data   export the configured synthetic sequence as IDX files
  grad-check run the full gradient verification suite

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import sys

from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    DimensionError,
    InitSchemeError,
    LabError,
    NetworkSpecError,
    NumericError,
    TaskSetupError,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

_EXIT_BY_ERROR = (
    (NumericError, EXIT_NUMERIC),
    (DimensionError, EXIT_NUMERIC),
    (DataFormatError, EXIT_DATA),
    (ConfigError, EXIT_CONFIG),
    (NetworkSpecError, EXIT_CONFIG),
    (InitSchemeError, EXIT_CONFIG),
    (TaskSetupError, EXIT_CONFIG),
    (ContractError, EXIT_CONFIG),
)


def _exit_code_for(err: LabError) -> int:
    for cls, code in _EXIT_BY_ERROR:
        if isinstance(err, cls):
            return code
    return EXIT_CONFIG


def _add_common(parser: argparse.ArgumentParser, config_required: bool = True) -> None:
    parser.add_argument("--config", required=config_required, help="experiment config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sidetune-lab",
        description="Desk-scale continual-learning experiments with additive side networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the configured experiment")
    _add_common(run_p)

    cmp_p = sub.add_parser("compare", help="run all strategies and rank them")
    _add_common(cmp_p)

    plot_p = sub.add_parser("plot", help="render figures from a results CSV")
    plot_p.add_argument("results_csv", help="path to a results.csv")
    plot_p.add_argument("--out", required=True, help="directory for the figures")

    gen_p = sub.add_parser("gen-data", help="export the configured sequence to IDX files")
    _add_common(gen_p)

    gc_p = sub.add_parser("grad-check", help="run the gradient verification suite")
    gc_p.add_argument("--seed", type=int, default=0, help="first seed of the sweep")
    gc_p.add_argument("--seeds", type=int, default=20, help="number of seeds (>= 20 advised)")
    gc_p.add_argument("--jobs", type=int, default=1, help="accepted for symmetry; unused")
    return parser


def _cmd_run(args, mode: str) -> int:
    from .config import load_config
    from .runner import run_experiment

    raw = load_config(args.config)
    artifacts = run_experiment(
        raw, seed=args.seed, out_dir=args.out, jobs=args.jobs, mode=mode
    )
    print(f"run {artifacts.run_id} complete -> {artifacts.out_dir}")
    for method in artifacts.report.methods:
        rank = f" avg_rank={method.avg_rank:.2f}" if mode == "compare" else ""
        print(
            f"  {method.name}: forgetting={[round(f, 4) for f in method.forgetting]}"
            f"{rank} trainable_params={method.trainable_params}"
        )
    return EXIT_OK


def _cmd_plot(args) -> int:
    from .report import render_figures

    written = render_figures(args.results_csv, args.out)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    from .config import load_config
    from .runner import run_gen_data

    raw = load_config(args.config)
    files = run_gen_data(raw, args.seed, args.out)
    print(f"wrote {len(files)} IDX files")
    return EXIT_OK


def _cmd_grad_check(args) -> int:
    from .gradcheck import run_gradcheck_suite

    ok, lines, _ = run_gradcheck_suite(seeds=args.seeds, base_seed=args.seed)
    for line in lines:
        print(line)
    if not ok:
        print("gradient suite FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args, "run")
        if args.command == "compare":
            return _cmd_run(args, "compare")
        if args.command == "plot":
            return _cmd_plot(args)
        if args.command == "gen-data":
            return _cmd_gen_data(args)
        return _cmd_grad_check(args)
    except LabError as err:
        print(f"error: {err}", file=sys.stderr)
        return _exit_code_for(err)


if __name__ == "__main__":
    sys.exit(main())
