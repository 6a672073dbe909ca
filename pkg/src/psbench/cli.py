"""Command-line entry points: generate a cohort, run an experiment, emit plot data."""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .cohort import GeneratorConfig, generate_cohort, save_cohort
from .errors import PsbenchError
from .experiment import ExperimentConfig, emit_plot_data, run_experiment


def _load_config(path) -> ExperimentConfig:
    return ExperimentConfig.from_json_file(path)


def _apply_overrides(config: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["generator"] = dataclasses.replace(config.generator, seed=args.seed)
    if args.out is not None:
        updates["output_dir"] = args.out
    return dataclasses.replace(config, **updates) if updates else config


def cmd_generate(args) -> int:
    config = _apply_overrides(_load_config(args.config), args)
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    cohort = generate_cohort(config.generator)
    save_cohort(cohort, os.path.join(out, "subjects.csv"), os.path.join(out, "covariates.csv"))
    with open(os.path.join(out, "cohort_meta.json"), "w") as fh:
        json.dump(
            {
                "n_subjects": cohort.n_subjects,
                "n_treated": int((cohort.treatment == 1).sum()),
                "n_covariates": cohort.n_covariates,
                "t_max": cohort.t_max,
                "seed": config.generator.seed,
            },
            fh,
            indent=2,
        )
    print(f"wrote cohort ({cohort.n_subjects} subjects, {cohort.n_covariates} covariates) to {out}")
    return 0


def cmd_run(args) -> int:
    config = _apply_overrides(_load_config(args.config), args)
    out = run_experiment(config, threads=args.threads)
    print(f"report bundle written to {out}")
    return 0


def cmd_plots(args) -> int:
    if args.out is not None:
        report_dir = args.out
    elif args.config is not None:
        report_dir = _load_config(args.config).output_dir
    else:
        print("error: plots needs --out or --config", file=sys.stderr)
        return 2
    plots = emit_plot_data(report_dir)
    print(f"plot data written to {plots}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="psbench",
        description="Propensity-score model experimentation engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_config in (
        ("generate", cmd_generate, True),
        ("run", cmd_run, True),
        ("plots", cmd_plots, False),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs_config, help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--threads", type=int, default=1, help="parallel cell workers")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (PsbenchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
