"""Command-line entry point: ``trialcate {simulate,replicate,apply,plot}``.

Exit codes are 0 on success, 1 for usage or configuration errors and 2 for
runtime or data errors. Outputs are staged in a temporary directory and
moved into place only after every file has been written, so a failed run
leaves the output directory untouched.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import os
import shutil
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import OUT_ENV, ConfigError, RunConfig, load_config
from .data import SchemaConfig, load_dataset, select_columns, write_dataset
from .dgp import simulate
from .evaluation import (
    GridConfig,
    aggregate,
    gate_tertiles,
    read_metrics,
    run_grid,
    write_aggregate,
    write_metrics,
)
from .forest import predict_crossfit
from .selection import fit_logistic, ipw_weights, participation_prob
from .svgplot import plot_metrics
from .transport import estimate, fit_estimator, participation_labels

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@contextlib.contextmanager
def staged_output(out_dir: Path):
    """Yield a scratch directory whose files are moved into ``out_dir`` on success."""
    out_dir = Path(out_dir)
    parent = out_dir.resolve().parent
    parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".trialcate-", dir=parent))
    try:
        yield stage
        out_dir.mkdir(parents=True, exist_ok=True)
        for path in sorted(stage.iterdir()):
            os.replace(path, out_dir / path.name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _out_dir(args, cfg: RunConfig) -> Path:
    if args.out is not None:
        return Path(args.out)
    if os.environ.get(OUT_ENV):
        return Path(os.environ[OUT_ENV])
    return cfg.out if cfg.out is not None else Path(".")


def _seed(args, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


def cmd_simulate(args, cfg: RunConfig) -> None:
    source, trial = simulate(cfg.dgp, cfg.simulate.trial_size, _seed(args, cfg))
    with staged_output(_out_dir(args, cfg)) as stage:
        write_dataset(trial.source, stage / "source.csv")
        write_dataset(trial.trial, stage / "trial.csv")
    print(f"source rows: {source.n_rows}")
    print(f"trial size: {trial.trial.n_rows} (target {cfg.simulate.trial_size})")
    print(f"mu: {float(trial.mu)!r}")


def cmd_replicate(args, cfg: RunConfig) -> None:
    parallelism = args.parallelism or cfg.parallelism
    grid = GridConfig(
        trial_sizes=cfg.grid.trial_sizes,
        dim_x1_values=cfg.grid.dim_x1_values,
        coef_x2_values=cfg.grid.coef_x2_values,
        replicates=cfg.grid.replicates,
        dgp=cfg.dgp,
        specs=tuple(cfg.specs()),
        master_seed=_seed(args, cfg),
    )
    records = run_grid(grid, parallelism=parallelism, progress=lambda m: print(m, flush=True))
    failed = sum(not r.ok for r in records)
    with staged_output(_out_dir(args, cfg)) as stage:
        write_metrics(records, stage / "metrics.csv")
        write_aggregate(aggregate(records), stage / "aggregate.csv")
    print(f"{len(records)} metric rows, {failed} failed")


def _file_schema(schema: SchemaConfig, *roles: str) -> SchemaConfig:
    """Restrict ``schema`` to the covariate blocks plus the given single roles."""
    keep = {r: getattr(schema, r) for r in roles}
    return SchemaConfig(
        X1=schema.X1, X2=schema.X2, O=schema.O, delimiter=schema.delimiter, header=schema.header, **keep
    )


def cmd_apply(args, cfg: RunConfig) -> None:
    ac = cfg.apply
    trial_path = Path(args.trial) if args.trial else ac.trial
    source_path = Path(args.source) if args.source else ac.source
    if trial_path is None or source_path is None:
        raise UsageError("apply needs trial and source CSVs (apply.trial/apply.source or --trial/--source)")
    schema = ac.schema or cfg.default_schema()
    if not schema.X1 or not schema.X2 or not schema.treatment or not schema.outcome:
        raise ConfigError("apply.schema must name X1, X2, treatment and outcome")
    if ac.trial_in_source and not schema.selection:
        raise ConfigError("apply.schema.selection is required when trial_in_source is true")
    trial = load_dataset(trial_path, _file_schema(schema, "treatment", "outcome"))
    source = load_dataset(source_path, _file_schema(schema, "selection") if ac.trial_in_source else _file_schema(schema))

    seed = _seed(args, cfg)
    forest = replace(cfg.forest, seed=seed)
    cfg = replace(cfg, forest=forest)
    specs = cfg.specs(default_sampler="knn", default_models=("M1_IPW", "M2_IPW"))

    pred_rows = []
    fitted_cache = {}
    for spec in specs:
        key = replace(spec, aim="A")
        if key not in fitted_cache:
            fitted_cache[key] = fit_estimator(trial, source, spec, trial_in_source=ac.trial_in_source)
        fitted = replace(fitted_cache[key], spec=spec)
        cate = estimate(fitted, source, seed=seed)
        pred_rows.extend((i, spec.model, spec.aim, v) for i, v in enumerate(cate))

    xs, labels = participation_labels(trial, source, ("X2",), ac.trial_in_source)
    sel = fit_logistic(xs, labels, feature_names=schema.X2)
    x2_trial = select_columns(trial, ["X2"])
    prob = participation_prob(sel, x2_trial)
    wts = ipw_weights(sel, x2_trial, cfg.weights)

    gate_rows = []
    a, y = trial.role_vector("treatment"), trial.role_vector("outcome")
    for model in dict.fromkeys(s.model for s in specs):
        spec = next(s for s in specs if s.model == model)
        w = wts if spec.uses_ipw else None
        cate = predict_crossfit(select_columns(trial, spec.feature_roles), a, y, w, forest, ac.crossfit_folds)
        gate_rows.extend((model, g.group, g.n, g.effect, g.ci_low, g.ci_high) for g in gate_tertiles(cate, a, y))

    with staged_output(_out_dir(args, cfg)) as stage:
        _write_rows(stage / "predictions.csv", ("row_id", "model", "aim", "cate_hat"), pred_rows)
        _write_rows(stage / "weights.csv", ("row_id", "probability", "weight"), zip(range(len(wts)), prob, wts))
        _write_rows(stage / "gate.csv", ("model", "group", "n", "effect", "ci_low", "ci_high"), gate_rows)
    if sel.separation:
        print("warning: participation model separated; ridge fallback used", file=sys.stderr)
    print(f"{len(pred_rows)} predictions for {len(specs)} estimators on {source.n_rows} source rows")


def cmd_plot(args, cfg: RunConfig) -> None:
    if not args.metrics:
        raise UsageError("plot needs --metrics PATH")
    path = Path(args.metrics)
    if not path.is_file():
        raise FileNotFoundError(f"metrics file not found: {path}")
    records = read_metrics(path)
    if not records:
        raise ValueError(f"{path}: no metrics rows")
    with staged_output(_out_dir(args, cfg)) as stage:
        written = plot_metrics(records, stage)
    print(f"wrote {len(written)} SVG files")


COMMANDS = {"simulate": cmd_simulate, "replicate": cmd_replicate, "apply": cmd_apply, "plot": cmd_plot}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trialcate", description="Transportable CATE estimation from trial data.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--out", help=f"output directory (overrides config and ${OUT_ENV})")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--parallelism", type=int, help="worker processes for replicate")
        if name == "apply":
            p.add_argument("--trial", help="trial CSV (overrides apply.trial)")
            p.add_argument("--source", help="source population CSV (overrides apply.source)")
        if name == "plot":
            p.add_argument("--metrics", help="metrics.csv written by replicate")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.parallelism is not None and args.parallelism < 1:
            raise UsageError("--parallelism must be >= 1")
        if args.seed is not None and args.seed < 0:
            raise UsageError("--seed must be >= 0")
        cfg = load_config(args.config)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
