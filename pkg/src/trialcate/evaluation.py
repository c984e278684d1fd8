"""Simulation metrics, the replicated benchmark grid and tertile GATE checks."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import select_columns
from .dgp import DGPConfig, assign_and_outcome, generate_source, select_trial, true_cate_x1_matrix
from .transport import MODELS, EstimatorSpec, estimate_aim_a, estimate_aim_b, fit_estimator

log = logging.getLogger(__name__)

METRIC_FIELDS = (
    "scenario", "model", "aim", "trial_size", "dim_x1", "coef_x2",
    "replicate", "mse", "bias", "variance", "status",
)
AGG_KEYS = ("scenario", "model", "aim", "trial_size", "dim_x1", "coef_x2")
AGG_STATS = ("mse", "bias", "abs_bias", "bias2", "variance")


@dataclass(frozen=True)
class MetricsRecord:
    scenario: str
    model: str
    aim: str
    trial_size: int
    dim_x1: int
    coef_x2: float
    replicate: int
    mse: float
    bias: float
    variance: float
    status: str = "ok"

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def metrics(predictions, truth) -> tuple[float, float, float]:
    """Return ``(mse, bias, variance)`` with ``variance = mse - bias**2``."""
    pred = np.asarray(predictions, dtype=float)
    true = np.asarray(truth, dtype=float)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("predictions and truth must be vectors of equal length")
    if pred.size == 0:
        raise ValueError("empty input")
    if not (np.all(np.isfinite(pred)) and np.all(np.isfinite(true))):
        raise ValueError("non-finite values")
    err = pred - true
    bias = float(err.mean())
    mse = float(np.mean(err * err))
    return mse, bias, mse - bias * bias


def scenario_name(coef_x2: float) -> str:
    return f"coef_x2={coef_x2:g}"


def default_specs(forest=None, **kw) -> list[EstimatorSpec]:
    """All four models under both aims."""
    extra = {"forest": forest} if forest is not None else {}
    return [EstimatorSpec(model=m, aim=a, **extra, **kw) for a in ("A", "B") for m in MODELS]


def _seeds(seed, n: int) -> list[int]:
    return [int(s) for s in np.random.SeedSequence(seed).generate_state(n)]


def run_cell(
    dgp: DGPConfig,
    trial_size: int,
    dim_x1: int,
    specs: Sequence[EstimatorSpec],
    replicate_seed,
    replicate: int = 0,
    scenario: str | None = None,
) -> list[MetricsRecord]:
    """One replicate: fresh source and trial, every spec fitted on the same trial.

    Metrics are computed over the full source population: Aim A against the
    true CATE(x1), Aim B against the true ITE column.
    """
    s_src, s_sel, s_out, s_forest, s_mc = _seeds(replicate_seed, 5)
    cfg = replace(dgp, dim_x1=dim_x1, seed=s_src)
    scenario = scenario or scenario_name(cfg.coef_x2)
    source = generate_source(cfg)
    trial = assign_and_outcome(select_trial(source, trial_size, seed=s_sel), seed=s_out)
    src_data = trial.source
    x1_src = select_columns(src_data, ["X1"])
    truth = {"A": true_cate_x1_matrix(x1_src, cfg), "B": src_data.role_vector("true_ite")}

    fitted_cache = {}
    direct_cache = {}
    records = []
    for spec in specs:
        spec = replace(spec, forest=replace(spec.forest, seed=s_forest))
        key = replace(spec, aim="A")
        if key not in fitted_cache:
            fitted_cache[key] = fit_estimator(trial.trial, src_data, spec)
        fitted = replace(fitted_cache[key], spec=spec)
        if spec.aim == "A" and spec.uses_x2:
            pred = estimate_aim_a(fitted, x1_src, seed=s_mc)
        else:
            # X1-only forests give the same prediction under both aims
            if key not in direct_cache:
                direct_cache[key] = estimate_aim_b(fitted, src_data)
            pred = direct_cache[key]
        mse, bias, var = metrics(pred, truth[spec.aim])
        records.append(
            MetricsRecord(scenario, spec.model, spec.aim, trial_size, dim_x1, cfg.coef_x2, replicate, mse, bias, var)
        )
    return records


@dataclass(frozen=True)
class GridConfig:
    trial_sizes: tuple[int, ...] = (200, 500, 2000, 5000)
    dim_x1_values: tuple[int, ...] = (2, 3, 5, 10)
    coef_x2_values: tuple[float, ...] = (0.5, 0.0)
    replicates: int = 50
    dgp: DGPConfig = field(default_factory=DGPConfig)
    specs: tuple[EstimatorSpec, ...] = field(default_factory=lambda: tuple(default_specs()))
    master_seed: int = 2024

    def __post_init__(self) -> None:
        for name in ("trial_sizes", "dim_x1_values", "coef_x2_values", "specs"):
            value = tuple(getattr(self, name))
            if not value:
                raise ValueError(f"{name} must be nonempty")
            object.__setattr__(self, name, value)
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")

    def cells(self) -> list[tuple[int, float, int, int]]:
        """``(scenario_index, coef_x2, trial_size, dim_x1)`` for every cell."""
        return [
            (i, c, n, d)
            for (i, c), n, d in itertools.product(enumerate(self.coef_x2_values), self.trial_sizes, self.dim_x1_values)
        ]


def replicate_seed(master_seed: int, scenario_index: int, trial_size: int, dim_x1: int, replicate: int) -> int:
    """Seed for one replicate, a function of the cell coordinates only."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(scenario_index, trial_size, dim_x1, replicate))
    return int(ss.generate_state(1)[0])


def _run_task(task) -> list[MetricsRecord]:
    grid, (si, coef, n, d), rep = task
    seed = replicate_seed(grid.master_seed, si, n, d, rep)
    dgp = replace(grid.dgp, coef_x2=coef)
    scenario = scenario_name(coef)
    try:
        return run_cell(dgp, n, d, grid.specs, seed, replicate=rep, scenario=scenario)
    except Exception as exc:  # recorded, never dropped
        msg = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
        nan = float("nan")
        return [
            MetricsRecord(scenario, s.model, s.aim, n, d, coef, rep, nan, nan, nan, msg)
            for s in grid.specs
        ]


def run_grid(
    grid: GridConfig,
    parallelism: int = 1,
    progress: Callable[[str], None] | None = None,
) -> list[MetricsRecord]:
    """Run every cell x replicate; output order is independent of scheduling."""
    tasks = [(grid, cell, rep) for cell in grid.cells() for rep in range(grid.replicates)]
    results: dict[tuple, list[MetricsRecord]] = {}
    remaining = {cell: grid.replicates for cell in grid.cells()}

    def done(task, recs):
        _, cell, rep = task
        results[(cell, rep)] = recs
        remaining[cell] -= 1
        if remaining[cell] == 0 and progress is not None:
            _, coef, n, d = cell
            progress(f"cell done: {scenario_name(coef)} trial_size={n} dim_x1={d}")

    if parallelism <= 1:
        for task in tasks:
            done(task, _run_task(task))
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            for task, recs in zip(tasks, pool.map(_run_task, tasks)):
                done(task, recs)
    return [r for task in tasks for r in results[(task[1], task[2])]]


def aggregate(records: Iterable[MetricsRecord]) -> list[dict]:
    """Per-cell mean and standard error across replicates.

    Reports mean signed bias, mean absolute bias and mean squared bias
    separately. Replicates with an error status are excluded and counted.
    """
    groups: dict[tuple, list[MetricsRecord]] = {}
    for r in records:
        groups.setdefault(tuple(getattr(r, k) for k in AGG_KEYS), []).append(r)
    rows = []
    for key, recs in groups.items():
        ok = [r for r in recs if r.ok]
        values = {
            "mse": [r.mse for r in ok],
            "bias": [r.bias for r in ok],
            "abs_bias": [abs(r.bias) for r in ok],
            "bias2": [r.bias**2 for r in ok],
            "variance": [r.variance for r in ok],
        }
        row = dict(zip(AGG_KEYS, key))
        for name in AGG_STATS:
            v = np.asarray(values[name])
            row[f"{name}_mean"] = float(v.mean()) if v.size else float("nan")
            row[f"{name}_se"] = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else float("nan")
        row["n_ok"] = len(ok)
        row["n_failed"] = len(recs) - len(ok)
        rows.append(row)
    return rows


def aggregate_fields() -> list[str]:
    return list(AGG_KEYS) + [f"{s}_{t}" for s in AGG_STATS for t in ("mean", "se")] + ["n_ok", "n_failed"]


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_metrics(records: Sequence[MetricsRecord], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in METRIC_FIELDS])


def read_metrics(path: str | os.PathLike) -> list[MetricsRecord]:
    types = {f.name: f.type for f in fields(MetricsRecord)}
    casts = {"int": int, "float": float, "str": str}
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(METRIC_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing metrics column(s) {', '.join(sorted(missing))}")
        for row in reader:
            out.append(MetricsRecord(**{k: casts[types[k]](row[k]) for k in METRIC_FIELDS}))
    return out


def write_aggregate(rows: Sequence[dict], path: str | os.PathLike) -> None:
    cols = aggregate_fields()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in cols])


@dataclass(frozen=True)
class GateRecord:
    group: str
    n: int
    effect: float
    ci_low: float
    ci_high: float


def _diff_in_means(a: np.ndarray, y: np.ndarray, label: str) -> GateRecord:
    y1, y0 = y[a == 1], y[a == 0]
    if y1.size < 2 or y0.size < 2:
        raise ValueError(f"group {label} needs at least two rows in each arm")
    effect = float(y1.mean() - y0.mean())
    half = 1.96 * math.sqrt(y1.var(ddof=1) / y1.size + y0.var(ddof=1) / y0.size)
    return GateRecord(label, int(a.size), effect, effect - half, effect + half)


def gate_tertiles(cate_hat, treatment, outcome) -> list[GateRecord]:
    """Grouped effects by tertile of estimated CATE plus the overall ATE.

    Rows are ranked by ``cate_hat`` (stable, so ties keep row order) and cut
    into groups of ``ceil(n/3)``, ``ceil(n/3)`` and the rest, lowest first.
    Each effect is a difference of arm means with a Wald 95% interval.
    """
    tau = np.asarray(cate_hat, dtype=float)
    a = np.asarray(treatment, dtype=float)
    y = np.asarray(outcome, dtype=float)
    n = tau.size
    if a.shape != (n,) or y.shape != (n,):
        raise ValueError("cate_hat, treatment and outcome must have equal lengths")
    order = np.argsort(tau, kind="stable")
    size = math.ceil(n / 3)
    cuts = [order[:size], order[size : 2 * size], order[2 * size :]]
    out = [_diff_in_means(a[g], y[g], f"T{i + 1}") for i, g in enumerate(cuts)]
    out.append(_diff_in_means(a, y, "ATE"))
    return out
