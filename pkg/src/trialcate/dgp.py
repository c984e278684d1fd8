"""Synthetic source population, trial selection and outcome generation.

Covariate blocks X1ALL (effect modifiers), X2 (participation determinants)
and O (unobserved modifiers) are i.i.d. standard normal. The individual
treatment effect is a coefficient-weighted sum of the block totals, and trial
participation depends on X2 only through ``mu * expit(a * sum(x2) + b * sum(x2**2))``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .data import Dataset

TRUE_ITE = "true_ite"
SELECTION = "s"
TREATMENT = "a"
OUTCOME = "y"


def x1_names(dim: int) -> list[str]:
    return [f"x1_{j + 1:02d}" for j in range(dim)]


def x2_names(dim: int) -> list[str]:
    return [f"x2_{j + 1:02d}" for j in range(dim)]


def o_names(dim: int) -> list[str]:
    return [f"o_{j + 1:02d}" for j in range(dim)]


@dataclass(frozen=True)
class DGPConfig:
    """Simulation settings.

    ``dim_x1`` picks how many leading X1ALL columns are observed as X1.
    ``baseline_scale`` multiplies the prognostic covariate sum in the outcome;
    the simulation study uses 1, and 0 gives outcomes free of prognostic noise.
    """

    n_source: int = 100_000
    dim_x1all: int = 20
    dim_x2: int = 10
    dim_o: int = 20
    dim_x1: int = 2
    coef_x1: float = 1.0
    coef_x2: float = 0.5
    coef_o: float = 0.3
    selection_linear: float = 1.0
    selection_quadratic: float = 0.2
    treat_prob: float = 0.5
    noise_sd: float = 1.0
    baseline_scale: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("dim_x1all", "dim_x2", "dim_o", "n_source", "dim_x1"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.dim_x1 > self.dim_x1all:
            raise ValueError("dim_x1 cannot exceed dim_x1all")
        if not 0.0 < self.treat_prob < 1.0:
            raise ValueError("treat_prob must lie in (0, 1)")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


@dataclass(frozen=True)
class SourcePopulation:
    """Source population table; ``x1_active`` names the X1 subset of X1ALL."""

    data: Dataset
    config: DGPConfig
    x1all: tuple[str, ...]
    x1_active: tuple[str, ...]

    @property
    def n_rows(self) -> int:
        return self.data.n_rows


@dataclass(frozen=True)
class TrialSample:
    """Result of trial selection.

    ``source`` is a copy of the source population carrying the selection
    column; ``trial`` holds the selected rows (in source order), later
    extended with treatment and outcome.
    """

    source: Dataset
    trial: Dataset
    indices: np.ndarray
    mu: float
    attempts: int
    config: DGPConfig = field(repr=False)

    @property
    def size(self) -> int:
        return int(self.indices.size)


def true_ite(x1all, x2, o, config: DGPConfig) -> float:
    x1all, x2, o = (np.asarray(v, dtype=float) for v in (x1all, x2, o))
    if x1all.shape != (config.dim_x1all,) or x2.shape != (config.dim_x2,) or o.shape != (config.dim_o,):
        raise ValueError("covariate vector lengths do not match the configuration")
    return float(config.coef_x1 * x1all.sum() + config.coef_x2 * x2.sum() + config.coef_o * o.sum())


def true_cate_x1(x1, config: DGPConfig) -> float:
    x1 = np.asarray(x1, dtype=float)
    if x1.shape != (config.dim_x1,):
        raise ValueError(f"expected {config.dim_x1} X1 values, got {x1.shape}")
    return float(config.coef_x1 * x1.sum())


def true_cate_x1_matrix(x1: np.ndarray, config: DGPConfig) -> np.ndarray:
    """Row-wise :func:`true_cate_x1` over an ``(n, dim_x1)`` matrix."""
    x1 = np.asarray(x1, dtype=float)
    if x1.ndim != 2 or x1.shape[1] != config.dim_x1:
        raise ValueError(f"expected {config.dim_x1} X1 columns")
    return config.coef_x1 * x1.sum(axis=1)


def generate_source(config: DGPConfig) -> SourcePopulation:
    rng = np.random.default_rng(config.seed)
    p = config.dim_x1all + config.dim_x2 + config.dim_o
    z = rng.standard_normal((config.n_source, p))
    b1 = z[:, : config.dim_x1all]
    b2 = z[:, config.dim_x1all : config.dim_x1all + config.dim_x2]
    bo = z[:, config.dim_x1all + config.dim_x2 :]
    ite = config.coef_x1 * b1.sum(axis=1) + config.coef_x2 * b2.sum(axis=1) + config.coef_o * bo.sum(axis=1)

    n1, n2, no = x1_names(config.dim_x1all), x2_names(config.dim_x2), o_names(config.dim_o)
    columns = {}
    for names, block in ((n1, b1), (n2, b2), (no, bo)):
        for j, name in enumerate(names):
            columns[name] = block[:, j]
    columns[TRUE_ITE] = ite
    active = tuple(n1[: config.dim_x1])
    roles = {"X1": active, "X2": tuple(n2), "O": tuple(no), "true_ite": (TRUE_ITE,)}
    return SourcePopulation(Dataset(columns, roles), config, tuple(n1), active)


def with_dim_x1(source: SourcePopulation, dim_x1: int) -> SourcePopulation:
    """Re-designate the active X1 subset as the first ``dim_x1`` X1ALL columns."""
    cfg = replace(source.config, dim_x1=dim_x1)
    active = source.x1all[:dim_x1]
    return SourcePopulation(source.data.with_roles(X1=active), cfg, source.x1all, tuple(active))


def selection_scores(x2: np.ndarray, config: DGPConfig) -> np.ndarray:
    """Base participation score ``expit(a * sum(x2) + b * sum(x2**2))`` per row."""
    x2 = np.asarray(x2, dtype=float)
    return expit(config.selection_linear * x2.sum(axis=1) + config.selection_quadratic * (x2**2).sum(axis=1))


def calibrate_mu(scores: np.ndarray, target_n: float, tol: float = 0.5, max_iter: int = 200) -> float:
    """Find mu with ``sum(min(mu * scores, 1)) == target_n`` by bisection."""
    scores = np.asarray(scores, dtype=float)
    n = scores.size
    if target_n > n:
        raise ValueError(f"target size {target_n} exceeds population size {n}")
    if target_n <= 0:
        return 0.0
    positive = scores[scores > 0]
    if positive.size < target_n:
        raise RuntimeError("mu calibration failed: too few rows with positive score")

    def expected(mu: float) -> float:
        return float(np.minimum(mu * scores, 1.0).sum())

    lo, hi = 0.0, 1.0 / positive.min()
    if abs(expected(hi) - target_n) < tol:
        return hi
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        gap = expected(mid) - target_n
        if abs(gap) < tol:
            return mid
        if gap < 0:
            lo = mid
        else:
            hi = mid
    raise RuntimeError("mu calibration did not converge")


def select_trial(
    source: SourcePopulation,
    target_n: int,
    config: DGPConfig | None = None,
    seed: int = 0,
    max_attempts: int = 50,
    band: float = 0.05,
) -> TrialSample:
    """Draw a trial of roughly ``target_n`` rows by Bernoulli inclusion."""
    config = config or source.config
    data = source.data
    if target_n > data.n_rows:
        raise ValueError(f"target size {target_n} exceeds population size {data.n_rows}")
    x2 = data.to_matrix(data.role_columns("X2"))
    probs = inclusion_probabilities(x2, target_n, config)
    mu = probs.mu

    rng = np.random.default_rng(seed)
    best = None
    attempts = 0
    for attempts in range(1, max_attempts + 1):
        chosen = rng.random(data.n_rows) < probs.p
        gap = abs(int(chosen.sum()) - target_n)
        if best is None or gap < best[0]:
            best = (gap, chosen)
        if gap <= band * target_n:
            break
    chosen = best[1]

    s = chosen.astype(float)
    marked = data.with_column(SELECTION, s, role="selection")
    idx = np.flatnonzero(chosen)
    return TrialSample(marked, marked.subset(idx), idx, mu, attempts, config)


@dataclass(frozen=True)
class _Inclusion:
    p: np.ndarray
    mu: float


def inclusion_probabilities(x2: np.ndarray, target_n: int, config: DGPConfig) -> _Inclusion:
    scores = selection_scores(x2, config)
    mu = calibrate_mu(scores, target_n)
    return _Inclusion(np.minimum(mu * scores, 1.0), mu)


def assign_and_outcome(trial: TrialSample, config: DGPConfig | None = None, seed: int = 0) -> TrialSample:
    """Randomize treatment and generate outcomes for the trial rows."""
    config = config or trial.config
    data = trial.trial
    n = data.n_rows
    rng = np.random.default_rng(seed)
    a = (rng.random(n) < config.treat_prob).astype(float)
    z = rng.standard_normal(n)
    baseline = sum(
        data.to_matrix(names).sum(axis=1)
        for names in (x1_names(config.dim_x1all), x2_names(config.dim_x2), o_names(config.dim_o))
    )
    y = config.baseline_scale * baseline + a * data.column(TRUE_ITE) + config.noise_sd * z
    out = data.with_column(TREATMENT, a, role="treatment").with_column(OUTCOME, y, role="outcome")
    return replace(trial, trial=out)


def simulate(config: DGPConfig, target_n: int, seed: int) -> tuple[SourcePopulation, TrialSample]:
    """Generate source, select and randomize a trial from one master seed."""
    s_src, s_sel, s_out = np.random.SeedSequence(seed).generate_state(3)
    source = generate_source(replace(config, seed=int(s_src)))
    trial = select_trial(source, target_n, seed=int(s_sel))
    trial = assign_and_outcome(trial, seed=int(s_out))
    return source, trial
