"""The four trial-to-source CATE estimators.

========  ===========  ====================
model     features     observation weights
========  ===========  ====================
M1        X1           none
M2        X1, X2       none
M1_IPW    X1           1 / P(S=1 | X2)
M2_IPW    X1, X2       1 / P(S=1 | X2)
========  ===========  ====================

Aim B predicts CATE(x1, x2) directly from the forest. Aim A targets
CATE(x1); M1-type forests predict it directly, M2-type forests are averaged
over draws of x2 from p(x2 | x1) estimated on the source population
(Monte Carlo g-formula).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .data import Dataset, select_columns
from .forest import CausalForestModel, ForestConfig
from .forest import _kernels
from .forest import fit as fit_forest
from .selection import SelectionModel, WeightConfig, fit_logistic, ipw_weights

MODELS = ("M1", "M2", "M1_IPW", "M2_IPW")
AIMS = ("A", "B")
SAMPLERS = ("independent", "knn")


class TransportError(ValueError):
    pass


class EffectModel(Protocol):
    def predict(self, X: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator configuration.

    ``mc_draws=None`` integrates exhaustively over every source row (the
    exact empirical g-formula for the independent sampler, all ``knn_k``
    neighbours with equal weight for the KNN sampler). With
    ``shared_draws`` the independent sampler uses one set of draws for all
    queries.
    """

    model: str = "M1"
    aim: str = "A"
    forest: ForestConfig = field(default_factory=ForestConfig)
    weight_cfg: WeightConfig = field(default_factory=WeightConfig)
    mc_draws: int | None = 200
    knn_k: int = 50
    conditional_sampler: str = "independent"
    shared_draws: bool = True
    weight_features: tuple[str, ...] = ("X2",)

    def __post_init__(self) -> None:
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.aim not in AIMS:
            raise ValueError(f"unknown aim {self.aim!r}")
        if self.conditional_sampler not in SAMPLERS:
            raise ValueError(f"unknown conditional sampler {self.conditional_sampler!r}")
        if self.mc_draws is not None and self.mc_draws < 1:
            raise ValueError("mc_draws must be >= 1")
        if self.knn_k < 1:
            raise ValueError("knn_k must be >= 1")
        object.__setattr__(self, "weight_features", tuple(self.weight_features))
        if not set(self.weight_features) <= {"X1", "X2"} or "X2" not in self.weight_features:
            raise ValueError("weight_features must be ('X2',) or ('X1', 'X2')")

    @property
    def uses_x2(self) -> bool:
        return self.model in ("M2", "M2_IPW")

    @property
    def uses_ipw(self) -> bool:
        return self.model.endswith("_IPW")

    @property
    def feature_roles(self) -> tuple[str, ...]:
        return ("X1", "X2") if self.uses_x2 else ("X1",)

    @property
    def label(self) -> str:
        return f"{self.model}/{self.aim}"


@dataclass(frozen=True, eq=False)
class FittedEstimator:
    spec: EstimatorSpec
    forest: EffectModel
    selection: SelectionModel | None
    feature_roles: tuple[str, ...]
    source: Dataset
    weights: np.ndarray

    @property
    def n_x1(self) -> int:
        return len(self.source.role_columns("X1"))


def _check_roles(trial: Dataset, source: Dataset, roles) -> None:
    for role in roles:
        if trial.role_columns(role) != source.role_columns(role):
            raise TransportError(f"role {role!r} binds different columns in trial and source")


def participation_labels(trial: Dataset, source: Dataset, roles, trial_in_source: bool):
    """Features and S labels for the participation model.

    In the nested design the source carries the selection column itself;
    otherwise trial rows are appended to the source with S=1.
    """
    x_src = select_columns(source, roles)
    if trial_in_source:
        if not source.has_role("selection"):
            raise TransportError("source has no selection column; set trial_in_source=false")
        return x_src, source.role_vector("selection")
    x_trial = select_columns(trial, roles)
    labels = np.concatenate([np.zeros(len(x_src)), np.ones(len(x_trial))])
    return np.vstack([x_src, x_trial]), labels


def fit_estimator(trial: Dataset, source: Dataset, spec: EstimatorSpec, trial_in_source: bool = True) -> FittedEstimator:
    roles = spec.feature_roles
    _check_roles(trial, source, set(roles) | set(spec.weight_features))
    a = trial.role_vector("treatment")
    y = trial.role_vector("outcome")
    X = select_columns(trial, roles)
    selection = None
    weights = np.ones(trial.n_rows)
    if spec.uses_ipw:
        xs, labels = participation_labels(trial, source, spec.weight_features, trial_in_source)
        names = tuple(c for r in ("X1", "X2") if r in spec.weight_features for c in source.role_columns(r))
        selection = fit_logistic(xs, labels, feature_names=names)
        weights = ipw_weights(selection, select_columns(trial, spec.weight_features), spec.weight_cfg)
    names = tuple(c for r in roles for c in trial.role_columns(r))
    forest = fit_forest(X, a, y, weights, spec.forest, feature_names=names)
    return FittedEstimator(spec, forest, selection, roles, source, weights)


def estimate_aim_b(fitted: FittedEstimator, query: Dataset) -> np.ndarray:
    """Forest prediction of CATE(x1, x2) on the query rows."""
    for role in fitted.feature_roles:
        if query.role_columns(role) != fitted.source.role_columns(role):
            raise TransportError(f"query role {role!r} does not match the fitted estimator")
    return fitted.forest.predict(select_columns(query, fitted.feature_roles))


def sample_x2_independent(source: Dataset, m: int, seed) -> np.ndarray:
    """``m`` rows drawn uniformly with replacement from the source X2 block."""
    x2 = select_columns(source, ["X2"])
    if x2.shape[0] == 0:
        raise TransportError("source population is empty")
    idx = np.random.default_rng(seed).integers(0, x2.shape[0], size=m)
    return x2[idx]


class KNNIndex:
    """Nearest source rows in standardized X1 space.

    Columns are scaled to mean 0 and unit (population) standard deviation;
    constant columns are mapped to 0. Distance ties go to the lower row index.
    """

    def __init__(self, x1: np.ndarray):
        x1 = np.asarray(x1, dtype=float)
        self.mean = x1.mean(axis=0)
        sd = x1.std(axis=0)
        self.scale = np.where(sd > 0, sd, np.inf)
        self.z = (x1 - self.mean) / self.scale
        self.n = x1.shape[0]

    def standardize(self, q: np.ndarray) -> np.ndarray:
        return (np.asarray(q, dtype=float) - self.mean) / self.scale

    def neighbors(self, q: np.ndarray, k: int) -> np.ndarray:
        if k > self.n:
            raise TransportError(f"k={k} exceeds the {self.n} source rows")
        d2 = ((self.z - self.standardize(q)) ** 2).sum(axis=1)
        return np.argsort(d2, kind="stable")[:k]


def sample_x2_knn(source: Dataset, x1_query, k: int, m: int, seed) -> np.ndarray:
    """``m`` X2 vectors drawn with replacement from the ``k`` nearest source rows in X1."""
    index = KNNIndex(select_columns(source, ["X1"]))
    nbrs = index.neighbors(x1_query, k)
    pick = np.random.default_rng(seed).integers(0, k, size=m)
    return select_columns(source, ["X2"])[nbrs[pick]]


def _knn_plan(index: KNNIndex, queries: np.ndarray, k: int, m: int | None, rng):
    idx = np.empty((queries.shape[0], k), dtype=np.int64)
    wts = np.empty((queries.shape[0], k))
    for i, q in enumerate(queries):
        idx[i] = index.neighbors(q, k)
        if m is None:
            wts[i] = 1.0 / k
        else:
            wts[i] = np.bincount(rng.integers(0, k, size=m), minlength=k) / m
    return idx, wts


def _average_pairs(model: EffectModel, x1: np.ndarray, x2: np.ndarray, idx, wts, chunk: int = 256):
    """Per-query weighted average of the effect model over candidate x2 rows."""
    if isinstance(model, CausalForestModel):
        return _kernels.integrate_pairs(
            model.feature, model.threshold, model.left, model.right, model.value, model.roots,
            np.ascontiguousarray(x1), np.ascontiguousarray(x2), idx, wts, x1.shape[1],
        )
    out = np.empty(x1.shape[0])
    J = idx.shape[1]
    for lo in range(0, x1.shape[0], chunk):
        hi = min(lo + chunk, x1.shape[0])
        rows = np.hstack([np.repeat(x1[lo:hi], J, axis=0), x2[idx[lo:hi].ravel()]])
        pred = np.asarray(model.predict(rows)).reshape(hi - lo, J)
        out[lo:hi] = (pred * wts[lo:hi]).sum(axis=1)
    return out


def _average_shared(model: EffectModel, x1: np.ndarray, draws: np.ndarray, chunk: int = 256):
    if isinstance(model, CausalForestModel):
        return _kernels.integrate_shared(
            model.feature, model.threshold, model.left, model.right, model.value, model.roots,
            model.ends, np.ascontiguousarray(x1), np.ascontiguousarray(draws), x1.shape[1],
        )
    D = draws.shape[0]
    idx = np.broadcast_to(np.arange(D), (x1.shape[0], D))
    wts = np.full((x1.shape[0], D), 1.0 / D)
    return _average_pairs(model, x1, draws, idx, wts, chunk=max(1, 4096 // D))


def estimate_aim_a(fitted: FittedEstimator, x1_queries: np.ndarray, seed=0) -> np.ndarray:
    """CATE(x1) at each query row.

    M1-type estimators predict directly. M2-type estimators average the
    forest over x2 draws from the configured conditional sampler.
    """
    x1 = np.atleast_2d(np.asarray(x1_queries, dtype=float))
    if x1.shape[1] != fitted.n_x1:
        raise TransportError(f"expected {fitted.n_x1} X1 columns, got {x1.shape[1]}")
    spec = fitted.spec
    if not spec.uses_x2:
        return fitted.forest.predict(x1)

    source = fitted.source
    x2 = select_columns(source, ["X2"])
    if x2.shape[0] == 0:
        raise TransportError("source population is empty")
    rng = np.random.default_rng(seed)
    if spec.conditional_sampler == "knn":
        if not source.has_role("X1"):
            raise TransportError("KNN sampler needs X1 in the source population")
        index = KNNIndex(select_columns(source, ["X1"]))
        idx, wts = _knn_plan(index, x1, spec.knn_k, spec.mc_draws, rng)
        return _average_pairs(fitted.forest, x1, x2, idx, wts)

    if spec.mc_draws is None:
        return _average_shared(fitted.forest, x1, x2)
    if spec.shared_draws:
        draws = x2[rng.integers(0, x2.shape[0], size=spec.mc_draws)]
        return _average_shared(fitted.forest, x1, draws)
    idx = rng.integers(0, x2.shape[0], size=(x1.shape[0], spec.mc_draws))
    wts = np.full(idx.shape, 1.0 / spec.mc_draws)
    return _average_pairs(fitted.forest, x1, x2, idx, wts)


def estimate(fitted: FittedEstimator, query: Dataset, seed=0) -> np.ndarray:
    """Dispatch on the spec's aim: Aim A uses the query's X1 block only."""
    if fitted.spec.aim == "A":
        return estimate_aim_a(fitted, select_columns(query, ["X1"]), seed)
    return estimate_aim_b(fitted, query)
