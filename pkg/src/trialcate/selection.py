"""Trial-participation model and inverse-probability-of-participation weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

PROB_FLOOR = 1e-12
SEPARATION_RIDGE = 1e-4
MAX_COEF = 30.0


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionModel:
    """Logistic model for P(S=1 | x); ``coef[0]`` is the intercept."""

    coef: np.ndarray
    features: tuple[str, ...]
    converged: bool
    n_iter: int
    loglik: float
    ridge: float = 0.0
    separation: bool = False

    @property
    def intercept(self) -> float:
        return float(self.coef[0])

    @property
    def slopes(self) -> np.ndarray:
        return self.coef[1:]


@dataclass(frozen=True)
class WeightConfig:
    normalize_mean_one: bool = True
    trim_upper_quantile: float | None = None

    def __post_init__(self) -> None:
        q = self.trim_upper_quantile
        if q is not None and not 0.5 < q <= 1.0:
            raise ValueError("trim_upper_quantile must lie in (0.5, 1]")


@dataclass(frozen=True)
class OverlapReport:
    min_prob: float
    median_prob: float
    max_prob: float
    n_below_floor: int
    floor: float
    n: int


def _loglik(design: np.ndarray, labels: np.ndarray, beta: np.ndarray) -> float:
    eta = design @ beta
    # log p = -log(1 + e^-eta), log(1 - p) = -log(1 + e^eta)
    return float(-(labels * np.logaddexp(0.0, -eta) + (1.0 - labels) * np.logaddexp(0.0, eta)).sum())


def _irls(design, labels, ridge, tol, max_iter, guard=True):
    n, k = design.shape
    penalty = np.full(k, ridge)
    penalty[0] = 0.0
    beta = np.zeros(k)
    for it in range(1, max_iter + 1):
        p = expit(design @ beta)
        score = design.T @ (labels - p) - penalty * beta
        if np.max(np.abs(score)) < tol:
            return beta, True, it - 1, False
        w = p * (1.0 - p)
        if np.all(w < 1e-10):
            return beta, False, it, True
        hess = (design * w[:, None]).T @ design + np.diag(penalty)
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError:
            return beta, False, it, True
        beta = beta + step
        if not np.all(np.isfinite(beta)) or (guard and np.max(np.abs(beta)) > MAX_COEF):
            return beta, False, it, True
    p = expit(design @ beta)
    score = design.T @ (labels - p) - penalty * beta
    return beta, bool(np.max(np.abs(score)) < tol), max_iter, False


def fit_logistic(
    features: np.ndarray,
    labels: np.ndarray,
    ridge: float = 0.0,
    tol: float = 1e-8,
    max_iter: int = 100,
    feature_names: tuple[str, ...] | None = None,
) -> SelectionModel:
    """Maximum-likelihood logistic regression by iteratively reweighted least squares.

    The intercept is never penalized. If the iterations diverge (separation:
    weights collapse or a coefficient exceeds 30 in magnitude) the fit is
    repeated with a small ridge penalty and the result is flagged.
    """
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    s = np.asarray(labels, dtype=float)
    if X.shape[0] != s.shape[0]:
        raise SelectionError("features and labels have different lengths")
    if not np.all((s == 0) | (s == 1)):
        raise SelectionError("labels must be 0/1")
    if s.min() == s.max():
        raise SelectionError("labels constant")
    if X.shape[1] and np.any(np.ptp(X, axis=0) == 0):
        raise SelectionError("a feature is constant and duplicates the intercept")
    if ridge < 0:
        raise SelectionError("ridge must be >= 0")
    names = feature_names or tuple(f"f{j}" for j in range(X.shape[1]))
    design = np.column_stack([np.ones(X.shape[0]), X])

    beta, converged, n_iter, separated = _irls(design, s, ridge, tol, max_iter)
    used_ridge = ridge
    if separated:
        used_ridge = max(ridge, SEPARATION_RIDGE)
        # the penalized optimum is finite but may be large, so no size guard here
        beta, converged, n_iter, still = _irls(design, s, used_ridge, tol, max(max_iter, 500), guard=False)
        if still or not converged:
            raise SelectionError("logistic fit did not converge after ridge fallback")
    elif not converged:
        raise SelectionError(f"logistic fit did not converge in {max_iter} iterations")
    return SelectionModel(beta, tuple(names), converged, n_iter, _loglik(design, s, beta), used_ridge, separated)


def participation_prob(model: SelectionModel, x: np.ndarray) -> np.ndarray | float:
    """Fitted participation probability, clamped away from 0 and 1.

    Accepts one feature vector (returns a float) or a matrix of rows.
    """
    x = np.asarray(x, dtype=float)
    k = model.slopes.size
    if x.shape[-1] != k or x.ndim > 2:
        raise SelectionError(f"expected {k} features, got shape {x.shape}")
    p = np.clip(expit(model.intercept + x @ model.slopes), PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(p) if x.ndim == 1 else p


def ipw_weights(model: SelectionModel, trial_features: np.ndarray, cfg: WeightConfig = WeightConfig()) -> np.ndarray:
    """Horvitz-Thompson weights ``1 / P(S=1 | x)`` for trial rows."""
    X = np.atleast_2d(np.asarray(trial_features, dtype=float))
    w = 1.0 / participation_prob(model, X)
    return finalize_weights(w, cfg)


def finalize_weights(w: np.ndarray, cfg: WeightConfig) -> np.ndarray:
    """Apply optional upper-quantile trimming, then optional mean-one scaling."""
    w = np.asarray(w, dtype=float)
    if cfg.trim_upper_quantile is not None:
        cap = np.quantile(w, cfg.trim_upper_quantile)
        w = np.minimum(w, cap)
    if cfg.normalize_mean_one:
        w = w / w.mean()
    return w


def overlap_diagnostics(model: SelectionModel, source_features: np.ndarray, floor: float = 1e-4) -> OverlapReport:
    p = participation_prob(model, np.atleast_2d(np.asarray(source_features, dtype=float)))
    return OverlapReport(
        min_prob=float(p.min()),
        median_prob=float(np.median(p)),
        max_prob=float(p.max()),
        n_below_floor=int((p < floor).sum()),
        floor=floor,
        n=int(p.size),
    )
