"""Weighted honest causal forest for randomized data.

Each tree draws a subsample without replacement, grows splits on one half
(maximizing ``n_L n_R / (n_L + n_R)^2 * (tau_L - tau_R)^2`` with weighted arm
means) and fills its leaves with weighted difference-in-means from the other
half. Observation weights enter every weighted sum; they are rescaled to a
canonical form first, so multiplying all weights by a constant leaves the
fitted forest unchanged.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np

from . import _kernels

DUMP_FORMAT = "trialcate-forest/1"


class ForestError(ValueError):
    pass


@dataclass(frozen=True)
class ForestConfig:
    num_trees: int = 500
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    mtry: int | None = None
    min_leaf_treated: int = 5
    min_leaf_control: int = 5
    max_depth: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_trees < 1:
            raise ValueError("num_trees must be >= 1")
        if not 0.0 < self.subsample_fraction <= 1.0:
            raise ValueError("subsample_fraction must lie in (0, 1]")
        if not 0.0 < self.honesty_fraction < 1.0:
            raise ValueError("honesty_fraction must lie in (0, 1)")
        if self.min_leaf_treated < 1 or self.min_leaf_control < 1:
            raise ValueError("minimum leaf counts must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0")

    def resolved_mtry(self, n_features: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(math.sqrt(n_features))
        return max(1, min(m, n_features))


class Tree(NamedTuple):
    """One fitted tree. ``stats`` columns: sum w*A, sum w*(1-A), sum w*A*Y, sum w*(1-A)*Y."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    stats: np.ndarray
    value: np.ndarray

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.feature < 0)


@dataclass(frozen=True, eq=False)
class CausalForestModel:
    """Fitted forest; node arrays of all trees are concatenated.

    Child ids in ``left``/``right`` are absolute positions in the
    concatenated arrays; ``roots[t]`` is the first node of tree ``t``.
    """

    n_features: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    stats: np.ndarray
    value: np.ndarray
    roots: np.ndarray
    config: ForestConfig
    feature_names: tuple[str, ...] | None = None

    @property
    def num_trees(self) -> int:
        return int(self.roots.size)

    @property
    def ends(self) -> np.ndarray:
        return np.append(self.roots[1:], self.feature.size)

    def tree(self, t: int) -> Tree:
        lo, hi = int(self.roots[t]), int(self.ends[t])
        shift = lambda a: np.where(a >= 0, a - lo, -1)
        return Tree(
            self.feature[lo:hi],
            self.threshold[lo:hi],
            shift(self.left[lo:hi]),
            shift(self.right[lo:hi]),
            self.stats[lo:hi],
            self.value[lo:hi],
        )

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ForestError(
                f"expected a matrix with {self.n_features} feature columns, got shape {X.shape}"
            )
        return X

    def predict(self, X: np.ndarray) -> np.ndarray:
        return predict(self, X)


def canonical_weights(weights: np.ndarray) -> np.ndarray:
    """Rescale to max 1 and round to single precision.

    The rounding absorbs the last-bit differences that ``c * w`` introduces,
    which makes the fit exactly invariant to a global weight scale.
    """
    w = weights / weights.max()
    return w.astype(np.float32).astype(np.float64)


def _validate_inputs(features, treatment, outcome, weights):
    X = np.ascontiguousarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise ForestError("feature matrix is empty")
    n = X.shape[0]
    A = np.ascontiguousarray(treatment, dtype=np.float64)
    Y = np.ascontiguousarray(outcome, dtype=np.float64)
    W = np.ones(n) if weights is None else np.ascontiguousarray(weights, dtype=np.float64)
    if A.shape != (n,) or Y.shape != (n,) or W.shape != (n,):
        raise ForestError("features, treatment, outcome and weights must have consistent lengths")
    if not np.all((A == 0) | (A == 1)):
        raise ForestError("treatment must be 0/1")
    if A.min() == A.max():
        raise ForestError("both treatment arms must be present")
    if not np.all(np.isfinite(W)) or np.any(W <= 0):
        raise ForestError("weights must be strictly positive and finite")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise ForestError("features and outcome must be finite")
    return X, A, Y, W


def _tree_seeds(seed: int, num_trees: int) -> np.ndarray:
    return np.random.SeedSequence(seed).generate_state(2 * num_trees).reshape(num_trees, 2)


def build_tree(X, A, Y, W, split_idx, est_idx, config: ForestConfig, seed: int):
    """Grow one honest tree on fixed halves.

    Returns ``(grown, fitted)``: the raw grown structure
    ``(feature, threshold, left, right)`` and the repaired compact
    :class:`Tree`, or ``None`` when the estimation half cannot populate the
    root with both arms.
    """
    mtry = config.resolved_mtry(X.shape[1])
    max_depth = -1 if config.max_depth is None else config.max_depth
    min_e = config.min_leaf_treated + config.min_leaf_control
    grown = _kernels.grow(
        X[split_idx], A[split_idx], Y[split_idx], W[split_idx], X[est_idx],
        mtry, config.min_leaf_treated, config.min_leaf_control, min_e, max_depth, int(seed),
    )
    feature, threshold, left, right = grown
    stats = _kernels.node_stats(feature, threshold, left, right, X[est_idx], A[est_idx], Y[est_idx], W[est_idx])
    feature, ok = _kernels.repair(feature, left, right, stats)
    if not ok:
        return grown, None
    return grown, Tree(*_kernels.compact(feature, threshold, left, right, stats))


def _halves(n: int, config: ForestConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    s = min(n, math.ceil(config.subsample_fraction * n))
    if s < 2:
        raise ForestError("too few rows to form honest halves")
    n_split = min(max(int(config.honesty_fraction * s), 1), s - 1)
    sub = rng.choice(n, size=s, replace=False)
    return sub[:n_split], sub[n_split:]


def fit(
    features: np.ndarray,
    treatment: np.ndarray,
    outcome: np.ndarray,
    weights: np.ndarray | None = None,
    config: ForestConfig = ForestConfig(),
    feature_names: tuple[str, ...] | None = None,
    max_attempts: int = 100,
) -> CausalForestModel:
    X, A, Y, W = _validate_inputs(features, treatment, outcome, weights)
    W = canonical_weights(W)
    n = X.shape[0]
    trees: list[Tree] = []
    for tree_seed, kernel_seed in _tree_seeds(config.seed, config.num_trees):
        rng = np.random.default_rng(int(tree_seed))
        for attempt in range(max_attempts):
            split_idx, est_idx = _halves(n, config, rng)
            _, tree = build_tree(X, A, Y, W, split_idx, est_idx, config, (int(kernel_seed) + attempt) % 2**32)
            if tree is not None:
                trees.append(tree)
                break
        else:
            raise ForestError(
                f"could not draw a subsample with both arms in the estimation half "
                f"after {max_attempts} attempts"
            )
    return _assemble(trees, X.shape[1], config, feature_names)


def _assemble(trees, n_features, config, feature_names) -> CausalForestModel:
    sizes = np.array([t.feature.size for t in trees])
    roots = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(np.int64)
    shift = lambda a, lo: np.where(a >= 0, a + lo, -1)
    return CausalForestModel(
        n_features=n_features,
        feature=np.concatenate([t.feature for t in trees]),
        threshold=np.concatenate([t.threshold for t in trees]),
        left=np.concatenate([shift(t.left, lo) for t, lo in zip(trees, roots)]),
        right=np.concatenate([shift(t.right, lo) for t, lo in zip(trees, roots)]),
        stats=np.concatenate([t.stats for t in trees]),
        value=np.concatenate([t.value for t in trees]),
        roots=roots,
        config=config,
        feature_names=feature_names,
    )


def predict(model: CausalForestModel, features: np.ndarray) -> np.ndarray:
    """Average leaf effect over trees for each row."""
    X = model._check(features)
    return _kernels.predict(model.feature, model.threshold, model.left, model.right, model.value, model.roots, X)


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def crossfit_folds(n: int, n_folds: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return np.array_split(perm, n_folds)


def predict_crossfit(
    features: np.ndarray,
    treatment: np.ndarray,
    outcome: np.ndarray,
    weights: np.ndarray | None = None,
    config: ForestConfig = ForestConfig(),
    n_folds: int = 5,
) -> np.ndarray:
    """Out-of-fold predictions: each row comes from a forest fitted without its fold.

    Fold ``k`` is fitted with seed ``fold_seed(config.seed, k)`` on the
    remaining rows in their original order.
    """
    X, A, Y, W = _validate_inputs(features, treatment, outcome, weights)
    n = X.shape[0]
    if not 2 <= n_folds <= n:
        raise ForestError("n_folds must lie in [2, n]")
    out = np.empty(n)
    for k, held in enumerate(crossfit_folds(n, n_folds, config.seed)):
        train = np.setdiff1d(np.arange(n), held)
        if A[train].min() == A[train].max():
            raise ForestError(f"training rows for fold {k} lack a treatment arm")
        model = fit(X[train], A[train], Y[train], W[train], replace(config, seed=fold_seed(config.seed, k)))
        out[held] = predict(model, X[held])
    return out


def dump_json(model: CausalForestModel, path: str | os.PathLike) -> None:
    """Write the forest as JSON for inspection. The layout may change between versions."""
    doc = {
        "format": DUMP_FORMAT,
        "n_features": model.n_features,
        "feature_names": list(model.feature_names) if model.feature_names else None,
        "config": asdict(model.config),
        "trees": [
            {
                "feature": t.feature.tolist(),
                "threshold": t.threshold.tolist(),
                "left": t.left.tolist(),
                "right": t.right.tolist(),
                "stats": t.stats.tolist(),
                "value": t.value.tolist(),
            }
            for t in (model.tree(i) for i in range(model.num_trees))
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def load_json(path: str | os.PathLike) -> CausalForestModel:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != DUMP_FORMAT:
        raise ForestError(f"unsupported forest dump format {doc.get('format')!r}")
    trees = [
        Tree(
            np.asarray(t["feature"], dtype=np.int64),
            np.asarray(t["threshold"], dtype=np.float64),
            np.asarray(t["left"], dtype=np.int64),
            np.asarray(t["right"], dtype=np.int64),
            np.asarray(t["stats"], dtype=np.float64).reshape(-1, 4),
            np.asarray(t["value"], dtype=np.float64),
        )
        for t in doc["trees"]
    ]
    names = tuple(doc["feature_names"]) if doc["feature_names"] else None
    return _assemble(trees, doc["n_features"], ForestConfig(**doc["config"]), names)
