from .forest import (
    CausalForestModel,
    ForestConfig,
    ForestError,
    Tree,
    build_tree,
    crossfit_folds,
    dump_json,
    fit,
    fold_seed,
    load_json,
    predict,
    predict_crossfit,
)

__all__ = [
    "CausalForestModel",
    "ForestConfig",
    "ForestError",
    "Tree",
    "build_tree",
    "crossfit_folds",
    "dump_json",
    "fit",
    "fold_seed",
    "load_json",
    "predict",
    "predict_crossfit",
]
