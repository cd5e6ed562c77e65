"""Two-stage feature importance: ensemble tree importance selects the top 10
features, a second-order boosted model is retrained on them, and exact
interventional Shapley values on held-out data produce the final ranking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError, InvariantError
from .evaluate import SplitPlan
from .models import (
    BoostedModel,
    Dataset,
    ForestModel,
    LogisticModel,
    class_weights,
    raw_margin,
    train_forest,
    train_gbt,
)

MAX_EXACT_FEATURES = 12

STAGE1_FOREST = {"n_trees": 200, "max_depth": None}
STAGE1_GBT = {"eta": 0.1, "n_rounds": 100, "max_depth": 3, "lam": 0.0}
STAGE1_GBT2 = {"eta": 0.1, "n_rounds": 100, "max_depth": 3, "lam": 1.0}
RETRAIN_GBT2 = {"eta": 0.1, "n_rounds": 100, "max_depth": 3, "lam": 1.0}


@dataclass(frozen=True)
class ImportanceTable:
    names: tuple[str, ...]
    importance: np.ndarray  # (d,), sums to 1
    order: tuple[int, ...]  # indices best-first; ties broken by feature index

    def rank_of(self, index: int) -> int:
        return self.order.index(index) + 1


@dataclass(frozen=True)
class ShapTable:
    feature_indices: tuple[int, ...]  # positions in the original layout
    feature_names: tuple[str, ...]
    mean_abs: np.ndarray  # (k,)
    order: tuple[int, ...]  # positions into feature_names, best-first
    phi: np.ndarray  # (n_instances, k)
    base_values: np.ndarray  # (n_instances,)
    margins: np.ndarray  # (n_instances,)
    site_ids: tuple[str, ...]
    fold_of: np.ndarray  # (n_instances,)


def tree_importance(model) -> np.ndarray:
    """Total split gain per feature, normalized to sum 1.

    Forests accumulate weighted Gini decrease; boosted models accumulate
    their split-score gains.
    """
    if isinstance(model, LogisticModel):
        raise ConfigError("tree importance is defined for tree models only")
    if not isinstance(model, (ForestModel, BoostedModel)):
        raise ConfigError(f"unsupported model type {type(model).__name__}")
    total = np.zeros(model.dim)
    for tree in model.trees:
        internal = tree.feature >= 0
        np.add.at(total, tree.feature[internal], tree.gain[internal])
    s = total.sum()
    if s <= 0:
        raise DataError("model has no splits; importance undefined")
    return total / s


def _ranked_order(importance: np.ndarray) -> tuple[int, ...]:
    return tuple(np.lexsort((np.arange(importance.size), -importance)).tolist())


def ensemble_importance(models, names) -> ImportanceTable:
    """Unweighted mean of each model's normalized importance vector."""
    vecs = [tree_importance(m) for m in models]
    dims = {v.size for v in vecs}
    if len(dims) != 1 or vecs[0].size != len(names):
        raise DataError("models disagree on feature layout")
    mean = np.mean(vecs, axis=0)
    return ImportanceTable(
        names=tuple(names), importance=mean, order=_ranked_order(mean)
    )


def select_top_k(table: ImportanceTable, k: int = 10) -> list[int]:
    if k > len(table.order):
        raise DataError(f"cannot select top {k} of {len(table.order)} features")
    return list(table.order[:k])


# ---------------------------------------------------------------------------
# Exact interventional Shapley by full subset enumeration


def _subset_weights(k: int) -> np.ndarray:
    fk = math.factorial(k)
    return np.array(
        [math.factorial(s) * math.factorial(k - 1 - s) / fk for s in range(k)]
    )


def shapley_exact(model, instance: np.ndarray, background: np.ndarray):
    """phi_0 and per-feature phi for one instance, in raw-margin units.

    v(S) is the mean model margin over background rows with the instance's
    values substituted on S; phi uses the exact combinatorial weights, so
    efficiency (phi_0 + sum phi = margin) holds to float precision.
    """
    if isinstance(model, LogisticModel):
        raise ConfigError("Shapley explanations target tree models")
    k = model.dim
    if k > MAX_EXACT_FEATURES:
        raise ConfigError(
            f"exact enumeration is capped at {MAX_EXACT_FEATURES} features, got {k}"
        )
    instance = np.asarray(instance, dtype=np.float64)
    background = np.ascontiguousarray(np.atleast_2d(background), dtype=np.float64)
    if instance.shape != (k,) or background.shape[1] != k:
        raise DataError("instance/background width mismatch with the model")
    if background.shape[0] == 0:
        raise DataError("background must be non-empty")
    n_subsets = 1 << k
    masks = np.arange(n_subsets, dtype=np.int64)
    subset_bits = ((masks[:, None] >> np.arange(k)) & 1).astype(np.uint8)
    feature, threshold, left, right, value, offsets = model.flat()
    v = model.base_score + _kernels.shap_coalition_values(
        feature, threshold, left, right, value, offsets,
        instance, background, subset_bits,
    )
    sizes = subset_bits.sum(axis=1)
    w = _subset_weights(k)
    phi = np.empty(k)
    for i in range(k):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        phi[i] = float((w[sizes[without]] * (v[without | bit] - v[without])).sum())
    return float(v[0]), phi


# ---------------------------------------------------------------------------
# Full pipeline over a split plan


def importance_pipeline(
    X: np.ndarray,
    y: np.ndarray,
    site_ids,
    feature_names,
    plan: SplitPlan,
    seed: int,
    top_k: int = 10,
    background_cap: int = 256,
    retrain_params: dict | None = None,
):
    """Stage 1: per-fold ensemble importance on all non-zero-variance
    features, averaged across folds. Stage 2: retrain the second-order
    booster on the global top-k projection of each fold's training split.
    Stage 3: exact Shapley for every test instance, ranked by mean |phi|.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    names = tuple(feature_names)
    if X.shape[1] != len(names):
        raise DataError("feature_names length disagrees with X width")
    retrain_params = retrain_params or RETRAIN_GBT2
    index_of = {sid: i for i, sid in enumerate(site_ids)}

    fold_importances = []
    for f, split in enumerate(plan.folds):
        rows = np.array([index_of[s] for s in split.train])
        x_tr, y_tr = X[rows], y[rows]
        keep = np.nonzero(x_tr.std(axis=0) > 0)[0]
        if keep.size == 0:
            raise DataError("every feature has zero variance on a training split")
        ds = Dataset(
            X=x_tr[:, keep], y=y_tr, site_ids=tuple(split.train)
        )
        w = class_weights(y_tr)
        fold_seed = seed * 1013 + f
        models = [
            train_forest(ds, seed=fold_seed, weights=w, **STAGE1_FOREST),
            train_gbt(ds, second_order=False, seed=fold_seed, weights=w, **STAGE1_GBT),
            train_gbt(ds, second_order=True, seed=fold_seed, weights=w, **STAGE1_GBT2),
        ]
        vec = np.zeros(len(names))
        vec[keep] = ensemble_importance(models, [names[i] for i in keep]).importance
        fold_importances.append(vec)

    stage1 = np.mean(fold_importances, axis=0)
    table = ImportanceTable(
        names=names, importance=stage1, order=_ranked_order(stage1)
    )
    top = select_top_k(table, top_k)
    top_names = tuple(names[i] for i in top)

    phi_rows, base_rows, margin_rows, sids, fold_of = [], [], [], [], []
    for f, split in enumerate(plan.folds):
        tr = np.array([index_of[s] for s in split.train])
        te = np.array([index_of[s] for s in split.test])
        ds = Dataset(X=X[np.ix_(tr, top)], y=y[tr], site_ids=tuple(split.train))
        model = train_gbt(
            ds,
            second_order=True,
            seed=seed * 1013 + f,
            weights=class_weights(y[tr]),
            **retrain_params,
        )
        rng = np.random.default_rng([seed, 77, f])
        if ds.n > background_cap:
            bg_rows = rng.choice(ds.n, size=background_cap, replace=False)
            background = ds.X[np.sort(bg_rows)]
        else:
            background = ds.X
        x_te = X[np.ix_(te, top)]
        margins = raw_margin(model, x_te)
        for j, row in enumerate(x_te):
            phi0, phi = shapley_exact(model, row, background)
            if abs(phi0 + phi.sum() - margins[j]) > 1e-9:
                raise InvariantError(
                    f"Shapley efficiency violated on {site_ids[te[j]]}: "
                    f"{phi0 + phi.sum()} vs margin {margins[j]}"
                )
            phi_rows.append(phi)
            base_rows.append(phi0)
            margin_rows.append(margins[j])
            sids.append(site_ids[te[j]])
            fold_of.append(f)

    phi_mat = np.array(phi_rows)
    mean_abs = np.abs(phi_mat).mean(axis=0)
    shap = ShapTable(
        feature_indices=tuple(top),
        feature_names=top_names,
        mean_abs=mean_abs,
        order=_ranked_order(mean_abs),
        phi=phi_mat,
        base_values=np.array(base_rows),
        margins=np.array(margin_rows),
        site_ids=tuple(sids),
        fold_of=np.array(fold_of),
    )
    return table, shap
