"""Traditional classifiers: logistic regression, random forest, and gradient
boosting in first-order (gbt) and second-order regularized (gbt2) modes.

Everything is deterministic given (data, hyperparameters, seed); per-tree
randomness comes from independent streams derived from (seed, tree index) so
parallel and serial training would build identical ensembles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError, TrainingError
from .metrics import compute_metrics

MODEL_KINDS = ("logreg", "forest", "gbt", "gbt2")

DEFAULT_GRIDS = {
    "logreg": [{"C": c} for c in (0.01, 0.1, 1.0, 10.0)],
    "forest": [
        {"n_trees": t, "max_depth": d} for t in (100, 300) for d in (8, 16, None)
    ],
    "gbt": [
        {"eta": e, "n_rounds": r, "max_depth": d}
        for e in (0.05, 0.1)
        for r in (100, 300)
        for d in (3, 5)
    ],
    "gbt2": [
        {"eta": e, "n_rounds": r, "max_depth": d, "lam": lam}
        for e in (0.05, 0.1)
        for r in (100, 300)
        for d in (3, 5)
        for lam in (0.0, 1.0)
    ],
}


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray  # (n, d) float64
    y: np.ndarray  # (n,) int, 0 preserved / 1 looted
    site_ids: tuple[str, ...]

    def __post_init__(self):
        x = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise DataError(f"bad dataset shapes X{x.shape} y{y.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("dataset features contain NaN/Inf")
        if not np.all((y == 0) | (y == 1)):
            raise DataError("labels must be 0/1")
        if len(self.site_ids) != x.shape[0]:
            raise DataError("site_ids length mismatch")
        object.__setattr__(self, "X", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            X=self.X[idx],
            y=self.y[idx],
            site_ids=tuple(self.site_ids[i] for i in idx),
        )


def class_weights(y) -> np.ndarray:
    """Inverse-frequency weights w_c = n / (2 * n_c); weighted masses balance."""
    y = np.asarray(y)
    n = y.size
    n1 = int((y == 1).sum())
    n0 = n - n1
    if n0 == 0 or n1 == 0:
        raise DataError("class weights need both classes present")
    return np.array([n / (2.0 * n0), n / (2.0 * n1)])


# ---------------------------------------------------------------------------
# Logistic regression (damped Newton on the weighted penalized loss)


@dataclass
class LogisticModel:
    kind: str
    coef: np.ndarray  # (d,)
    bias: float
    feat_mean: np.ndarray
    feat_std: np.ndarray
    weights: np.ndarray  # per-class (w0, w1)
    hyperparams: dict
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.coef.shape[0]


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def train_logreg(
    ds: Dataset,
    C: float,
    weights: np.ndarray | None = None,
    max_iter: int = 200,
    tol: float = 1e-8,
) -> LogisticModel:
    """Minimize sum_i w_i * logloss_i + (1/(2C)) * ||coef||^2 (bias unpenalized).

    Features are standardized internally; the train-split mean/std live in
    the model so prediction pipelines agree by construction.
    """
    if C <= 0:
        raise ConfigError("C must be positive")
    if weights is None:
        weights = class_weights(ds.y)
    mu = ds.X.mean(axis=0)
    sd = ds.X.std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    z = (ds.X - mu) / sd
    y = ds.y.astype(np.float64)
    w = weights[ds.y]
    d = ds.dim
    beta = np.zeros(d + 1)  # last entry is the bias

    def loss(b):
        margin = z @ b[:d] + b[d]
        ll = w @ np.logaddexp(0.0, (1.0 - 2.0 * y) * margin)
        return ll + (b[:d] @ b[:d]) / (2.0 * C)

    grad_norm = np.inf
    for iteration in range(max_iter):
        margin = z @ beta[:d] + beta[d]
        p = _sigmoid(margin)
        resid = w * (p - y)
        grad = np.empty(d + 1)
        grad[:d] = z.T @ resid + beta[:d] / C
        grad[d] = resid.sum()
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm <= tol:
            break
        curv = w * p * (1.0 - p)
        zc = z * curv[:, None]
        hess = np.empty((d + 1, d + 1))
        hess[:d, :d] = z.T @ zc + np.eye(d) / C
        hess[:d, d] = zc.sum(axis=0)
        hess[d, :d] = hess[:d, d]
        hess[d, d] = curv.sum()
        hess[np.diag_indices(d + 1)] += 1e-12  # numerical floor near separability
        step = np.linalg.solve(hess, grad)
        base = loss(beta)
        t = 1.0
        while t > 1e-14 and loss(beta - t * step) > base + 1e-15:
            t *= 0.5
        beta = beta - t * step
    else:
        raise TrainingError(
            f"logreg did not converge in {max_iter} iterations "
            f"(final gradient norm {grad_norm:.3e})"
        )
    return LogisticModel(
        kind="logreg",
        coef=beta[:d].copy(),
        bias=float(beta[d]),
        feat_mean=mu,
        feat_std=sd,
        weights=np.asarray(weights, dtype=np.float64),
        hyperparams={"C": C},
        meta={"iterations": iteration + 1, "grad_norm": grad_norm},
    )


# ---------------------------------------------------------------------------
# CART trees


@dataclass
class Tree:
    feature: np.ndarray  # int32, -1 at leaves
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64
    gain: np.ndarray  # float64 split gain, 0 at leaves

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]


class _TreeBuilder:
    def __init__(self):
        self.feature = []
        self.threshold = []
        self.left = []
        self.right = []
        self.value = []
        self.gain = []

    def new_node(self) -> int:
        for arr in (self.feature, self.threshold, self.left, self.right, self.value, self.gain):
            arr.append(0)
        self.feature[-1] = -1
        return len(self.feature) - 1

    def set_leaf(self, node: int, value: float) -> None:
        self.feature[node] = -1
        self.value[node] = value

    def set_split(self, node, feat, thr, gain, left, right) -> None:
        self.feature[node] = feat
        self.threshold[node] = thr
        self.gain[node] = gain
        self.left[node] = left
        self.right[node] = right

    def finish(self) -> Tree:
        return Tree(
            feature=np.array(self.feature, dtype=np.int32),
            threshold=np.array(self.threshold, dtype=np.float64),
            left=np.array(self.left, dtype=np.int32),
            right=np.array(self.right, dtype=np.int32),
            value=np.array(self.value, dtype=np.float64),
            gain=np.array(self.gain, dtype=np.float64),
        )


def _grow_tree(
    X: np.ndarray,
    rows: np.ndarray,
    max_depth: int | None,
    max_features: int | None,
    rng: np.random.Generator | None,
    find_split,
    leaf_value,
    row_leaf_values: np.ndarray | None = None,
) -> Tree:
    """Depth-first preorder CART growth shared by the forest and the booster.

    find_split(rows, feats) -> (local_col, threshold, gain) with local_col == -1
    for "no useful split"; leaf_value(rows) -> float. When row_leaf_values is
    given it receives each training row's final leaf value (used by boosting to
    update margins without re-traversal).
    """
    d = X.shape[1]
    builder = _TreeBuilder()
    root = builder.new_node()
    stack = [(root, rows, 0)]
    while stack:
        node, node_rows, depth = stack.pop()
        can_split = node_rows.size >= 2 and (max_depth is None or depth < max_depth)
        feats = None
        if can_split:
            if max_features is not None and max_features < d:
                feats = np.sort(rng.choice(d, size=max_features, replace=False))
            else:
                feats = np.arange(d)
            col, thr, gain = find_split(node_rows, feats)
        else:
            col = -1
        if not can_split or col < 0:
            val = leaf_value(node_rows)
            builder.set_leaf(node, val)
            if row_leaf_values is not None:
                row_leaf_values[node_rows] = val
            continue
        feat = int(feats[col])
        go_left = X[node_rows, feat] <= thr
        left_id = builder.new_node()
        right_id = builder.new_node()
        builder.set_split(node, feat, thr, gain, left_id, right_id)
        # push right first so the left branch is processed next (preorder)
        stack.append((right_id, node_rows[~go_left], depth + 1))
        stack.append((left_id, node_rows[go_left], depth + 1))
    return builder.finish()


def _flatten(trees: list[Tree], scale: float):
    """Concatenate trees into flat arrays for the prediction kernels."""
    offsets = np.zeros(len(trees), dtype=np.int64)
    pos = 0
    for i, t in enumerate(trees):
        offsets[i] = pos
        pos += t.n_nodes
    feature = np.concatenate([t.feature for t in trees])
    threshold = np.concatenate([t.threshold for t in trees])
    value = np.concatenate([t.value for t in trees]) * scale
    left = np.concatenate(
        [np.where(t.feature >= 0, t.left + offsets[i], 0) for i, t in enumerate(trees)]
    ).astype(np.int32)
    right = np.concatenate(
        [np.where(t.feature >= 0, t.right + offsets[i], 0) for i, t in enumerate(trees)]
    ).astype(np.int32)
    return feature, threshold, left, right, value, offsets


@dataclass
class ForestModel:
    kind: str
    trees: list[Tree]
    weights: np.ndarray
    hyperparams: dict
    dim: int
    seed: int
    meta: dict = field(default_factory=dict)

    def flat(self):
        return _flatten(self.trees, 1.0 / len(self.trees))

    @property
    def base_score(self) -> float:
        return 0.0


@dataclass
class BoostedModel:
    kind: str  # "gbt" or "gbt2"
    trees: list[Tree]
    f0: float
    eta: float
    lam: float
    weights: np.ndarray
    hyperparams: dict
    dim: int
    seed: int
    meta: dict = field(default_factory=dict)

    def flat(self):
        return _flatten(self.trees, self.eta)

    @property
    def base_score(self) -> float:
        return self.f0


def train_forest(
    ds: Dataset,
    n_trees: int,
    max_depth: int | None,
    seed: int,
    weights: np.ndarray | None = None,
) -> ForestModel:
    """Bagged CART with weighted-Gini splits over ceil(sqrt(d)) sampled
    features per node; leaves hold the weighted looted fraction."""
    if n_trees < 1:
        raise ConfigError("forest needs at least 1 tree")
    if max_depth is not None and max_depth < 1:
        raise ConfigError("max_depth must be >= 1 or None")
    if weights is None:
        weights = class_weights(ds.y)
    w_row = weights[ds.y]
    m_feats = math.ceil(math.sqrt(ds.dim))
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng([seed, t])
        boot = rng.integers(0, ds.n, size=ds.n)
        xb = ds.X[boot]
        yb = ds.y[boot]
        wb = w_row[boot]
        w1 = np.where(yb == 1, wb, 0.0)
        w0 = np.where(yb == 0, wb, 0.0)

        def find_split(rows, feats, xb=xb, w1=w1, w0=w0):
            vals = np.ascontiguousarray(xb[np.ix_(rows, feats)])
            return _kernels.split_gini(vals, w1[rows], w0[rows])

        def leaf_value(rows, w1=w1, wb=wb):
            return float(w1[rows].sum() / wb[rows].sum())

        trees.append(
            _grow_tree(xb, np.arange(ds.n), max_depth, m_feats, rng, find_split, leaf_value)
        )
    return ForestModel(
        kind="forest",
        trees=trees,
        weights=np.asarray(weights, dtype=np.float64),
        hyperparams={"n_trees": n_trees, "max_depth": max_depth},
        dim=ds.dim,
        seed=seed,
    )


def train_gbt(
    ds: Dataset,
    eta: float,
    n_rounds: int,
    max_depth: int | None,
    lam: float = 0.0,
    second_order: bool = False,
    seed: int = 0,
    weights: np.ndarray | None = None,
) -> BoostedModel:
    """Functional gradient boosting on the weighted logistic loss.

    First-order mode fits regression trees to residuals (y - p) and applies a
    Newton step per leaf; second-order mode scores splits with the regularized
    gain 0.5*(GL^2/(HL+lam) + GR^2/(HR+lam) - G^2/(H+lam)). Leaves are
    -G/(H+lam) in both modes; the raw score starts at the weighted log-odds.
    """
    if not (0.0 < eta <= 1.0):
        raise ConfigError("eta must be in (0, 1]")
    if n_rounds < 1:
        raise ConfigError("n_rounds must be >= 1")
    if lam < 0:
        raise ConfigError("lam must be >= 0")
    if max_depth is not None and max_depth < 1:
        raise ConfigError("max_depth must be >= 1 or None")
    if weights is None:
        weights = class_weights(ds.y)
    w = weights[ds.y]
    y = ds.y.astype(np.float64)
    f0 = float(np.log(w[ds.y == 1].sum() / w[ds.y == 0].sum()))
    margins = np.full(ds.n, f0)
    all_rows = np.arange(ds.n)
    trees = []
    for _ in range(n_rounds):
        p = _sigmoid(margins)
        grad = w * (p - y)
        hess = w * p * (1.0 - p)

        if second_order:

            def find_split(rows, feats, grad=grad, hess=hess):
                vals = np.ascontiguousarray(ds.X[np.ix_(rows, feats)])
                return _kernels.split_grad(vals, grad[rows], hess[rows], lam)

        else:
            resid = y - p

            def find_split(rows, feats, resid=resid, w=w):
                vals = np.ascontiguousarray(ds.X[np.ix_(rows, feats)])
                return _kernels.split_mse(vals, resid[rows], w[rows])

        def leaf_value(rows, grad=grad, hess=hess):
            return float(-grad[rows].sum() / (hess[rows].sum() + lam))

        row_values = np.zeros(ds.n)
        tree = _grow_tree(
            ds.X, all_rows, max_depth, None, None, find_split, leaf_value, row_values
        )
        trees.append(tree)
        margins = margins + eta * row_values
    return BoostedModel(
        kind="gbt2" if second_order else "gbt",
        trees=trees,
        f0=f0,
        eta=eta,
        lam=lam,
        weights=np.asarray(weights, dtype=np.float64),
        hyperparams={"eta": eta, "n_rounds": n_rounds, "max_depth": max_depth, "lam": lam},
        dim=ds.dim,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Prediction


def raw_margin(model, X: np.ndarray) -> np.ndarray:
    """Raw score: log-odds for logreg/boosting, looted fraction for the forest."""
    X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
    if X.shape[1] != model.dim:
        raise DataError(f"feature width {X.shape[1]} != model width {model.dim}")
    if isinstance(model, LogisticModel):
        return (X - model.feat_mean) / model.feat_std @ model.coef + model.bias
    feature, threshold, left, right, value, offsets = model.flat()
    return model.base_score + _kernels.ensemble_sum(
        feature, threshold, left, right, value, offsets, X
    )


def predict_proba(model, X: np.ndarray) -> np.ndarray:
    margin = raw_margin(model, X)
    if isinstance(model, ForestModel):
        # mean leaf fraction; the scaled summation can overshoot by an ulp
        return np.clip(margin, 0.0, 1.0)
    return _sigmoid(margin)


def train_model(kind: str, ds: Dataset, params: dict, seed: int, weights=None):
    if kind == "logreg":
        return train_logreg(ds, C=params["C"], weights=weights)
    if kind == "forest":
        return train_forest(
            ds, n_trees=params["n_trees"], max_depth=params["max_depth"],
            seed=seed, weights=weights,
        )
    if kind in ("gbt", "gbt2"):
        return train_gbt(
            ds,
            eta=params["eta"],
            n_rounds=params["n_rounds"],
            max_depth=params["max_depth"],
            lam=params.get("lam", 0.0),
            second_order=(kind == "gbt2"),
            seed=seed,
            weights=weights,
        )
    raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")


def validate_grid(kind: str, grid: list[dict]) -> None:
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    if not grid:
        raise ConfigError("hyperparameter grid is empty")
    for point in grid:
        if kind == "logreg":
            if point.get("C", 0) <= 0:
                raise ConfigError(f"bad grid point {point}: C must be > 0")
        elif kind == "forest":
            if point.get("n_trees", 0) < 1:
                raise ConfigError(f"bad grid point {point}: n_trees must be >= 1")
            if point.get("max_depth") is not None and point["max_depth"] < 1:
                raise ConfigError(f"bad grid point {point}: max_depth must be >= 1")
        else:
            if not (0.0 < point.get("eta", 0) <= 1.0):
                raise ConfigError(f"bad grid point {point}: eta must be in (0, 1]")
            if point.get("n_rounds", 0) < 1:
                raise ConfigError(f"bad grid point {point}: n_rounds must be >= 1")
            if point.get("lam", 0.0) < 0:
                raise ConfigError(f"bad grid point {point}: lam must be >= 0")


# ---------------------------------------------------------------------------
# Grid search (inner stratified 3-fold CV, best mean F1, earliest tie wins)


@dataclass
class GridSearchResult:
    best_params: dict
    best_index: int
    model: object
    mean_f1: list[float | None]  # None for skipped points
    skipped: list[dict]


def _stratified_fold_ids(y: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    fold = np.empty(y.size, dtype=np.int64)
    for cls in (0, 1):
        idx = np.nonzero(y == cls)[0]
        rng.shuffle(idx)
        fold[idx] = np.arange(idx.size) % k
    return fold


def grid_search(
    kind: str,
    ds: Dataset,
    grid: list[dict] | None = None,
    k: int = 3,
    seed: int = 0,
) -> GridSearchResult:
    """Pick the grid point with the best mean inner-CV F1 and refit on all rows."""
    if grid is None:
        grid = DEFAULT_GRIDS[kind]
    validate_grid(kind, grid)
    fold = _stratified_fold_ids(ds.y, k, np.random.default_rng([seed, 0x6D1]))
    weights_full = class_weights(ds.y)
    mean_f1: list[float | None] = []
    skipped = []
    for point in grid:
        scores = []
        viable = True
        for f in range(k):
            tr = np.nonzero(fold != f)[0]
            te = np.nonzero(fold == f)[0]
            if len(set(ds.y[tr].tolist())) < 2 or len(set(ds.y[te].tolist())) < 2:
                skipped.append({"params": point, "reason": f"single-class fold {f}"})
                viable = False
                break
            sub = ds.subset(tr)
            model = train_model(kind, sub, point, seed=seed, weights=class_weights(sub.y))
            m = compute_metrics(ds.y[te], predict_proba(model, ds.X[te]))
            scores.append(m.f1)
        mean_f1.append(float(np.mean(scores)) if viable else None)
    best_index = -1
    best_score = -np.inf
    for i, s in enumerate(mean_f1):
        if s is not None and s > best_score:
            best_index, best_score = i, s
    if best_index < 0:
        raise ConfigError("grid search: every grid point was skipped")
    best = grid[best_index]
    model = train_model(kind, ds, best, seed=seed, weights=weights_full)
    return GridSearchResult(
        best_params=best,
        best_index=best_index,
        model=model,
        mean_f1=mean_f1,
        skipped=skipped,
    )


# ---------------------------------------------------------------------------
# Serialization (human-diffable JSON)


def model_to_dict(model, feature_layout: str = "") -> dict:
    out = {
        "kind": model.kind,
        "hyperparams": model.hyperparams,
        "class_weights": model.weights.tolist(),
        "feature_layout": feature_layout,
        "dim": model.dim,
    }
    if isinstance(model, LogisticModel):
        out.update(
            coef=model.coef.tolist(),
            bias=model.bias,
            feat_mean=model.feat_mean.tolist(),
            feat_std=model.feat_std.tolist(),
            meta=model.meta,
        )
        return out
    out["seed"] = model.seed
    if isinstance(model, BoostedModel):
        out.update(f0=model.f0, eta=model.eta, lam=model.lam)
    out["trees"] = [
        {
            "feature": t.feature.tolist(),
            "threshold": t.threshold.tolist(),
            "left": t.left.tolist(),
            "right": t.right.tolist(),
            "value": t.value.tolist(),
            "gain": t.gain.tolist(),
        }
        for t in model.trees
    ]
    return out


def model_from_dict(data: dict):
    kind = data.get("kind")
    if kind == "logreg":
        return LogisticModel(
            kind="logreg",
            coef=np.array(data["coef"]),
            bias=float(data["bias"]),
            feat_mean=np.array(data["feat_mean"]),
            feat_std=np.array(data["feat_std"]),
            weights=np.array(data["class_weights"]),
            hyperparams=data["hyperparams"],
            meta=data.get("meta", {}),
        )
    if kind not in ("forest", "gbt", "gbt2"):
        raise DataError(f"unknown model kind {kind!r} in model file")
    trees = [
        Tree(
            feature=np.array(t["feature"], dtype=np.int32),
            threshold=np.array(t["threshold"], dtype=np.float64),
            left=np.array(t["left"], dtype=np.int32),
            right=np.array(t["right"], dtype=np.int32),
            value=np.array(t["value"], dtype=np.float64),
            gain=np.array(t["gain"], dtype=np.float64),
        )
        for t in data["trees"]
    ]
    common = dict(
        trees=trees,
        weights=np.array(data["class_weights"]),
        hyperparams=data["hyperparams"],
        dim=int(data["dim"]),
        seed=int(data.get("seed", 0)),
    )
    if kind == "forest":
        return ForestModel(kind="forest", **common)
    return BoostedModel(
        kind=kind, f0=float(data["f0"]), eta=float(data["eta"]), lam=float(data["lam"]),
        **common,
    )


def save_model(path, model, feature_layout: str = "") -> None:
    Path(path).write_text(
        json.dumps(model_to_dict(model, feature_layout), sort_keys=True) + "\n"
    )


def load_model(path):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load model {path}: {exc}") from exc
    return model_from_dict(data)
