import numpy as np
import pytest

from lootscan.errors import ConfigError, DataError
from lootscan.metrics import compute_metrics
from lootscan.models import (
    BoostedModel,
    Dataset,
    ForestModel,
    class_weights,
    grid_search,
    load_model,
    model_to_dict,
    predict_proba,
    raw_margin,
    save_model,
    train_forest,
    train_gbt,
    train_logreg,
    validate_grid,
)
from lootscan.models import _sigmoid, _stratified_fold_ids


def ds_from(X, y):
    return Dataset(
        X=np.asarray(X, dtype=float),
        y=np.asarray(y),
        site_ids=tuple(f"r{i}" for i in range(len(y))),
    )


# ---------------------------------------------------------------------------
# class weights


def test_class_weights_balanced():
    assert np.allclose(class_weights(np.array([0, 1] * 10)), [1.0, 1.0])


def test_class_weights_paper_counts():
    y = np.array([1] * 898 + [0] * 1045)
    w = class_weights(y)
    assert w[1] == pytest.approx(1943 / 1796)
    assert w[0] == pytest.approx(1943 / 2090)


def test_class_weights_three_to_one():
    y = np.array([0] * 30 + [1] * 10)
    w = class_weights(y)
    assert w[1] == pytest.approx(2.0)
    assert w[0] == pytest.approx(2.0 / 3.0)


def test_class_weights_single_class():
    with pytest.raises(DataError):
        class_weights(np.zeros(5, dtype=int))


# ---------------------------------------------------------------------------
# logistic regression


def test_logreg_separable_perfect_accuracy(rng):
    X = np.vstack([rng.normal(-3, 0.3, size=(30, 2)), rng.normal(3, 0.3, size=(30, 2))])
    y = np.array([0] * 30 + [1] * 30)
    model = train_logreg(ds_from(X, y), C=1e6)
    pred = predict_proba(model, X) >= 0.5
    assert np.array_equal(pred.astype(int), y)


def test_logreg_all_zero_features_predicts_half():
    for y in (np.array([0, 1] * 20), np.array([0] * 30 + [1] * 10)):
        model = train_logreg(ds_from(np.zeros((y.size, 3)), y), C=1.0)
        p = predict_proba(model, np.zeros((4, 3)))
        # inverse-frequency weighting balances the classes, so the weighted
        # prior is exactly 1/2 regardless of the raw imbalance
        assert np.allclose(p, 0.5, atol=1e-9)


def _golden(fn, lo, hi, tol=1e-12):
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - phi * (b - a), a + phi * (b - a)
    fc, fd = fn(c), fn(d)
    while abs(b - a) > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - phi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + phi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def test_logreg_matches_golden_section_oracle():
    X = np.array([[-1.0]] * 50 + [[1.0]] * 50)
    y = np.array([0] * 50 + [1] * 50)
    C = 1.0

    def loss(wb):
        w, b = wb
        margin = X[:, 0] * w + b
        return float(
            np.sum(np.logaddexp(0.0, (1 - 2 * y) * margin)) + w * w / (2 * C)
        )

    def outer(w):
        return loss((w, _golden(lambda b: loss((w, b)), -4.0, 4.0)))

    w_star = _golden(outer, 0.0, 8.0)
    b_star = _golden(lambda b: loss((w_star, b)), -4.0, 4.0)
    model = train_logreg(ds_from(X, y), C=C, weights=np.array([1.0, 1.0]))
    # X is already standardized (mean 0, std 1) so coefficients are comparable
    assert model.coef[0] == pytest.approx(w_star, abs=1e-6)
    assert model.bias == pytest.approx(b_star, abs=1e-6)


def test_logreg_rejects_bad_c():
    with pytest.raises(ConfigError):
        train_logreg(ds_from(np.ones((4, 1)), [0, 1, 0, 1]), C=0.0)


def test_logreg_invariant_to_affine_feature_scaling(rng):
    X = rng.normal(size=(50, 3))
    y = (X[:, 0] - X[:, 2] > 0).astype(int)
    a = train_logreg(ds_from(X, y), C=1.0)
    b = train_logreg(ds_from(X * np.array([10.0, 0.5, 200.0]) + 7.0, y), C=1.0)
    # standardization lives inside the model, so probabilities agree
    pa = predict_proba(a, X)
    pb = predict_proba(b, X * np.array([10.0, 0.5, 200.0]) + 7.0)
    assert np.allclose(pa, pb, atol=1e-8)


# ---------------------------------------------------------------------------
# random forest


def test_forest_constant_labels_single_leaf():
    X = np.arange(20, dtype=float).reshape(-1, 1)
    y = np.ones(20, dtype=int)
    with pytest.raises(DataError):
        train_forest(ds_from(X, y), n_trees=3, max_depth=None, seed=0)  # needs both classes for weights
    model = train_forest(
        ds_from(X, y), n_trees=3, max_depth=None, seed=0, weights=np.array([1.0, 1.0])
    )
    assert all(t.n_nodes == 1 for t in model.trees)
    assert np.all(predict_proba(model, X) == 1.0)


def _xor_dataset(reps=50):
    corners = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    X = np.repeat(corners, reps, axis=0)
    y = np.repeat([0, 1, 1, 0], reps)
    return X, y


def _best_stump_accuracy(X, y):
    """Brute-force every depth-1 stump (feature, midpoint, leaf labels)."""
    best = 0.0
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        for a, b in zip(vals, vals[1:]):
            thr = 0.5 * (a + b)
            left = X[:, j] <= thr
            for ll in (0, 1):
                pred = np.where(left, ll, 1 - ll)
                best = max(best, float((pred == y).mean()))
    return best


def test_xor_depth1_bounded_by_stump_oracle():
    X, y = _xor_dataset()
    assert _best_stump_accuracy(X, y) <= 0.75
    model = train_forest(ds_from(X, y), n_trees=50, max_depth=1, seed=3)
    acc = float(((predict_proba(model, X) >= 0.5).astype(int) == y).mean())
    assert acc <= 0.75


def test_xor_depth2_many_trees_learns():
    X, y = _xor_dataset()
    model = train_forest(ds_from(X, y), n_trees=100, max_depth=2, seed=3)
    acc = float(((predict_proba(model, X) >= 0.5).astype(int) == y).mean())
    assert acc >= 0.95


def test_forest_seed_determinism(rng):
    X = rng.normal(size=(40, 5))
    y = (X[:, 0] > 0).astype(int)
    a = train_forest(ds_from(X, y), n_trees=7, max_depth=4, seed=11)
    b = train_forest(ds_from(X, y), n_trees=7, max_depth=4, seed=11)
    assert model_to_dict(a) == model_to_dict(b)
    c = train_forest(ds_from(X, y), n_trees=7, max_depth=4, seed=12)
    assert model_to_dict(a) != model_to_dict(c)


def test_forest_prediction_is_mean_of_trees(rng):
    X = rng.normal(size=(60, 3))
    y = (X[:, 1] > 0.2).astype(int)
    model = train_forest(ds_from(X, y), n_trees=5, max_depth=3, seed=1)
    full = predict_proba(model, X)
    for drop in range(5):
        sub = ForestModel(
            kind="forest",
            trees=[t for i, t in enumerate(model.trees) if i != drop],
            weights=model.weights,
            hyperparams=model.hyperparams,
            dim=model.dim,
            seed=model.seed,
        )
        assert np.all(np.abs(predict_proba(sub, X) - full) <= 1.0 / 5 + 1e-12)


# ---------------------------------------------------------------------------
# gradient boosting


def test_gbt_prior_initialization():
    X = np.zeros((40, 2))
    y = np.array([1] * 30 + [0] * 10)
    # unit weights: the raw prior is the class log-odds and eta ~ 0 keeps it
    model = train_gbt(
        ds_from(X, y), eta=1e-12, n_rounds=1, max_depth=2,
        weights=np.array([1.0, 1.0]),
    )
    p = predict_proba(model, X[:1])
    assert p[0] == pytest.approx(0.75, abs=1e-9)  # class prior 30/40
    with pytest.raises(ConfigError):
        train_gbt(ds_from(X, y), eta=0.1, n_rounds=0, max_depth=2)


def test_gbt_training_loss_non_increasing(rng):
    X = rng.normal(size=(80, 4))
    y = ((X[:, 0] + 0.5 * X[:, 1] + rng.normal(0, 0.3, 80)) > 0).astype(int)
    ds = ds_from(X, y)
    w = class_weights(y)[y]
    for second in (False, True):
        model = train_gbt(
            ds, eta=0.2, n_rounds=15, max_depth=2, lam=1.0, second_order=second
        )
        margins = np.full(80, model.f0)
        losses = []
        for tree in model.trees:
            sub = BoostedModel(
                kind=model.kind, trees=[tree], f0=0.0, eta=model.eta, lam=model.lam,
                weights=model.weights, hyperparams=model.hyperparams,
                dim=model.dim, seed=model.seed,
            )
            margins = margins + raw_margin(sub, X)
            losses.append(float(w @ np.logaddexp(0.0, (1 - 2 * y) * margins)))
        assert all(a >= b - 1e-9 for a, b in zip(losses, losses[1:]))


def test_gbt2_first_tree_on_step_data():
    X = np.repeat(np.array([[0.0], [1.0], [2.0], [3.0]]), 25, axis=0)
    y = np.repeat([0, 0, 1, 1], 25)
    lam = 1.0
    model = train_gbt(
        ds_from(X, y), eta=0.1, n_rounds=1, max_depth=1, lam=lam,
        second_order=True, weights=np.array([1.0, 1.0]),
    )
    tree = model.trees[0]
    assert tree.feature[0] == 0
    assert tree.threshold[0] == pytest.approx(1.5)
    # G_left = 50 * (0.5 - 0) = 25, H_left = 50 * 0.25 = 12.5 (same on the right
    # with opposite sign), so both leaves are -G/(H+lam) = +/- 25/13.5
    expect = 25.0 / 13.5
    leaves = sorted(tree.value[tree.feature == -1])
    assert leaves[0] == pytest.approx(-expect, abs=1e-12)
    assert leaves[1] == pytest.approx(expect, abs=1e-12)


def test_gbt2_leaf_values_satisfy_closed_form(rng):
    X = rng.normal(size=(50, 3))
    y = (X[:, 0] > 0).astype(int)
    ds = ds_from(X, y)
    w = class_weights(y)[y]
    lam = 0.7
    model = train_gbt(ds, eta=0.3, n_rounds=4, max_depth=2, lam=lam, second_order=True)
    margins = np.full(50, model.f0)
    for tree in model.trees:
        p = _sigmoid(margins)
        grad = w * (p - y)
        hess = w * p * (1 - p)
        # leaf assignment by direct traversal
        leaf_of = np.empty(50, dtype=int)
        for i in range(50):
            node = 0
            while tree.feature[node] >= 0:
                node = tree.left[node] if X[i, tree.feature[node]] <= tree.threshold[node] else tree.right[node]
            leaf_of[i] = node
        for leaf in np.unique(leaf_of):
            rows = leaf_of == leaf
            expect = -grad[rows].sum() / (hess[rows].sum() + lam)
            assert tree.value[leaf] == pytest.approx(expect, abs=1e-10)
        margins = margins + model.eta * tree.value[leaf_of]


def test_predict_width_mismatch(rng):
    X = rng.normal(size=(30, 4))
    y = (X[:, 0] > 0).astype(int)
    model = train_forest(ds_from(X, y), n_trees=3, max_depth=2, seed=0)
    with pytest.raises(DataError):
        predict_proba(model, np.zeros((2, 5)))


# ---------------------------------------------------------------------------
# grid search


def test_grid_search_singleton(rng):
    X = rng.normal(size=(30, 2))
    y = (X[:, 0] > 0).astype(int)
    res = grid_search("forest", ds_from(X, y), [{"n_trees": 5, "max_depth": 2}], seed=0)
    assert res.best_params == {"n_trees": 5, "max_depth": 2}
    assert res.skipped == []


def test_grid_rejects_degenerate_points():
    with pytest.raises(ConfigError):
        validate_grid("forest", [{"n_trees": 0, "max_depth": 2}])
    with pytest.raises(ConfigError):
        validate_grid("gbt", [{"eta": 0.0, "n_rounds": 10, "max_depth": 2}])
    with pytest.raises(ConfigError):
        validate_grid("logreg", [])


def test_grid_search_matches_exhaustive_oracle(rng):
    X = np.vstack(
        [rng.normal(-0.7, 1.0, size=(40, 2)), rng.normal(0.7, 1.0, size=(40, 2))]
    )
    y = np.array([0] * 40 + [1] * 40)
    ds = ds_from(X, y)
    grid = [{"C": 0.01}, {"C": 10.0}]
    seed = 4
    res = grid_search("logreg", ds, grid, k=3, seed=seed)
    # independent re-evaluation of every point over the same fold assignment
    fold = _stratified_fold_ids(ds.y, 3, np.random.default_rng([seed, 0x6D1]))
    means = []
    for point in grid:
        f1s = []
        for f in range(3):
            tr, te = np.nonzero(fold != f)[0], np.nonzero(fold == f)[0]
            sub = ds.subset(tr)
            model = train_logreg(sub, C=point["C"], weights=class_weights(sub.y))
            f1s.append(compute_metrics(ds.y[te], predict_proba(model, ds.X[te])).f1)
        means.append(np.mean(f1s))
    assert res.best_index == int(np.argmax(means))
    assert res.mean_f1 == pytest.approx(means)


def test_grid_search_tie_prefers_earlier_entry(rng):
    X = rng.normal(size=(24, 2))
    y = np.array([0, 1] * 12)
    ds = ds_from(X, y)
    grid = [{"n_trees": 3, "max_depth": 1}, {"n_trees": 3, "max_depth": 1}]
    res = grid_search("forest", ds, grid, seed=0)
    assert res.best_index == 0


# ---------------------------------------------------------------------------
# serialization


def test_model_json_roundtrip(tmp_path, rng):
    X = rng.normal(size=(40, 3))
    y = (X[:, 2] > 0).astype(int)
    Xq = rng.normal(size=(10, 3))
    for model in (
        train_logreg(ds_from(X, y), C=0.5),
        train_forest(ds_from(X, y), n_trees=4, max_depth=3, seed=2),
        train_gbt(ds_from(X, y), eta=0.2, n_rounds=5, max_depth=2, lam=1.0, second_order=True),
    ):
        path = tmp_path / f"{model.kind}.json"
        save_model(path, model, feature_layout="test-v1")
        loaded = load_model(path)
        assert np.array_equal(predict_proba(loaded, Xq), predict_proba(model, Xq))
        # byte-stable on re-save
        path2 = tmp_path / f"{model.kind}2.json"
        save_model(path2, loaded, feature_layout="test-v1")
        assert path.read_bytes() == path2.read_bytes()
