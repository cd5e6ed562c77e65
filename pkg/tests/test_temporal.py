import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lootscan.errors import DataError
from lootscan.temporal import (
    MonthlySequence,
    agg_concat,
    agg_mean,
    agg_median,
    agg_trend,
    load_pca,
    pca_fit,
    pca_transform,
    save_pca,
)


def seq(vectors, months=None):
    vectors = np.asarray(vectors, dtype=float)
    months = months or tuple(f"2023_{m + 1:02d}" for m in range(vectors.shape[0]))
    return MonthlySequence(site_id="s", months=tuple(months), vectors=vectors)


def test_identical_vectors():
    v = np.array([3.0, -1.0, 2.0])
    s = seq(np.tile(v, (4, 1)))
    assert np.array_equal(agg_mean(s), v)
    assert np.array_equal(agg_median(s), v)
    assert np.array_equal(agg_concat(s), np.tile(v, 4))


def test_single_month_degenerate():
    v = np.array([[1.0, 2.0]])
    s = seq(v)
    assert np.array_equal(agg_mean(s), v[0])
    assert np.array_equal(agg_median(s), v[0])
    assert np.array_equal(agg_concat(s), v[0])
    with pytest.raises(DataError):
        agg_trend(s)


def test_mean_median_arithmetic():
    s = seq([[1.0], [2.0], [4.0]])
    assert agg_mean(s)[0] == pytest.approx(7.0 / 3.0)
    assert agg_median(s)[0] == 2.0


def test_lower_median_for_even_t():
    s = seq([[1.0], [2.0], [3.0], [10.0]])
    assert agg_median(s)[0] == 2.0  # lower of {2, 3}


def test_trend_constant_and_linear():
    assert np.allclose(agg_trend(seq(np.ones((5, 3)))), 0.0)
    c = 0.75
    s = seq(np.arange(6, dtype=float)[:, None] * c)
    assert agg_trend(s)[0] == pytest.approx(c)


def test_trend_closed_form():
    s = seq([[0.0], [1.0], [1.0]])
    assert agg_trend(s)[0] == pytest.approx(0.5)


@given(st.lists(st.integers(0, 1000), min_size=2, max_size=8, unique=True))
@settings(max_examples=50, deadline=None)
def test_mean_median_permutation_invariant(values):
    rng = np.random.default_rng(1)
    block = np.array(values, dtype=float)[:, None] * np.array([[1.0, -2.0]])
    months = tuple(f"20{17 + i // 12:02d}_{i % 12 + 1:02d}" for i in range(len(values)))
    s1 = seq(block, months)
    perm = rng.permutation(len(values))
    s2 = seq(block[perm], months)
    assert np.array_equal(agg_mean(s1), agg_mean(s2))
    assert np.array_equal(agg_median(s1), agg_median(s2))


def test_concat_and_trend_are_order_sensitive():
    a = seq([[0.0], [1.0], [5.0]])
    b = seq([[5.0], [1.0], [0.0]])
    assert not np.array_equal(agg_concat(a), agg_concat(b))
    assert agg_trend(a)[0] != agg_trend(b)[0]


def test_months_strictly_increasing():
    with pytest.raises(DataError):
        seq([[1.0], [2.0]], months=("2023_05", "2023_05"))


# ---------------------------------------------------------------------------
# PCA


def test_rank1_data_single_component():
    base = np.array([1.0, 2.0])
    rows = np.outer([1.0, 2.0, 3.0], base)
    model = pca_fit(rows)
    assert model.k == 1
    assert model.ratios[0] == pytest.approx(1.0)
    # reconstruction of a training row is exact for rank-1 data
    z = pca_transform(model, rows[1])
    recon = model.mean + z @ model.components
    assert np.allclose(recon, rows[1], atol=1e-9)


def test_cap_rule_when_width_exceeds_rows(rng):
    rows = rng.normal(size=(21, 40))
    assert pca_fit(rows).k == 20  # min(1024, 40, 21 - 1)
    assert pca_fit(rows, cap=8).k == 8


def test_matches_covariance_eigendecomposition(rng):
    rows = rng.normal(size=(10, 4))
    model = pca_fit(rows)
    cov = np.cov(rows.T, bias=True)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    for i in range(model.k):
        got = model.components[i]
        expect = v[:, i]
        if np.dot(got, expect) < 0:
            expect = -expect
        assert np.allclose(got, expect, atol=1e-8)
        assert model.ratios[i] == pytest.approx(w[i] / w.sum(), abs=1e-10)


def test_transform_of_mean_is_zero(rng):
    rows = rng.normal(size=(12, 5))
    model = pca_fit(rows)
    assert np.allclose(pca_transform(model, model.mean), 0.0, atol=1e-12)


def test_transform_matches_dot_product_oracle(rng):
    rows = rng.normal(size=(15, 6))
    model = pca_fit(rows)
    held_out = rng.normal(size=6)
    z = pca_transform(model, held_out)
    expect = np.array(
        [np.dot(held_out - model.mean, model.components[i]) for i in range(model.k)]
    )
    assert np.allclose(z, expect, atol=1e-12)


def test_reconstruction_error_non_increasing_in_k(rng):
    rows = rng.normal(size=(30, 8))
    model = pca_fit(rows, cap=8)
    errs = []
    z = pca_transform(model, rows)
    for k in range(1, model.k + 1):
        recon = model.mean + z[:, :k] @ model.components[:k]
        errs.append(float(((rows - recon) ** 2).sum()))
    assert all(a >= b - 1e-9 for a, b in zip(errs, errs[1:]))


def test_pca_error_cases(rng):
    with pytest.raises(DataError):
        pca_fit(np.ones((1, 4)))
    with pytest.raises(DataError):
        pca_fit(np.ones((5, 4)))  # zero variance


def test_fingerprint_tracks_training_rows_only(rng):
    rows = rng.normal(size=(8, 3))
    a = pca_fit(rows).fit_fingerprint
    b = pca_fit(rows.copy()).fit_fingerprint
    c = pca_fit(rows + 1e-9).fit_fingerprint
    assert a == b
    assert a != c


def test_pca_save_load_roundtrip(tmp_path, rng):
    rows = rng.normal(size=(9, 5))
    model = pca_fit(rows)
    save_pca(tmp_path / "pca", model)
    loaded = load_pca(tmp_path / "pca")
    assert loaded.k == model.k
    assert np.array_equal(loaded.components, model.components)
    assert loaded.fit_fingerprint == model.fit_fingerprint
