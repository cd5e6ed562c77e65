"""Collapse per-month feature sequences into one vector per site.

Stateless reducers (mean, lower-median, concatenation, least-squares slope)
plus PCA compression fit strictly on training rows.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError

PCA_CAP = 1024
PCA_VARIANCE_TARGET = 0.99


@dataclass(frozen=True)
class MonthlySequence:
    site_id: str
    months: tuple[str, ...]
    vectors: np.ndarray  # (T, d)

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise DataError(f"sequence needs a (T, d) block, got shape {v.shape}")
        if len(self.months) != v.shape[0]:
            raise DataError("months and vectors disagree on T")
        if any(a >= b for a, b in zip(self.months, self.months[1:])):
            raise DataError("months must be strictly increasing")
        object.__setattr__(self, "vectors", v)


def agg_mean(seq: MonthlySequence) -> np.ndarray:
    return seq.vectors.mean(axis=0)


def agg_median(seq: MonthlySequence) -> np.ndarray:
    """Element-wise lower median (the (T-1)//2-th order statistic)."""
    return np.sort(seq.vectors, axis=0)[(seq.vectors.shape[0] - 1) // 2]


def agg_concat(seq: MonthlySequence) -> np.ndarray:
    return seq.vectors.reshape(-1)


def agg_trend(seq: MonthlySequence) -> np.ndarray:
    """Per-dimension OLS slope against month index 0..T-1."""
    t_count = seq.vectors.shape[0]
    if t_count < 2:
        raise DataError("slope aggregation needs at least 2 months")
    t = np.arange(t_count, dtype=np.float64)
    tc = t - t.mean()
    return tc @ (seq.vectors - seq.vectors.mean(axis=0)) / (tc @ tc)


AGGREGATORS = {
    "mean": agg_mean,
    "median": agg_median,
    "concat": agg_concat,
    "trend": agg_trend,
}


# ---------------------------------------------------------------------------
# PCA on concatenated sequences


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (D,)
    components: np.ndarray  # (k, D), rows orthonormal
    ratios: np.ndarray  # (k,) explained-variance ratios, non-increasing
    fit_fingerprint: str

    def __post_init__(self):
        comp = np.asarray(self.components, dtype=np.float64)
        gram = comp @ comp.T
        if not np.allclose(gram, np.eye(comp.shape[0]), atol=1e-9):
            raise DataError("PCA components are not orthonormal")
        r = np.asarray(self.ratios, dtype=np.float64)
        if np.any(r < -1e-12) or np.any(r > 1.0 + 1e-9) or r.sum() > 1.0 + 1e-9:
            raise DataError("explained-variance ratios out of range")
        if np.any(np.diff(r) > 1e-12):
            raise DataError("explained-variance ratios must be non-increasing")

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]


def _fingerprint(rows: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(rows.shape).encode())
    h.update(np.ascontiguousarray(rows, dtype=np.float64).tobytes())
    return h.hexdigest()


def pca_fit(rows: np.ndarray, n_train: int | None = None, cap: int = PCA_CAP) -> PcaModel:
    """Centered SVD on training rows.

    When input width exceeds n_train the component count is min(cap, D,
    n_train - 1); otherwise the smallest count explaining >= 99% variance.
    Each component's largest-magnitude entry is flipped positive for
    cross-run stability.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] < 2:
        raise DataError("PCA needs at least 2 training rows")
    if n_train is None:
        n_train = rows.shape[0]
    d_in = rows.shape[1]
    mean = rows.mean(axis=0)
    centered = rows - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    total = float((s * s).sum())
    if total <= 0.0:
        raise DataError("PCA input has zero variance")
    ratios_full = s * s / total
    if d_in > n_train:
        k = min(cap, d_in, n_train - 1)
    else:
        cum = np.cumsum(ratios_full)
        k = int(np.searchsorted(cum, PCA_VARIANCE_TARGET - 1e-12) + 1)
        k = min(k, d_in, n_train - 1)
    k = max(1, min(k, vt.shape[0]))
    comp = vt[:k].copy()
    for i in range(k):
        j = int(np.argmax(np.abs(comp[i])))
        if comp[i, j] < 0:
            comp[i] = -comp[i]
    return PcaModel(
        mean=mean,
        components=comp,
        ratios=ratios_full[:k].copy(),
        fit_fingerprint=_fingerprint(rows),
    )


def pca_transform(model: PcaModel, row: np.ndarray) -> np.ndarray:
    row = np.asarray(row, dtype=np.float64)
    if row.shape[-1] != model.input_dim:
        raise DataError(
            f"row width {row.shape[-1]} != PCA input width {model.input_dim}"
        )
    return (row - model.mean) @ model.components.T


def save_pca(path_prefix, model: PcaModel) -> None:
    """Binary blob plus a small JSON descriptor."""
    prefix = Path(path_prefix)
    np.savez(
        prefix.with_suffix(".npz"),
        mean=model.mean,
        components=model.components,
        ratios=model.ratios,
    )
    desc = {
        "k": model.k,
        "input_dim": model.input_dim,
        "fingerprint": model.fit_fingerprint,
    }
    prefix.with_suffix(".json").write_text(json.dumps(desc, sort_keys=True) + "\n")


def load_pca(path_prefix) -> PcaModel:
    prefix = Path(path_prefix)
    try:
        blob = np.load(prefix.with_suffix(".npz"))
        desc = json.loads(prefix.with_suffix(".json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot load PCA model at {prefix}: {exc}") from exc
    model = PcaModel(
        mean=blob["mean"],
        components=blob["components"],
        ratios=blob["ratios"],
        fit_fingerprint=desc["fingerprint"],
    )
    if model.k != desc["k"] or model.input_dim != desc["input_dim"]:
        raise DataError(f"{prefix}: descriptor disagrees with blob shapes")
    return model
