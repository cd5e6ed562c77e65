"""Site-level stratified splitting, k-fold cross-validation, and experiment
orchestration with a hard train/test leakage guard."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .embeddings import FAMILY_DIMS, align_series, load_embeddings
from .errors import ConfigError, DataError, InvariantError
from .features import (
    FEATURE_NAMES,
    LAYOUT_VERSION,
    FeatureTable,
    extract_handcrafted,
)
from .metrics import Metrics, compute_metrics
from .models import (
    Dataset,
    MODEL_KINDS,
    grid_search,
    predict_proba,
)
from .raster import (
    Mask,
    SiteManifest,
    dilate_to_min_area,
    is_month_tag,
    load_manifest,
    load_mask,
    load_patch,
    month_range,
)
from .temporal import AGGREGATORS, MonthlySequence, pca_fit, pca_transform

DEFAULT_RATIOS = (0.70, 0.10, 0.20)
AGGREGATION_NAMES = tuple(AGGREGATORS) + ("pca",)
DILATION_MODES = ("off", "train_median")


@dataclass(frozen=True)
class FoldSplit:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[FoldSplit, ...]
    seed: int
    k: int


def _exact_ratios(ratios) -> list[Fraction]:
    fracs = [Fraction(r).limit_denominator(10**6) for r in ratios]
    if sum(fracs) != 1:
        raise ConfigError(f"split ratios {ratios} do not sum to 1")
    return fracs


def _allocate(class_sizes: list[int], ratios) -> list[list[int]]:
    """Largest-remainder apportionment per class.

    Leftover seats go to the largest remainder; ties prefer the smaller-ratio
    split, then the split currently holding fewer sites overall, then split
    order. The cross-class count term is what lets two identical classes
    round in opposite directions instead of doubling the same choice.
    """
    fracs = _exact_ratios(ratios)
    n_splits = len(fracs)
    totals = [0] * n_splits
    out = []
    for n_c in class_sizes:
        exact = [n_c * f for f in fracs]
        counts = [int(e) for e in exact]  # Fraction floor via int()
        for s in range(n_splits):
            totals[s] += counts[s]
        taken: set[int] = set()
        for _ in range(n_c - sum(counts)):
            pick = min(
                (s for s in range(n_splits) if s not in taken),
                key=lambda s: (-(exact[s] - int(exact[s])), fracs[s], totals[s], s),
            )
            counts[pick] += 1
            totals[pick] += 1
            taken.add(pick)
        out.append(counts)
    return out


def _ids_by_class(manifest: SiteManifest) -> list[list[str]]:
    by_class: list[list[str]] = [[], []]
    for e in manifest.entries:
        by_class[e.label_int].append(e.site_id)
    return by_class


def stratified_split(
    manifest: SiteManifest, ratios=DEFAULT_RATIOS, seed: int = 0
) -> FoldSplit:
    """One seeded 70/10/20-style split: per-class shuffle, then largest-
    remainder slicing into train/validation/test."""
    if len(ratios) != 3:
        raise ConfigError("expected exactly (train, val, test) ratios")
    by_class = _ids_by_class(manifest)
    for cls, ids in enumerate(by_class):
        if len(ids) < 5:
            raise DataError(f"class {cls} has {len(ids)} sites; need at least 5")
    counts = _allocate([len(ids) for ids in by_class], ratios)
    rng = np.random.default_rng(seed)
    parts: list[list[str]] = [[], [], []]
    for ids, (n_tr, n_va, n_te) in zip(by_class, counts):
        ids = list(ids)
        rng.shuffle(ids)
        parts[0] += ids[:n_tr]
        parts[1] += ids[n_tr : n_tr + n_va]
        parts[2] += ids[n_tr + n_va : n_tr + n_va + n_te]
    return FoldSplit(train=tuple(parts[0]), val=tuple(parts[1]), test=tuple(parts[2]))


def resampled_splits(
    manifest: SiteManifest, k: int = 5, seed: int = 0, ratios=DEFAULT_RATIOS
) -> SplitPlan:
    """k independent seeded 70/10/20-style re-splits (test sets may overlap),
    the alternative to the default rotating k-fold."""
    folds = tuple(
        stratified_split(manifest, ratios, seed=seed * 31 + f) for f in range(k)
    )
    return SplitPlan(folds=folds, seed=seed, k=k)


def stratified_kfold(manifest: SiteManifest, k: int = 5, seed: int = 0) -> SplitPlan:
    """Rotating k-fold: per-class seeded shuffle and round-robin test
    assignment; each fold's remainder re-splits 7:1 into train/validation."""
    if k < 2:
        raise ConfigError("k-fold needs k >= 2")
    by_class = _ids_by_class(manifest)
    for cls, ids in enumerate(by_class):
        if len(ids) < k:
            raise DataError(f"class {cls} has {len(ids)} sites; need at least {k}")
    rng = np.random.default_rng([seed, 0])
    assignment: list[list[list[str]]] = [[[] for _ in range(k)], [[] for _ in range(k)]]
    for cls, ids in enumerate(by_class):
        ids = list(ids)
        rng.shuffle(ids)
        for j, sid in enumerate(ids):
            assignment[cls][j % k].append(sid)
    folds = []
    for f in range(k):
        test = tuple(assignment[0][f] + assignment[1][f])
        rest_by_class = [
            [sid for j in range(k) if j != f for sid in assignment[cls][j]]
            for cls in (0, 1)
        ]
        counts = _allocate(
            [len(ids) for ids in rest_by_class], (Fraction(7, 8), Fraction(1, 8))
        )
        rng_f = np.random.default_rng([seed, 1, f])
        train: list[str] = []
        val: list[str] = []
        for ids, (n_tr, n_va) in zip(rest_by_class, counts):
            ids = list(ids)
            rng_f.shuffle(ids)
            train += ids[:n_tr]
            val += ids[n_tr : n_tr + n_va]
        folds.append(FoldSplit(train=tuple(train), val=tuple(val), test=test))
    return SplitPlan(folds=tuple(folds), seed=seed, k=k)


# ---------------------------------------------------------------------------
# Feature acquisition


def _all_ones_mask(patch) -> Mask:
    return Mask(values=np.ones((patch.height, patch.width), dtype=np.uint8),
                site_id=patch.site_id)


def extract_feature_table(
    manifest: SiteManifest,
    months: list[str],
    masked: bool = True,
    mask_overrides: dict[str, Mask] | None = None,
    site_ids: list[str] | None = None,
) -> FeatureTable:
    """Run the handcrafted extractor for every (site, month) on disk."""
    table = FeatureTable(dim=len(FEATURE_NAMES), rows={})
    entries = manifest.entries
    if site_ids is not None:
        wanted = set(site_ids)
        entries = tuple(e for e in entries if e.site_id in wanted)
    for e in entries:
        missing = [m for m in months if m not in e.months]
        if missing:
            raise DataError(f"site {e.site_id}: no patch for months {missing}")
        mask = None
        if masked:
            if mask_overrides and e.site_id in mask_overrides:
                mask = mask_overrides[e.site_id]
            else:
                mask = load_mask(e.mask_path, e.site_id)
        for m in months:
            patch = load_patch(e.patch_path(m), e.site_id, m)
            use = mask if masked else _all_ones_mask(patch)
            vec = extract_handcrafted(patch, use)
            table.add(e.site_id, m, vec.values)
    return table


# ---------------------------------------------------------------------------
# Run configuration


@dataclass(frozen=True)
class RunConfig:
    manifest_path: Path
    months: tuple[str, ...]
    seed: int
    feature_source: str = "handcrafted"  # or a path to an embeddings CSV
    family: str | None = None
    masked: bool = True
    mask_dilation: str = "off"
    aggregation: str = "mean"
    model_kind: str = "forest"
    grid: tuple | None = None  # None -> DEFAULT_GRIDS[model_kind]
    folds: int = 5
    split_mode: str = "kfold"  # or "resample": k independent 70/10/20 splits
    jobs: int = 1

    def __post_init__(self):
        if self.aggregation not in AGGREGATION_NAMES:
            raise ConfigError(
                f"unknown aggregation {self.aggregation!r}; expected {AGGREGATION_NAMES}"
            )
        if self.split_mode not in ("kfold", "resample"):
            raise ConfigError(f"unknown split_mode {self.split_mode!r}")
        if self.model_kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if self.mask_dilation not in DILATION_MODES:
            raise ConfigError(f"unknown mask_dilation {self.mask_dilation!r}")
        if not self.months or any(not is_month_tag(m) for m in self.months):
            raise ConfigError(f"bad months list {self.months}")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if not isinstance(self.seed, int):
            raise ConfigError("an integer seed is required")
        if self.feature_source != "handcrafted":
            if self.family not in FAMILY_DIMS:
                raise ConfigError(
                    f"embedding sources need a known family, got {self.family!r}"
                )
            if self.mask_dilation != "off":
                raise ConfigError("mask dilation requires handcrafted features")
        if self.mask_dilation != "off" and not self.masked:
            raise ConfigError("mask dilation requires masked extraction")

    @property
    def feature_label(self) -> str:
        return "handcrafted" if self.feature_source == "handcrafted" else self.family

    def echo(self) -> dict:
        return {
            "manifest": str(self.manifest_path),
            "feature": self.feature_label,
            "feature_source": str(self.feature_source),
            "masked": self.masked,
            "mask_dilation": self.mask_dilation,
            "months": list(self.months),
            "aggregation": self.aggregation,
            "model": self.model_kind,
            "grid": [dict(g) for g in self.grid] if self.grid else "default",
            "folds": self.folds,
            "split_mode": self.split_mode,
            "seed": self.seed,
        }


def parse_months(value) -> tuple[str, ...]:
    """Accept a list of YYYY_MM tags or a 'YYYY_MM..YYYY_MM' range string."""
    if isinstance(value, str):
        if ".." in value:
            first, last = value.split("..", 1)
            return tuple(month_range(first, last))
        value = [value]
    months = tuple(value)
    if not months or any(not is_month_tag(m) for m in months):
        raise ConfigError(f"bad months value {value!r}")
    if len(set(months)) != len(months):
        raise ConfigError("duplicate months in the requested window")
    return tuple(sorted(months))


def config_from_dict(data: dict, base_dir: Path | None = None) -> RunConfig:
    base = Path(base_dir) if base_dir else Path(".")
    try:
        months = parse_months(data["months"])
        manifest_path = base / data["manifest"]
        seed = data["seed"]
    except KeyError as exc:
        raise ConfigError(f"config missing required key {exc}") from exc
    source = data.get("features", "handcrafted")
    family = data.get("family")
    if source != "handcrafted":
        source = str(base / source)
    grid = data.get("grid")
    return RunConfig(
        manifest_path=manifest_path,
        months=months,
        seed=seed,
        feature_source=source,
        family=family,
        masked=bool(data.get("masked", True)),
        mask_dilation=data.get("mask_dilation", "off"),
        aggregation=data.get("aggregation", "mean"),
        model_kind=data.get("model", "forest"),
        grid=tuple(grid) if grid else None,
        folds=int(data.get("folds", 5)),
        split_mode=data.get("split_mode", "kfold"),
        jobs=int(data.get("jobs", 1)),
    )


# ---------------------------------------------------------------------------
# Experiment runner


@dataclass
class FoldResult:
    fold: int
    n_train: int
    n_val: int
    n_test: int
    metrics: Metrics
    grid_winner: dict
    grid_mean_f1: list
    pca_fingerprint: str | None = None
    pca_k: int | None = None
    model: object = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "fold": self.fold,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "n_test": self.n_test,
            "metrics": self.metrics.as_dict(),
            "grid_winner": self.grid_winner,
            "grid_mean_f1": self.grid_mean_f1,
            "pca_fingerprint": self.pca_fingerprint,
            "pca_k": self.pca_k,
        }


METRIC_FIELDS = ("accuracy", "precision", "recall", "f1", "auroc")


def summarize_folds(folds: list[FoldResult]) -> dict:
    """Mean and population std per metric; AUROC averages over defined folds."""
    out = {}
    for name in METRIC_FIELDS:
        vals = [getattr(f.metrics, name) for f in folds]
        defined = [v for v in vals if v is not None]
        if defined:
            out[name] = {
                "mean": float(np.mean(defined)),
                "std": float(np.std(defined)),
                "n_defined": len(defined),
            }
        else:
            out[name] = {"mean": None, "std": None, "n_defined": 0}
    return out


@dataclass
class EvalReport:
    config: dict
    folds: list[FoldResult]
    summary: dict

    def as_dict(self) -> dict:
        return {
            "config": self.config,
            "folds": [f.as_dict() for f in self.folds],
            "summary": self.summary,
            "std_convention": "population std across folds",
        }


def _guard_fit(ids, forbidden: frozenset, what: str) -> None:
    bad = sorted(set(ids) & forbidden)
    if bad:
        raise InvariantError(
            f"leakage guard: {what} received held-out test sites {bad[:5]}"
        )


def _median_area(areas: list[int]) -> int:
    return int(math.ceil(float(np.median(areas))))


def _site_vectors(aligned, months, aggregation, overrides=None):
    """Stateless per-site aggregation; `overrides` swaps in recomputed
    (T, d) blocks for individual sites (dilation intervention)."""
    agg = AGGREGATORS[aggregation]
    out = {}
    for sid, block in aligned.items():
        if overrides and sid in overrides:
            block = overrides[sid]
        out[sid] = agg(MonthlySequence(site_id=sid, months=tuple(months), vectors=block))
    return out


def run_experiment(
    config: RunConfig,
    manifest: SiteManifest | None = None,
    table: FeatureTable | None = None,
) -> EvalReport:
    """Per fold: fit (PCA and grid search) strictly on that fold's training
    sites, evaluate on its test sites, and aggregate mean +/- std."""
    if manifest is None:
        manifest = load_manifest(config.manifest_path)
    if table is None:
        if config.feature_source == "handcrafted":
            table = extract_feature_table(manifest, list(config.months), config.masked)
        else:
            table = load_embeddings(config.feature_source, config.family).table
    months = list(config.months)
    aligned = align_series(table, manifest, months)
    labels = manifest.labels()
    site_order = manifest.site_ids()
    if config.split_mode == "resample":
        plan = resampled_splits(manifest, k=config.folds, seed=config.seed)
    else:
        plan = stratified_kfold(manifest, k=config.folds, seed=config.seed)

    needs_dilation = config.mask_dilation == "train_median"
    mask_cache: dict[str, Mask] = {}
    if needs_dilation:
        for e in manifest.entries:
            mask_cache[e.site_id] = load_mask(e.mask_path, e.site_id)

    base_vectors = None
    if config.aggregation != "pca":
        base_vectors = _site_vectors(aligned, months, config.aggregation)

    fold_results = []
    for f, split in enumerate(plan.folds):
        forbidden = frozenset(split.test)
        overrides = None
        if needs_dilation:
            target = _median_area([mask_cache[s].area for s in split.train])
            grown = {}
            for sid in split.test:
                if mask_cache[sid].area < target:
                    grown[sid] = dilate_to_min_area(mask_cache[sid], target)
            if grown:
                sub = extract_feature_table(
                    manifest, months, masked=True,
                    mask_overrides=grown, site_ids=sorted(grown),
                )
                overrides = {
                    sid: np.stack([sub.rows[(sid, m)] for m in sorted(months)])
                    for sid in grown
                }

        pca_fingerprint = None
        pca_k = None
        if config.aggregation == "pca":
            concat = _site_vectors(aligned, months, "concat", overrides)
            _guard_fit(split.train, forbidden, "PCA")
            train_matrix = np.stack([concat[s] for s in split.train])
            pca = pca_fit(train_matrix, n_train=len(split.train))
            pca_fingerprint = pca.fit_fingerprint
            pca_k = pca.k
            vectors = {s: pca_transform(pca, concat[s]) for s in site_order}
        elif overrides:
            vectors = dict(base_vectors)
            vectors.update(_site_vectors(
                {s: aligned[s] for s in overrides}, months,
                config.aggregation, overrides,
            ))
        else:
            vectors = base_vectors

        def dataset_for(ids):
            return Dataset(
                X=np.stack([vectors[s] for s in ids]),
                y=np.array([labels[s] for s in ids]),
                site_ids=tuple(ids),
            )

        train_ds = dataset_for(split.train)
        _guard_fit(train_ds.site_ids, forbidden, "grid search")
        fold_seed = config.seed * 1009 + f
        gs = grid_search(
            config.model_kind, train_ds,
            list(config.grid) if config.grid else None,
            k=3, seed=fold_seed,
        )
        test_ds = dataset_for(split.test)
        scores = predict_proba(gs.model, test_ds.X)
        m = compute_metrics(test_ds.y, scores)
        fold_results.append(
            FoldResult(
                fold=f,
                n_train=len(split.train),
                n_val=len(split.val),
                n_test=len(split.test),
                metrics=m,
                grid_winner=gs.best_params,
                grid_mean_f1=gs.mean_f1,
                pca_fingerprint=pca_fingerprint,
                pca_k=pca_k,
                model=gs.model,
            )
        )

    return EvalReport(
        config=config.echo(),
        folds=fold_results,
        summary=summarize_folds(fold_results),
    )


def feature_layout_tag(config: RunConfig) -> str:
    if config.feature_source == "handcrafted":
        return f"{LAYOUT_VERSION}/{config.aggregation}"
    return f"{config.family}/{config.aggregation}"
