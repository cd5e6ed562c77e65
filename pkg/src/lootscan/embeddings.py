"""Ingestion of precomputed foundation-model embedding vectors.

Embedding computation happens in external tooling; this module only enforces
the file contract: a feature-store CSV plus a `<name>.meta.json` sidecar
declaring the family, dimensionality, and whether the imagery was masked
before encoding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .features import FeatureTable, read_feature_table
from .raster import SiteManifest

# closed family table; unknown names are rejected, never guessed
FAMILY_DIMS = {
    "satclip_v": 768,
    "georsclip": 512,
    "dinov3": 1024,
    "prithvi": 1024,
    "satlas": 2048,
    "satmae": 768,
}


@dataclass
class EmbeddingSeries:
    family: str
    dim: int
    masked: bool
    table: FeatureTable

    @property
    def rows(self):
        return self.table.rows


def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".meta.json")


def write_embeddings(csv_path, series: EmbeddingSeries) -> None:
    from .features import write_feature_table

    write_feature_table(csv_path, series.table)
    meta = {"family": series.family, "dim": series.dim, "masked": series.masked}
    sidecar_path(csv_path).write_text(json.dumps(meta, separators=(",", ":")) + "\n")


def load_embeddings(path, family: str) -> EmbeddingSeries:
    """Load and validate one embedding file against the family table."""
    if family not in FAMILY_DIMS:
        raise DataError(
            f"unknown embedding family {family!r}; known: {sorted(FAMILY_DIMS)}"
        )
    expected = FAMILY_DIMS[family]
    side = sidecar_path(path)
    if not side.exists():
        raise DataError(f"missing sidecar {side}")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{side}: malformed sidecar ({exc})") from exc
    if meta.get("family") != family:
        raise DataError(f"{side}: sidecar family {meta.get('family')!r} != {family!r}")
    if "masked" not in meta:
        raise DataError(f"{side}: sidecar missing 'masked' flag")
    table = read_feature_table(path)
    if table.dim != expected:
        raise DataError(
            f"{path}: {family} embeddings must have {expected} dims, found {table.dim}"
        )
    if int(meta.get("dim", -1)) != expected:
        raise DataError(f"{side}: sidecar dim {meta.get('dim')} != {expected}")
    return EmbeddingSeries(
        family=family, dim=expected, masked=bool(meta["masked"]), table=table
    )


def align_series(
    table: FeatureTable, manifest: SiteManifest, months: list[str]
) -> dict[str, np.ndarray]:
    """Order each site's monthly vectors into a (T, dim) block.

    Every (site, month) the experiment needs must be present; the error lists
    all missing keys so one pass surfaces the full gap.
    """
    months = sorted(months)
    missing = [
        (e.site_id, m)
        for e in manifest.entries
        for m in months
        if (e.site_id, m) not in table.rows
    ]
    if missing:
        raise DataError(f"missing feature rows for {len(missing)} keys: {missing[:20]}")
    return {
        e.site_id: np.stack([table.rows[(e.site_id, m)] for m in months])
        for e in manifest.entries
    }
