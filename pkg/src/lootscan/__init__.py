"""Looted-vs-preserved archaeological site classification from masked
multiband satellite patches: handcrafted features, temporal aggregation,
traditional classifiers, cross-validated evaluation, and exact Shapley
feature importance."""

from .errors import (
    ConfigError,
    DataError,
    DegenerateMaskError,
    InvariantError,
    LootscanError,
    TrainingError,
)
from .features import FEATURE_NAMES, LAYOUT_VERSION, extract_handcrafted
from .metrics import auroc_score, compute_metrics
from .raster import Mask, Patch, apply_mask, load_manifest, load_patch, rasterize_polygon
from .synth import SceneParams, gen_dataset, gen_site

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateMaskError",
    "InvariantError",
    "LootscanError",
    "TrainingError",
    "FEATURE_NAMES",
    "LAYOUT_VERSION",
    "extract_handcrafted",
    "auroc_score",
    "compute_metrics",
    "Mask",
    "Patch",
    "apply_mask",
    "load_manifest",
    "load_patch",
    "rasterize_polygon",
    "SceneParams",
    "gen_dataset",
    "gen_site",
    "__version__",
]
