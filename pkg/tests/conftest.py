from pathlib import Path

import numpy as np
import pytest

from lootscan.raster import Mask, Patch, SiteEntry, SiteManifest
from lootscan.synth import SceneParams


def small_scene(size=48, **overrides):
    """SceneParams scaled down for fast tests (defaults assume 186 px)."""
    base = dict(
        size=size,
        pit_count=(2, 5),
        pit_radius=(1.5, 3.0),
        footprint_radius=(size * 0.15, size * 0.23),
        background_cells=6,
    )
    base.update(overrides)
    return SceneParams(**base)


def make_patch(bands=None, size=8, constant=None, site_id="s0", month="2023_01", dtype="f32"):
    """4-band test patch; `bands` may be one 2-D grid (replicated) or (4,h,w)."""
    if bands is None:
        v = np.full((4, size, size), 7.0 if constant is None else float(constant))
    else:
        bands = np.asarray(bands, dtype=np.float64)
        v = np.broadcast_to(bands, (4,) + bands.shape[-2:]).copy() if bands.ndim == 2 else bands
    return Patch(values=v, site_id=site_id, year_month=month, dtype=dtype)


def make_mask(shape_or_values, site_id="s0"):
    if isinstance(shape_or_values, tuple):
        return Mask(values=np.ones(shape_or_values, dtype=np.uint8), site_id=site_id)
    return Mask(values=np.asarray(shape_or_values, dtype=np.uint8), site_id=site_id)


def make_manifest(n_preserved, n_looted, months=()):
    entries = []
    for i in range(n_preserved + n_looted):
        label = "looted" if i < n_looted else "preserved"
        entries.append(
            SiteEntry(
                site_id=f"s{i:04d}",
                lat=30.0 + i * 1e-3,
                lon=60.0,
                label=label,
                mask_path=Path(f"masks/s{i:04d}.lsp"),
                patch_dir=Path(f"patches/s{i:04d}"),
                months=tuple(months),
            )
        )
    return SiteManifest(entries=tuple(entries))


@pytest.fixture
def rng():
    return np.random.default_rng(20230712)
