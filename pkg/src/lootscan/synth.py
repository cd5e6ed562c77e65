"""Synthetic labeled scenes with a controllable looting signal.

Each site gets a smooth 4-band background, an elliptical footprint, and (when
looted) excavation pits rendered as dark discs with bright rims, which raises
edge and co-occurrence-contrast statistics inside the footprint. Linear
bright streaks (roads, field edges) land only outside footprints so masking
has a knowable benefit. The NIR band carries the strongest pit contrast.

Stream layout keeps label comparisons paired: background/footprint/clutter
draw from one stream, pits from a second, monthly noise from a third, so the
preserved twin of a looted seed differs only by the pits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .raster import (
    Mask,
    Patch,
    SiteEntry,
    SiteManifest,
    is_month_tag,
    MONTH_MAX,
    MONTH_MIN,
    save_manifest,
    save_mask,
    save_patch,
)

BAND_BASE = np.array([3500.0, 3200.0, 2800.0, 5200.0])  # R, G, B, NIR
PIT_GAIN = np.array([0.70, 0.70, 0.55, 1.00])  # NIR strongest
CLUTTER_GAIN = np.array([0.90, 0.90, 0.80, 1.00])
CLUTTER_BRIGHTNESS = 1400.0
FLIP_STREAM_TAG = 999983  # label-noise substream selector


@dataclass(frozen=True)
class SceneParams:
    size: int = 186
    pit_count: tuple[int, int] = (3, 8)
    pit_radius: tuple[float, float] = (3.0, 7.0)
    pit_depth: float = 900.0
    rim_height: float = 500.0
    background_cells: int = 12
    background_amplitude: float = 800.0
    noise_std: float = 50.0
    footprint_radius: tuple[float, float] = (28.0, 60.0)
    label_noise: float = 0.0
    clutter_rate: float = 0.7
    looted_mask_scale: float = 1.3

    def __post_init__(self):
        if self.pit_count[0] > self.pit_count[1] or self.pit_count[0] < 0:
            raise ConfigError(f"pit_count range {self.pit_count} is empty or negative")
        for name in ("pit_radius", "footprint_radius"):
            lo, hi = getattr(self, name)
            if lo > hi or lo <= 0:
                raise ConfigError(f"{name} range {lo}..{hi} is empty or non-positive")
        if self.pit_depth < 0 or self.rim_height < 0:
            raise ConfigError("pit amplitudes must be >= 0")
        if not (0.0 <= self.label_noise <= 1.0 and 0.0 <= self.clutter_rate <= 1.0):
            raise ConfigError("rates must lie in [0, 1]")
        if self.size < 16:
            raise ConfigError("scene size must be at least 16 pixels")
        if self.background_cells < 2:
            raise ConfigError("background_cells must be >= 2")
        reach = self.footprint_radius[1] * max(1.0, self.looted_mask_scale)
        if reach + 0.06 * self.size >= self.size / 2.0:
            raise DataError(
                f"footprint radius {reach:.1f} exceeds patch bounds for size {self.size}"
            )


def _coerce_label(label) -> int:
    if label in (0, 1):
        return int(label)
    if label in ("preserved", "looted"):
        return ("preserved", "looted").index(label)
    raise ConfigError(f"label must be looted/preserved or 0/1, got {label!r}")


def _upsample(coarse: np.ndarray, size: int) -> np.ndarray:
    k = coarse.shape[0]
    pos = np.linspace(0.0, k - 1.0, size)
    i0 = np.minimum(pos.astype(int), k - 2)
    frac = pos - i0
    rows = coarse[i0] + (coarse[i0 + 1] - coarse[i0]) * frac[:, None]
    out = rows[:, i0] + (rows[:, i0 + 1] - rows[:, i0]) * frac[None, :]
    return out


@dataclass
class _Geometry:
    band_gain: np.ndarray  # (4,) per-site base jitter
    surface: np.ndarray  # (4, size, size) background field before deltas
    footprint: np.ndarray  # (size, size) uint8
    pit_delta: np.ndarray  # (size, size) single-band profile
    clutter_delta: np.ndarray  # (size, size)


def _ellipse_mask(size, center, axes, theta) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    dr = rr - center[0]
    dc = cc - center[1]
    u = dr * math.cos(theta) + dc * math.sin(theta)
    v = -dr * math.sin(theta) + dc * math.cos(theta)
    return ((u / axes[0]) ** 2 + (v / axes[1]) ** 2 <= 1.0).astype(np.uint8)


def _draw_geometry(label_int: int, params: SceneParams, rng_structure, rng_pits) -> _Geometry:
    size = params.size
    k = params.background_cells
    shared = rng_structure.standard_normal((k, k))
    per_band = rng_structure.standard_normal((4, k, k))
    band_gain = rng_structure.uniform(0.9, 1.1, size=4)
    center = size / 2.0 + rng_structure.uniform(-0.05, 0.05, size=2) * size
    axes = rng_structure.uniform(*params.footprint_radius, size=2)
    theta = rng_structure.uniform(0.0, math.pi)
    cluttered = rng_structure.random() < params.clutter_rate
    streaks = []
    if cluttered:
        for _ in range(int(rng_structure.integers(1, 4))):
            streaks.append(
                (
                    rng_structure.uniform(0, size, size=2),  # anchor point
                    rng_structure.uniform(0.0, math.pi),  # direction
                    rng_structure.uniform(0.8, 2.0),  # half-width
                    rng_structure.uniform(0.7, 1.3),  # brightness factor
                )
            )

    scale = params.looted_mask_scale if label_int == 1 else 1.0
    footprint = _ellipse_mask(size, center, axes * scale, theta)

    up_shared = _upsample(shared, size)
    surface = np.empty((4, size, size))
    for b in range(4):
        surface[b] = (
            BAND_BASE[b] * band_gain[b]
            + params.background_amplitude * up_shared
            + params.background_amplitude * 0.3 * _upsample(per_band[b], size)
        )

    pit_delta = np.zeros((size, size))
    if label_int == 1:
        rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        n_pits = int(rng_pits.integers(params.pit_count[0], params.pit_count[1] + 1))
        for _ in range(n_pits):
            u = math.sqrt(rng_pits.random()) * 0.75
            phi = rng_pits.uniform(0.0, 2.0 * math.pi)
            e1, e2 = u * axes[0] * math.cos(phi), u * axes[1] * math.sin(phi)
            pr = center[0] + e1 * math.cos(theta) - e2 * math.sin(theta)
            pc = center[1] + e1 * math.sin(theta) + e2 * math.cos(theta)
            radius = rng_pits.uniform(*params.pit_radius)
            jitter = rng_pits.uniform(0.85, 1.15)
            dist = np.hypot(rr - pr, cc - pc)
            pit_delta[dist <= radius] -= params.pit_depth * jitter
            pit_delta[(dist > radius) & (dist <= radius + 1.5)] += (
                params.rim_height * jitter
            )

    clutter_delta = np.zeros((size, size))
    if streaks:
        rr, cc = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        for (anchor, ang, half_width, bright) in streaks:
            perp = -(rr - anchor[0]) * math.sin(ang) + (cc - anchor[1]) * math.cos(ang)
            clutter_delta[np.abs(perp) <= half_width] = CLUTTER_BRIGHTNESS * bright
        clutter_delta[footprint.astype(bool)] = 0.0  # clutter stays outside the site

    return _Geometry(
        band_gain=band_gain,
        surface=surface,
        footprint=footprint,
        pit_delta=pit_delta,
        clutter_delta=clutter_delta,
    )


def _render_month(geom: _Geometry, params: SceneParams, rng_month) -> np.ndarray:
    jitter = rng_month.normal(1.0, 0.02)
    bands = np.empty((4, params.size, params.size))
    for b in range(4):
        bands[b] = (
            geom.surface[b]
            + geom.pit_delta * PIT_GAIN[b]
            + geom.clutter_delta * CLUTTER_GAIN[b]
        )
    bands *= jitter
    bands += rng_month.normal(0.0, params.noise_std, size=bands.shape)
    return np.clip(np.rint(bands), 0, 65535)


def gen_site(
    label,
    params: SceneParams,
    seed: int,
    site_id: str = "site_0000",
    year_month: str = "2023_01",
):
    """One (Patch, Mask, true_label) triple, bit-deterministic per seed."""
    label_int = _coerce_label(label)
    rng_structure = np.random.default_rng([seed, 0])
    rng_pits = np.random.default_rng([seed, 1])
    rng_month = np.random.default_rng([seed, 2])
    geom = _draw_geometry(label_int, params, rng_structure, rng_pits)
    values = _render_month(geom, params, rng_month)
    patch = Patch(values=values, site_id=site_id, year_month=year_month, dtype="u16")
    mask = Mask(values=geom.footprint, site_id=site_id)
    return patch, mask, label_int


def label_flips(n_sites: int, rate: float, seed: int) -> np.ndarray:
    """The seeded flip stream used by gen_dataset for label noise."""
    return np.random.default_rng([seed, FLIP_STREAM_TAG]).random(n_sites) < rate


def gen_dataset(
    n_sites: int,
    looted_fraction: float,
    months,
    params: SceneParams,
    seed: int,
    out_dir,
) -> SiteManifest:
    """Write a full LSP1 dataset: per-month patches, masks, manifest CSV, and
    a params.json snapshot. Label noise flips recorded labels only; imagery
    always reflects the true label."""
    if n_sites < 4:
        raise DataError("need at least 4 sites")
    if not (0.0 <= looted_fraction <= 1.0):
        raise ConfigError("looted_fraction must lie in [0, 1]")
    months = sorted(months)
    for m in months:
        if not is_month_tag(m) or not (MONTH_MIN <= m <= MONTH_MAX):
            raise DataError(f"month {m} outside {MONTH_MIN}..{MONTH_MAX}")
    out_dir = Path(out_dir)
    try:
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
        (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc

    n_looted = int(math.floor(n_sites * looted_fraction + 0.5))
    true_labels = np.array([1] * n_looted + [0] * (n_sites - n_looted))
    flips = label_flips(n_sites, params.label_noise, seed)
    recorded = np.where(flips, 1 - true_labels, true_labels)

    entries = []
    flipped_ids = []
    for i in range(n_sites):
        site_id = f"site_{i:04d}"
        rng_structure = np.random.default_rng([seed, i, 0])
        rng_pits = np.random.default_rng([seed, i, 1])
        geom = _draw_geometry(int(true_labels[i]), params, rng_structure, rng_pits)
        mask = Mask(values=geom.footprint, site_id=site_id)
        mask_path = out_dir / "masks" / f"{site_id}.lsp"
        save_mask(mask_path, mask)
        patch_dir = out_dir / "patches" / site_id
        patch_dir.mkdir(exist_ok=True)
        for j, month in enumerate(months):
            rng_month = np.random.default_rng([seed, i, 2, j])
            values = _render_month(geom, params, rng_month)
            patch = Patch(values=values, site_id=site_id, year_month=month, dtype="u16")
            save_patch(patch_dir / f"{month}.lsp", patch)
        if flips[i]:
            flipped_ids.append(site_id)
        entries.append(
            SiteEntry(
                site_id=site_id,
                lat=34.0 + 0.001 * i,
                lon=66.0 + 0.001 * i,
                label=("preserved", "looted")[int(recorded[i])],
                mask_path=mask_path,
                patch_dir=patch_dir,
                months=tuple(months),
            )
        )

    manifest = SiteManifest(entries=tuple(entries))
    save_manifest(out_dir / "manifest.csv", manifest)
    snapshot = {
        "scene_params": asdict(params),
        "n_sites": n_sites,
        "looted_fraction": looted_fraction,
        "months": months,
        "seed": seed,
        "n_true_looted": int(n_looted),
        "n_flipped": len(flipped_ids),
        "flipped_site_ids": flipped_ids,
    }
    (out_dir / "params.json").write_text(json.dumps(snapshot, sort_keys=True, indent=1) + "\n")
    return manifest
