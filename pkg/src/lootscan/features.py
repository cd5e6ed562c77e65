"""42-dimensional handcrafted descriptor computed strictly inside the mask.

Layout (index order is frozen; `FEATURE_NAMES` is the authoritative map):
  0..11   spectral: per-band mean (R,G,B,NIR), per-band population std,
          all-bands mean, all-bands std, NDVI mean, NDWI mean
  12..27  GLCM contrast/homogeneity/energy/entropy per band (band-major)
  28..31  Sobel mean gradient magnitude per band
  32..33  Sobel edge density on R and NIR
  34..41  LBP histogram entropy and energy per band
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ConfigError, DataError, DegenerateMaskError
from .raster import BAND_NAMES, Mask, Patch

LAYOUT_VERSION = "handcrafted-v1"
GLCM_LEVELS = 16
GLCM_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))  # 0/45/90/135 degrees, distance 1
INDEX_EPS = 1e-6

FEATURE_NAMES: tuple[str, ...] = tuple(
    [f"mean_{b.lower()}" for b in BAND_NAMES]
    + [f"std_{b.lower()}" for b in BAND_NAMES]
    + ["all_bands_mean", "all_bands_std", "ndvi_mean", "ndwi_mean"]
    + [
        f"glcm_{b.lower()}_{stat}"
        for b in BAND_NAMES
        for stat in ("contrast", "homogeneity", "energy", "entropy")
    ]
    + [f"sobel_{b.lower()}_mean" for b in BAND_NAMES]
    + ["sobel_r_density", "sobel_nir_density"]
    + [f"lbp_{b.lower()}_{stat}" for b in BAND_NAMES for stat in ("entropy", "energy")]
)

N_FEATURES = len(FEATURE_NAMES)  # 42


@dataclass(frozen=True)
class GlcmStats:
    contrast: float
    homogeneity: float
    energy: float
    entropy: float
    levels: int = GLCM_LEVELS

    def __post_init__(self):
        top = (self.levels - 1) ** 2
        if not (0.0 <= self.contrast <= top + 1e-9):
            raise DataError(f"GLCM contrast {self.contrast} outside [0, {top}]")
        if not (0.0 < self.homogeneity <= 1.0 + 1e-12):
            raise DataError(f"GLCM homogeneity {self.homogeneity} outside (0, 1]")
        if not (0.0 < self.energy <= 1.0 + 1e-12):
            raise DataError(f"GLCM energy {self.energy} outside (0, 1]")
        if not (0.0 <= self.entropy <= 2.0 * np.log2(self.levels) + 1e-9):
            raise DataError(f"GLCM entropy {self.entropy} out of range")


@dataclass(frozen=True)
class HandcraftedVector:
    values: np.ndarray  # (42,) float64
    site_id: str = ""
    year_month: str = ""

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (N_FEATURES,):
            raise DataError(f"expected {N_FEATURES} features, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("handcrafted vector contains non-finite entries")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)


def _mask_bool(mask: Mask) -> np.ndarray:
    return mask.values.astype(bool)


def _bbox_crop(arr: np.ndarray, m: np.ndarray):
    rows = np.nonzero(m.any(axis=1))[0]
    cols = np.nonzero(m.any(axis=0))[0]
    r0, r1 = rows[0], rows[-1] + 1
    c0, c1 = cols[0], cols[-1] + 1
    return arr[r0:r1, c0:c1], m[r0:r1, c0:c1]


def spectral_features(patch: Patch, mask: Mask) -> np.ndarray:
    """Per-band and cross-band statistics plus NDVI/NDWI means over masked pixels."""
    m = _mask_bool(mask)
    n = int(m.sum())
    if n < 2:
        raise DegenerateMaskError("spectral features need at least 2 masked pixels")
    samples = patch.values[:, m]  # (4, n)
    means = samples.mean(axis=1)
    stds = samples.std(axis=1)  # population std
    r, g, nir = samples[0], samples[1], samples[3]
    ndvi = ((nir - r) / (nir + r + INDEX_EPS)).mean()
    ndwi = ((g - nir) / (g + nir + INDEX_EPS)).mean()
    return np.concatenate(
        [means, stds, [samples.mean(), samples.std(), ndvi, ndwi]]
    )


def _quantize(band: np.ndarray, m: np.ndarray, levels: int) -> np.ndarray:
    vals = band[m]
    lo, hi = vals.min(), vals.max()
    q = np.zeros(band.shape, dtype=np.int32)
    if hi > lo:
        scaled = np.floor((band - lo) / (hi - lo) * levels).astype(np.int32)
        q = np.clip(scaled, 0, levels - 1)
    return q


def glcm_features(
    band: np.ndarray,
    mask: Mask,
    levels: int = GLCM_LEVELS,
    offsets=GLCM_OFFSETS,
) -> GlcmStats:
    """Angle-averaged co-occurrence statistics on the mask-quantized band.

    Pairs count only when both pixels are masked; each offset's matrix is
    normalized to sum 1 before its stats are taken. Offsets with no valid
    pair drop out of the average; all-empty is an error.
    """
    if levels < 2:
        raise ConfigError("GLCM needs at least 2 quantization levels")
    m = _mask_bool(mask)
    if not m.any():
        raise DegenerateMaskError("GLCM needs a nonzero mask")
    band = np.asarray(band, dtype=np.float64)
    band_c, m_c = _bbox_crop(band, m)
    q = _quantize(band_c, m_c, levels)
    ii, jj = np.meshgrid(np.arange(levels), np.arange(levels), indexing="ij")
    diff2 = (ii - jj).astype(np.float64) ** 2
    stats = np.zeros(4)
    used = 0
    for dr, dc in offsets:
        counts = _kernels.glcm_counts(q, m_c, dr, dc, levels)
        total = counts.sum()
        if total == 0:
            continue
        p = counts / total
        nz = p[p > 0]
        stats += [
            float((p * diff2).sum()),
            float((p / (1.0 + diff2)).sum()),
            float((p * p).sum()),
            float(-(nz * np.log2(nz)).sum()),
        ]
        used += 1
    if used == 0:
        raise DegenerateMaskError("no co-occurring masked pixel pair for any offset")
    stats /= used
    return GlcmStats(
        contrast=stats[0],
        homogeneity=stats[1],
        energy=stats[2],
        entropy=stats[3],
        levels=levels,
    )


def _interior_eligible(m: np.ndarray) -> np.ndarray:
    """Masked pixels whose full 8-neighborhood is in-grid and masked."""
    elig = np.zeros_like(m)
    if m.shape[0] < 3 or m.shape[1] < 3:
        return elig
    core = m[1:-1, 1:-1].copy()
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            core &= m[1 + dr : m.shape[0] - 1 + dr, 1 + dc : m.shape[1] - 1 + dc]
    elig[1:-1, 1:-1] = core
    return elig


def lbp_features(band: np.ndarray, mask: Mask) -> tuple[float, float]:
    """Entropy (bits) and energy of the 256-bin local-binary-pattern histogram.

    Codes compare the 8 raster neighbors (clockwise from east) against the
    center with >= so ties set the bit; only pixels with a fully masked
    neighborhood participate.
    """
    m = _mask_bool(mask)
    if not m.any():
        raise DegenerateMaskError("LBP needs a nonzero mask")
    band_c, m_c = _bbox_crop(np.asarray(band, dtype=np.float64), m)
    hist, n = _kernels.lbp_histogram(band_c, m_c)
    if n == 0:
        raise DegenerateMaskError("no pixel with a fully masked 8-neighborhood")
    h = hist / n
    nz = h[h > 0]
    entropy = float(-(nz * np.log2(nz)).sum())
    energy = float((h * h).sum())
    return entropy, energy


def sobel_edge_features(band: np.ndarray, mask: Mask) -> tuple[float, float]:
    """Mean 3x3-Sobel gradient magnitude over interior masked pixels, and the
    fraction of those pixels exceeding that mean."""
    m = _mask_bool(mask)
    if not m.any():
        raise DegenerateMaskError("Sobel features need a nonzero mask")
    band_c, m_c = _bbox_crop(np.asarray(band, dtype=np.float64), m)
    elig = _interior_eligible(m_c)
    n = int(elig.sum())
    if n == 0:
        raise DegenerateMaskError("no pixel with a fully masked 8-neighborhood")
    mag = _kernels.sobel_magnitude(band_c)[elig]
    mean_mag = float(mag.mean())
    density = float((mag > mean_mag).mean())
    return mean_mag, density


def extract_handcrafted(patch: Patch, mask: Mask) -> HandcraftedVector:
    """Assemble the full 42-feature vector in the frozen layout."""
    if (patch.height, patch.width) != (mask.height, mask.width):
        raise DataError("patch and mask dimensions differ")
    out = np.empty(N_FEATURES, dtype=np.float64)
    out[:12] = spectral_features(patch, mask)
    pos = 12
    for b in range(len(BAND_NAMES)):
        g = glcm_features(patch.values[b], mask)
        out[pos : pos + 4] = (g.contrast, g.homogeneity, g.energy, g.entropy)
        pos += 4
    sobel = [sobel_edge_features(patch.values[b], mask) for b in range(len(BAND_NAMES))]
    out[28:32] = [s[0] for s in sobel]
    out[32] = sobel[0][1]  # R density
    out[33] = sobel[3][1]  # NIR density
    pos = 34
    for b in range(len(BAND_NAMES)):
        ent, ene = lbp_features(patch.values[b], mask)
        out[pos], out[pos + 1] = ent, ene
        pos += 2
    return HandcraftedVector(
        values=out, site_id=patch.site_id, year_month=patch.year_month
    )


# ---------------------------------------------------------------------------
# Feature store CSV: site_id,year_month,f00..f{d-1}


@dataclass
class FeatureTable:
    """Per-(site, month) numeric descriptors of one fixed dimensionality."""

    dim: int
    rows: dict[tuple[str, str], np.ndarray]

    def add(self, site_id: str, year_month: str, vec: np.ndarray) -> None:
        key = (site_id, year_month)
        if key in self.rows:
            raise DataError(f"duplicate feature row for {key}")
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.dim,):
            raise DataError(f"row {key}: expected {self.dim} values, got {vec.shape}")
        if not np.all(np.isfinite(vec)):
            raise DataError(f"row {key}: non-finite values")
        self.rows[key] = vec

    def months_for(self, site_id: str) -> list[str]:
        return sorted(m for (s, m) in self.rows if s == site_id)


def _columns(dim: int) -> list[str]:
    pad = max(2, len(str(dim - 1)))
    return [f"f{i:0{pad}d}" for i in range(dim)]


def write_feature_table(path, table: FeatureTable) -> None:
    """Serialize with 17 significant digits so values survive a round trip."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "year_month"] + _columns(table.dim))
        for (site, month) in sorted(table.rows):
            vec = table.rows[(site, month)]
            writer.writerow([site, month] + [f"{v:.17g}" for v in vec])


def read_feature_table(path) -> FeatureTable:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such feature store: {path}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["site_id", "year_month"]:
            raise DataError(f"{path}: expected header site_id,year_month,f00..")
        dim = len(header) - 2
        if dim < 1 or header[2:] != _columns(dim):
            raise DataError(f"{path}: malformed feature columns")
        table = FeatureTable(dim=dim, rows={})
        for row in reader:
            if not row:
                continue
            if len(row) != dim + 2:
                raise DataError(f"{path}: row for {row[:2]} has {len(row) - 2} values")
            vec = np.array([float(x) for x in row[2:]], dtype=np.float64)
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{path}: non-finite value at {(row[0], row[1])}")
            table.add(row[0], row[1], vec)
    return table
