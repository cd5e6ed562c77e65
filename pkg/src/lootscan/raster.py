"""Site patches, footprint masks, and the LSP1 raster container.

A patch is a 4-band (R, G, B, NIR) grid of non-negative samples for one site
and one calendar month. A mask is a {0,1} grid aligned to the patches of its
site. Files use the LSP1 container: one compact JSON header line, then raw
little-endian band-sequential samples, row-major within each band.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateMaskError

BAND_NAMES = ("R", "G", "B", "NIR")
MONTH_MIN = "2017_01"
MONTH_MAX = "2023_12"
_MONTH_RE = re.compile(r"^\d{4}_(0[1-9]|1[0-2])$")
_DTYPES = {"u16": "<u2", "f32": "<f4", "u8": "u1"}


def is_month_tag(tag: str) -> bool:
    return bool(_MONTH_RE.match(tag))


def month_range(first: str, last: str) -> list[str]:
    """Inclusive list of YYYY_MM tags from first to last."""
    if not (is_month_tag(first) and is_month_tag(last)) or first > last:
        raise ConfigError(f"bad month range {first}..{last}")
    out = []
    y, m = int(first[:4]), int(first[5:])
    while f"{y:04d}_{m:02d}" <= last:
        out.append(f"{y:04d}_{m:02d}")
        m += 1
        if m > 12:
            y, m = y + 1, 1
    return out


def _storage_cast(values: np.ndarray, dtype: str) -> np.ndarray:
    """Round-trip values through the container dtype so save/load is exact."""
    if dtype not in _DTYPES:
        raise DataError(f"unknown container dtype {dtype!r}")
    cast = values.astype(_DTYPES[dtype])
    back = cast.astype(np.float64)
    if dtype != "f32" and not np.array_equal(back, values):
        raise DataError(f"values not representable as {dtype}")
    return back


@dataclass(frozen=True)
class Patch:
    """One site-month raster tile with bands R, G, B, NIR."""

    values: np.ndarray  # (4, height, width) float64
    site_id: str = ""
    year_month: str = ""
    dtype: str = "u16"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != len(BAND_NAMES):
            raise DataError(f"patch needs {len(BAND_NAMES)} bands, got shape {v.shape}")
        if v.shape[1] < 3 or v.shape[2] < 3:
            raise DataError("patch must be at least 3x3")
        if not np.all(np.isfinite(v)):
            raise DataError("patch contains non-finite values")
        if np.any(v < 0):
            raise DataError("patch contains negative values")
        if self.year_month and not is_month_tag(self.year_month):
            raise DataError(f"bad year_month tag {self.year_month!r}")
        v = _storage_cast(v, self.dtype)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def band(self, name: str) -> np.ndarray:
        return self.values[BAND_NAMES.index(name)]


@dataclass(frozen=True)
class Mask:
    """Binary footprint raster aligned to a site's patches."""

    values: np.ndarray  # (height, width) uint8 in {0,1}
    site_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise DataError(f"mask must be 2-D, got shape {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise DataError("mask values must be 0 or 1")
        v = v.astype(np.uint8)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def area(self) -> int:
        return int(self.values.sum())


# ---------------------------------------------------------------------------
# LSP1 container


def _write_lsp1(path, bands: list[str], dtype: str, values: np.ndarray) -> None:
    header = {
        "magic": "LSP1",
        "width": int(values.shape[-1]),
        "height": int(values.shape[-2]),
        "bands": bands,
        "dtype": dtype,
    }
    payload = np.ascontiguousarray(values.astype(_DTYPES[dtype]))
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload.tobytes())


def _read_lsp1(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such raster file: {path}")
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise DataError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: malformed header ({exc})") from exc
    if not isinstance(header, dict) or header.get("magic") != "LSP1":
        raise DataError(f"{path}: not an LSP1 container")
    for key in ("width", "height", "bands", "dtype"):
        if key not in header:
            raise DataError(f"{path}: header missing {key!r}")
    dtype = header["dtype"]
    if dtype not in _DTYPES:
        raise DataError(f"{path}: unknown dtype {dtype!r}")
    width, height = int(header["width"]), int(header["height"])
    bands = list(header["bands"])
    np_dtype = np.dtype(_DTYPES[dtype])
    expected = width * height * len(bands) * np_dtype.itemsize
    payload = raw[nl + 1 :]
    if len(payload) != expected:
        raise DataError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    values = np.frombuffer(payload, dtype=np_dtype).reshape(len(bands), height, width)
    return header, values.astype(np.float64)


def save_patch(path, patch: Patch) -> None:
    _write_lsp1(path, list(BAND_NAMES), patch.dtype, patch.values)


def load_patch(path, site_id: str = "", year_month: str = "") -> Patch:
    header, values = _read_lsp1(path)
    if list(header["bands"]) != list(BAND_NAMES):
        raise DataError(f"{path}: expected bands {BAND_NAMES}, got {header['bands']}")
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: non-finite samples")
    if not year_month:
        stem = Path(path).stem
        year_month = stem if is_month_tag(stem) else ""
    return Patch(values=values, site_id=site_id, year_month=year_month, dtype=header["dtype"])


def save_mask(path, mask: Mask) -> None:
    _write_lsp1(path, ["M"], "u8", mask.values[None, :, :])


def load_mask(path, site_id: str = "") -> Mask:
    header, values = _read_lsp1(path)
    if list(header["bands"]) != ["M"]:
        raise DataError(f"{path}: expected mask bands ['M'], got {header['bands']}")
    return Mask(values=values[0], site_id=site_id)


# ---------------------------------------------------------------------------
# Polygon footprints


@dataclass(frozen=True)
class SitePolygon:
    """Closed ring of (row, col) vertices in the patch pixel frame."""

    vertices: np.ndarray  # (n, 2) float64

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise DataError("polygon vertices must be (row, col) pairs")
        # drop an explicit closing vertex and consecutive duplicates
        if v.shape[0] > 1 and np.array_equal(v[0], v[-1]):
            v = v[:-1]
        keep = [0]
        for i in range(1, v.shape[0]):
            if not np.array_equal(v[i], v[keep[-1]]):
                keep.append(i)
        v = v[keep]
        if v.shape[0] < 3:
            raise DataError("polygon needs at least 3 distinct vertices")
        if _ring_self_intersects(v):
            raise DataError("polygon ring is self-intersecting")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)


def load_polygon(path) -> SitePolygon:
    try:
        pairs = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read polygon ({exc})") from exc
    return SitePolygon(np.asarray(pairs, dtype=np.float64))


def _orient(p, q, r) -> float:
    return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])


def _on_segment(p, q, r) -> bool:
    return (
        min(p[0], q[0]) <= r[0] <= max(p[0], q[0])
        and min(p[1], q[1]) <= r[1] <= max(p[1], q[1])
    )


def _segments_cross(a, b, c, d) -> bool:
    o1, o2 = _orient(a, b, c), _orient(a, b, d)
    o3, o4 = _orient(c, d, a), _orient(c, d, b)
    if (o1 > 0) != (o2 > 0) and (o3 > 0) != (o4 > 0) and 0 not in (o1, o2, o3, o4):
        return True
    # collinear touches count as intersections too
    for seg, pt in (((a, b), c), ((a, b), d), ((c, d), a), ((c, d), b)):
        if _orient(seg[0], seg[1], pt) == 0 and _on_segment(seg[0], seg[1], pt):
            return True
    return False


def _ring_self_intersects(v: np.ndarray) -> bool:
    n = v.shape[0]
    for i in range(n):
        a, b = v[i], v[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share a vertex by construction
            c, d = v[j], v[(j + 1) % n]
            if _segments_cross(a, b, c, d):
                return True
    return False


def rasterize_polygon(poly: SitePolygon, width: int, height: int) -> Mask:
    """Even-odd fill: pixel (r, c) is set iff its center (at integer
    coordinates) lies inside the ring. Off-grid parts clip away naturally."""
    v = poly.vertices
    n = v.shape[0]
    out = np.zeros((height, width), dtype=np.uint8)
    cols = np.arange(width, dtype=np.float64)
    y1 = v[:, 0]
    y2 = v[(np.arange(n) + 1) % n, 0]
    x1 = v[:, 1]
    x2 = v[(np.arange(n) + 1) % n, 1]
    for r in range(height):
        hits = (y1 <= r) != (y2 <= r)
        if not hits.any():
            continue
        t = (r - y1[hits]) / (y2[hits] - y1[hits])
        xs = np.sort(x1[hits] + t * (x2[hits] - x1[hits]))
        inside = np.searchsorted(xs, cols, side="left") % 2 == 1
        out[r, inside] = 1
    return Mask(values=out)


# ---------------------------------------------------------------------------
# Mask and patch geometry ops


def apply_mask(patch: Patch, mask: Mask) -> Patch:
    """Zero out every band outside the footprint (element-wise multiply)."""
    if (patch.height, patch.width) != (mask.height, mask.width):
        raise DataError(
            f"patch {patch.height}x{patch.width} vs mask {mask.height}x{mask.width}"
        )
    return Patch(
        values=patch.values * mask.values[None, :, :],
        site_id=patch.site_id,
        year_month=patch.year_month,
        dtype=patch.dtype,
    )


def dilate_to_min_area(mask: Mask, target_area: int) -> Mask:
    """Grow the footprint by 3x3-cross dilation until it covers target_area.

    Returns the input unchanged when it is already large enough; stops at the
    first iteration that reaches the target.
    """
    if mask.area == 0:
        raise DegenerateMaskError("cannot dilate an all-zero mask")
    if target_area > mask.height * mask.width:
        raise DataError(
            f"target area {target_area} exceeds grid size {mask.height * mask.width}"
        )
    if mask.area >= target_area:
        return mask
    cur = mask.values.astype(bool)
    while cur.sum() < target_area:
        grown = cur.copy()
        grown[1:, :] |= cur[:-1, :]
        grown[:-1, :] |= cur[1:, :]
        grown[:, 1:] |= cur[:, :-1]
        grown[:, :-1] |= cur[:, 1:]
        cur = grown
    return Mask(values=cur.astype(np.uint8), site_id=mask.site_id)


def bilinear_resize(band: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resample of one 2-D grid to size x size."""
    band = np.asarray(band, dtype=np.float64)
    h, w = band.shape
    rows = np.linspace(0.0, h - 1.0, size)
    cols = np.linspace(0.0, w - 1.0, size)
    r0 = np.minimum(np.floor(rows).astype(int), h - 2)
    c0 = np.minimum(np.floor(cols).astype(int), w - 2)
    fr = (rows - r0)[:, None]
    fc = (cols - c0)[None, :]
    tl = band[np.ix_(r0, c0)]
    tr = band[np.ix_(r0, c0 + 1)]
    bl = band[np.ix_(r0 + 1, c0)]
    br = band[np.ix_(r0 + 1, c0 + 1)]
    top = tl + (tr - tl) * fc
    bot = bl + (br - bl) * fc
    return top + (bot - top) * fr


def resize_patch(patch: Patch, size: int) -> Patch:
    """Bilinear per-band resample to size x size with corner-aligned sampling."""
    if size < 3:
        raise DataError("resize target must be at least 3 pixels")
    if size == patch.height == patch.width:
        return patch
    out = np.stack([bilinear_resize(patch.values[b], size) for b in range(len(BAND_NAMES))])
    return Patch(
        values=out,
        site_id=patch.site_id,
        year_month=patch.year_month,
        dtype="f32",
    )


# ---------------------------------------------------------------------------
# Site manifest

LABELS = ("preserved", "looted")


@dataclass(frozen=True)
class SiteEntry:
    site_id: str
    lat: float
    lon: float
    label: str
    mask_path: Path
    patch_dir: Path
    months: tuple[str, ...] = field(default_factory=tuple)

    @property
    def label_int(self) -> int:
        return LABELS.index(self.label)

    def patch_path(self, month: str) -> Path:
        return self.patch_dir / f"{month}.lsp"


@dataclass(frozen=True)
class SiteManifest:
    entries: tuple[SiteEntry, ...]

    def __post_init__(self):
        ids = [e.site_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate site ids in manifest: {dupes}")
        for e in self.entries:
            if e.label not in LABELS:
                raise DataError(f"site {e.site_id}: bad label {e.label!r}")
            for m in e.months:
                if not is_month_tag(m) or not (MONTH_MIN <= m <= MONTH_MAX):
                    raise DataError(
                        f"site {e.site_id}: month {m} outside {MONTH_MIN}..{MONTH_MAX}"
                    )

    def __len__(self) -> int:
        return len(self.entries)

    def site_ids(self) -> list[str]:
        return [e.site_id for e in self.entries]

    def labels(self) -> dict[str, int]:
        return {e.site_id: e.label_int for e in self.entries}

    def entry(self, site_id: str) -> SiteEntry:
        for e in self.entries:
            if e.site_id == site_id:
                return e
        raise DataError(f"unknown site id {site_id!r}")

    def class_counts(self) -> tuple[int, int]:
        looted = sum(e.label_int for e in self.entries)
        return len(self.entries) - looted, looted


def load_manifest(path) -> SiteManifest:
    """Read the site registry CSV; relative paths resolve against its folder."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such manifest: {path}")
    base = path.parent
    entries = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        required = {"site_id", "lat", "lon", "label", "mask_path", "patch_dir"}
        if reader.fieldnames is None or not required.issubset(reader.fieldnames):
            raise DataError(f"{path}: manifest header must contain {sorted(required)}")
        for row in reader:
            patch_dir = base / row["patch_dir"]
            months = tuple(
                sorted(p.stem for p in patch_dir.glob("*.lsp") if is_month_tag(p.stem))
            ) if patch_dir.is_dir() else ()
            entries.append(
                SiteEntry(
                    site_id=row["site_id"],
                    lat=float(row["lat"]),
                    lon=float(row["lon"]),
                    label=row["label"],
                    mask_path=base / row["mask_path"],
                    patch_dir=patch_dir,
                    months=months,
                )
            )
    return SiteManifest(entries=tuple(entries))


def save_manifest(path, manifest: SiteManifest) -> None:
    """Write the registry CSV with paths relative to its own folder."""
    path = Path(path)
    base = path.parent
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["site_id", "lat", "lon", "label", "mask_path", "patch_dir"])
        for e in manifest.entries:
            writer.writerow(
                [
                    e.site_id,
                    f"{e.lat:.6f}",
                    f"{e.lon:.6f}",
                    e.label,
                    Path(e.mask_path).relative_to(base).as_posix(),
                    Path(e.patch_dir).relative_to(base).as_posix(),
                ]
            )
