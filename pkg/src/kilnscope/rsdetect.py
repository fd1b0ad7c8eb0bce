"""Training-free kiln detection from multi-temporal RGB imagery.

Stages: redness index per frame, annual percentile composite, Otsu +
local-maximum seeding, footprint growth, morphological closing, connected
components, height-based rejection of urban roofs, and vectorisation.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import (BandCountMismatch, DegenerateHistogram, DimensionMismatch, EmptyStack,
                     KilnError, MissingHeightGrid)
from .geo import GeoTransform
from .metrics import BBox
from .raster import RasterGrid

log = logging.getLogger(__name__)

NODATA = -9999.0
_EIGHT = np.ones((3, 3), dtype=bool)


# --- types -------------------------------------------------------------------

@dataclass
class NdbkiStack:
    frames: list

    def __post_init__(self):
        if not self.frames:
            raise EmptyStack("stack has no frames")
        first = self.frames[0]
        for f in self.frames[1:]:
            if (f.width, f.height) != (first.width, first.height) or f.transform != first.transform:
                raise DimensionMismatch("stack frames differ in size or transform")

    @property
    def transform(self) -> GeoTransform:
        return self.frames[0].transform


@dataclass
class DetectionRegion:
    label_id: int
    pixels: np.ndarray  # (n, 2) int array of (col, row), row-major order
    bbox: BBox
    score: float = 0.0
    polygon: list = field(default_factory=list)
    tile: str = ""

    @property
    def area_px(self) -> int:
        return int(len(self.pixels))

    @property
    def rows(self) -> np.ndarray:
        return self.pixels[:, 1]

    @property
    def cols(self) -> np.ndarray:
        return self.pixels[:, 0]


@dataclass
class Tile:
    """One spatial tile observed at one or more timestamps."""

    name: str
    frames: list


@dataclass
class DetectConfig:
    percentile: float = 80.0
    otsu_bins: int = 256
    window: int = 9
    se_radius: int = 4
    threshold_scope: str = "scene"  # "scene" or "tile"
    min_index: Optional[float] = 0.0  # floor on the Otsu threshold; None disables
    height_filter: str = "auto"  # "auto" (when heights given), "on", "off"
    building_min_height: float = 0.5
    tall_height: float = 3.0
    tall_fraction: float = 0.1
    jobs: Optional[int] = None

    def validate(self) -> None:
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must be in (0, 100]")
        if self.otsu_bins < 2:
            raise ValueError("otsu_bins must be >= 2")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if self.se_radius < 1:
            raise ValueError("se_radius must be >= 1")
        if self.threshold_scope not in ("scene", "tile"):
            raise ValueError("threshold_scope must be 'scene' or 'tile'")
        if self.height_filter not in ("auto", "on", "off"):
            raise ValueError("height_filter must be 'auto', 'on' or 'off'")
        if self.jobs is not None and self.jobs < 1:
            raise ValueError("jobs must be >= 1")


# --- spectral-temporal stage ---------------------------------------------------

def ndbki(rgb: RasterGrid) -> RasterGrid:
    """(R - max(G, B)) / (R + max(G, B)); zero where the denominator vanishes."""
    if rgb.bands != 3:
        raise BandCountMismatch(f"expected 3 bands, got {rgb.bands}")
    r, g, b = rgb.data
    m = np.maximum(g, b)
    num = r - m
    den = r + m
    out = np.zeros_like(r)
    np.divide(num, den, out=out, where=den != 0)
    np.clip(out, -1.0, 1.0, out=out)
    valid = rgb.valid_mask()
    out[~valid] = NODATA
    return RasterGrid(out, rgb.transform, NODATA)


def nearest_rank(p: float, n: int) -> int:
    """1-based rank ceil(p/100 * n), computed exactly."""
    frac = Fraction(repr(float(p))) * n / 100
    return max(1, math.ceil(frac))


def percentile_composite(stack: NdbkiStack, p: float = 80.0) -> RasterGrid:
    """Per-pixel nearest-rank percentile over the valid frames."""
    if not 0 < p <= 100:
        raise ValueError("p must be in (0, 100]")
    values = np.stack([f.data[0] for f in stack.frames])
    valid = np.stack([f.valid_mask(0) for f in stack.frames])
    ordered = np.sort(np.where(valid, values, np.inf), axis=0)
    counts = valid.sum(axis=0)
    t = len(stack.frames)
    ranks = np.zeros(t + 1, dtype=np.intp)
    for n in range(1, t + 1):
        ranks[n] = nearest_rank(p, n) - 1
    idx = ranks[counts]
    out = np.take_along_axis(ordered, idx[np.newaxis], axis=0)[0]
    out[counts == 0] = NODATA
    return RasterGrid(out, stack.transform, NODATA)


def _valid_values(grid) -> np.ndarray:
    if isinstance(grid, RasterGrid):
        return grid.data[0][grid.valid_mask(0)]
    return np.asarray(grid, dtype=np.float64).ravel()


def otsu_threshold(grid, bins: int = 256) -> float:
    """Otsu threshold over ``bins`` equal-width bins spanning [min, max].

    Candidates are the lower edges of the bins; pixels at or above the edge
    form the upper class. Ties go to the lowest edge.
    """
    values = _valid_values(grid)
    if values.size == 0:
        raise DegenerateHistogram("no valid pixels")
    lo, hi = float(values.min()), float(values.max())
    if lo == hi:
        raise DegenerateHistogram(f"all {values.size} values equal {lo}")
    edges = otsu_edges(lo, hi, bins)
    idx = np.clip(np.searchsorted(edges, values, side="right") - 1, 0, bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    sums = np.bincount(idx, weights=values, minlength=bins)
    n, s = counts.sum(), sums.sum()
    # lower class = bins [0, k)
    n0 = np.concatenate(([0.0], np.cumsum(counts)[:-1]))
    s0 = np.concatenate(([0.0], np.cumsum(sums)[:-1]))
    n1 = n - n0
    s1 = s - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        sb = n0 * n1 * (s0 / n0 - s1 / n1) ** 2 / (n * n)
    sb[(n0 == 0) | (n1 == 0)] = 0.0
    return float(edges[int(np.argmax(sb))])


def otsu_edges(lo: float, hi: float, bins: int) -> np.ndarray:
    return lo + np.arange(bins + 1, dtype=np.float64) * ((hi - lo) / bins)


def local_maxima(grid, window: int = 9) -> np.ndarray:
    """Pixels >= every valid neighbour in a window x window box (truncated at borders)."""
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    if isinstance(grid, RasterGrid):
        values, valid = grid.data[0], grid.valid_mask(0)
    else:
        values = np.asarray(grid, dtype=np.float64)
        valid = np.ones(values.shape, dtype=bool)
    v = np.where(valid, values, -np.inf)
    neighbourhood_max = ndimage.maximum_filter(v, size=window, mode="constant", cval=-np.inf)
    return valid & (v >= neighbourhood_max)


def above_threshold(grid: RasterGrid, threshold: float) -> np.ndarray:
    return grid.valid_mask(0) & (grid.data[0] > threshold)


def candidate_seeds(ndbki80: RasterGrid, window: int = 9, threshold: Optional[float] = None,
                    bins: int = 256) -> np.ndarray:
    if threshold is None:
        threshold = otsu_threshold(ndbki80, bins)
    return above_threshold(ndbki80, threshold) & local_maxima(ndbki80, window)


def grow_footprints(seeds: np.ndarray, ndbki80: RasterGrid, threshold: float) -> np.ndarray:
    """Union of 8-connected above-threshold components that contain a seed."""
    fg = above_threshold(ndbki80, threshold)
    labels, count = ndimage.label(fg, structure=_EIGHT)
    if count == 0:
        return np.zeros_like(fg)
    keep = np.zeros(count + 1, dtype=bool)
    keep[np.unique(labels[seeds & fg])] = True
    keep[0] = False
    return keep[labels]


# --- consolidation -----------------------------------------------------------

def morphological_closing(mask: np.ndarray, se_radius: int = 4) -> np.ndarray:
    """Dilation then erosion by a (2r+1)^2 square.

    Outside the image counts as background for the dilation and is ignored
    by the erosion, which keeps the operator extensive and idempotent.
    """
    if se_radius < 1:
        raise ValueError("se_radius must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    se = np.ones((2 * se_radius + 1, 2 * se_radius + 1), dtype=bool)
    dilated = ndimage.binary_dilation(mask, structure=se, border_value=0)
    return ndimage.binary_erosion(dilated, structure=se, border_value=1)


def connected_components(mask: np.ndarray, values: Optional[RasterGrid] = None) -> list[DetectionRegion]:
    """8-connected regions ordered by (min row, min col); labels start at 1."""
    mask = np.asarray(mask, dtype=bool)
    labels, count = ndimage.label(mask, structure=_EIGHT)
    if count == 0:
        return []
    found = []
    for lab, sl in enumerate(ndimage.find_objects(labels), start=1):
        sub = labels[sl] == lab
        rr, cc = np.nonzero(sub)
        rows = rr + sl[0].start
        cols = cc + sl[1].start
        found.append((int(rows.min()), int(cols.min()), lab, rows, cols))
    found.sort(key=lambda t: (t[0], t[1], t[2]))
    regions = []
    for new_label, (_, _, _, rows, cols) in enumerate(found, start=1):
        pixels = np.column_stack([cols, rows]).astype(np.int64)
        bbox = BBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)
        score = 0.0
        if values is not None:
            v = values.data[0][rows, cols]
            ok = values.valid_mask(0)[rows, cols]
            score = float(v[ok].mean()) if ok.any() else 0.0
        regions.append(DetectionRegion(new_label, pixels, bbox, score))
    return regions


def height_filter(region: DetectionRegion, heights, *, building_min_height: float = 0.5,
                  tall_height: float = 3.0, tall_fraction: float = 0.1) -> bool:
    """True to keep the region, False when tall buildings dominate it.

    ``heights`` is a RasterGrid or 2-d array co-registered with the grid the
    region was extracted from. NoData heights count as bare ground.
    """
    if heights is None:
        raise MissingHeightGrid("height filtering requested without a height grid")
    if isinstance(heights, RasterGrid):
        h = np.where(heights.valid_mask(0), heights.data[0], 0.0)
    else:
        h = np.nan_to_num(np.asarray(heights, dtype=np.float64), nan=0.0)
    vals = h[region.rows, region.cols]
    buildings = vals > building_min_height
    n_buildings = int(buildings.sum())
    if n_buildings == 0:
        return True
    n_tall = int((vals[buildings] > tall_height).sum())
    return not (n_tall / n_buildings > tall_fraction)


# --- vectorisation -------------------------------------------------------------

def _signed_area(ring) -> float:
    a = 0.0
    for (x0, y0), (x1, y1) in zip(ring[:-1], ring[1:]):
        a += x0 * y1 - x1 * y0
    return a / 2.0


def trace_rings(mask: np.ndarray) -> list[list[tuple[int, int]]]:
    """Boundary rings of a binary mask in pixel-edge coordinates (x=col, y=row).

    Each ring is closed, has collinear vertices removed, and keeps the
    foreground on its left in (x, y) axes; outer rings therefore have
    positive signed area there and holes negative. Diagonal pinch points
    join the two foreground pixels (8-connectivity).
    """
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    rows, cols = np.nonzero(mask)
    edges = []  # (start, end) with foreground on the left
    for r, c in zip(rows.tolist(), cols.tolist()):
        pr, pc = r + 1, c + 1
        if not padded[pr - 1, pc]:
            edges.append(((c, r), (c + 1, r)))
        if not padded[pr, pc + 1]:
            edges.append(((c + 1, r), (c + 1, r + 1)))
        if not padded[pr + 1, pc]:
            edges.append(((c + 1, r + 1), (c, r + 1)))
        if not padded[pr, pc - 1]:
            edges.append(((c, r + 1), (c, r)))
    outgoing: dict = {}
    for e in edges:
        outgoing.setdefault(e[0], []).append(e)

    def successor(e):
        (x0, y0), (x1, y1) = e
        dx, dy = x1 - x0, y1 - y0
        options = outgoing[e[1]]
        if len(options) == 1:
            return options[0]
        right = (dy, -dx)
        for o in options:
            if (o[1][0] - o[0][0], o[1][1] - o[0][1]) == right:
                return o
        return options[0]

    used = set()
    rings = []
    for start in sorted(edges, key=lambda e: (e[0][1], e[0][0], e[1][1], e[1][0])):
        if start in used:
            continue
        ring = []
        e = start
        while e not in used:
            used.add(e)
            ring.append(e[0])
            e = successor(e)
        rings.append(_drop_collinear(ring))
    return rings


def _drop_collinear(points: list) -> list:
    n = len(points)
    kept = []
    for i in range(n):
        px, py = points[i - 1]
        cx, cy = points[i]
        nx, ny = points[(i + 1) % n]
        if (cx - px) * (ny - cy) - (cy - py) * (nx - cx) != 0:
            kept.append(points[i])
    # canonical start: lowest row, then lowest col
    k = min(range(len(kept)), key=lambda i: (kept[i][1], kept[i][0]))
    kept = kept[k:] + kept[:k]
    return kept + [kept[0]]


def vectorize(region: DetectionRegion, transform: GeoTransform) -> list:
    """Polygon rings in lon/lat: outer ring counterclockwise first, holes clockwise after."""
    if region.area_px == 0:
        raise ValueError("cannot vectorize an empty region")
    b = region.bbox
    x0, y0 = int(b.x0), int(b.y0)
    sub = np.zeros((int(b.y1) - y0, int(b.x1) - x0), dtype=bool)
    sub[region.rows - y0, region.cols - x0] = True
    rings = trace_rings(sub)
    outer = [r for r in rings if _signed_area(r) > 0]
    holes = [r for r in rings if _signed_area(r) < 0]
    geo = []
    for ring in outer + holes:
        geo.append([transform.corner_to_geo(x + x0, y + y0) for x, y in ring])
    # the pixel -> geo map flips orientation for north-up grids
    if geo and _signed_area(geo[0]) < 0:
        geo = [list(reversed(r)) for r in geo]
    return geo


# --- orchestration -----------------------------------------------------------

def align_heights(heights: RasterGrid, transform: GeoTransform, shape: tuple) -> np.ndarray:
    """Nearest-neighbour sample of ``heights`` onto a tile grid; outside or NoData -> 0."""
    h, w = shape
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    lon = transform.origin_lon + cols * transform.pixel_width
    lat = transform.origin_lat + rows * transform.pixel_height
    hc = np.floor((lon - heights.transform.origin_lon) / heights.transform.pixel_width + 0.5).astype(np.int64)
    hr = np.floor((lat - heights.transform.origin_lat) / heights.transform.pixel_height + 0.5).astype(np.int64)
    ok_c = (hc >= 0) & (hc < heights.width)
    ok_r = (hr >= 0) & (hr < heights.height)
    band = np.where(heights.valid_mask(0), heights.data[0], 0.0)
    out = np.zeros(shape, dtype=np.float64)
    rr, cc = np.meshgrid(np.flatnonzero(ok_r), np.flatnonzero(ok_c), indexing="ij")
    out[rr, cc] = band[hr[rr], hc[cc]]
    return out


@dataclass
class PipelineResult:
    regions: list
    report: dict


def composite_tile(tile: Tile, config: DetectConfig) -> RasterGrid:
    if not tile.frames:
        raise EmptyStack(f"tile {tile.name} has no frames")
    stack = NdbkiStack([ndbki(f) for f in tile.frames])
    return percentile_composite(stack, config.percentile)


def effective_threshold(otsu: float, config: DetectConfig) -> float:
    """Otsu splits any histogram, even one with no red pixels at all; an index
    at or below ``min_index`` is never treated as kiln-like."""
    return otsu if config.min_index is None else max(otsu, config.min_index)


def extract_tile_regions(name: str, composite: RasterGrid, threshold: float,
                         heights: Optional[RasterGrid], config: DetectConfig) -> tuple[list, int]:
    threshold = effective_threshold(threshold, config)
    seeds = candidate_seeds(composite, config.window, threshold)
    footprint = grow_footprints(seeds, composite, threshold)
    closed = morphological_closing(footprint, config.se_radius)
    regions = connected_components(closed, composite)
    rejected = 0
    if heights is not None:
        aligned = align_heights(heights, composite.transform, (composite.height, composite.width))
        kept = []
        for reg in regions:
            if height_filter(reg, aligned, building_min_height=config.building_min_height,
                             tall_height=config.tall_height, tall_fraction=config.tall_fraction):
                kept.append(reg)
            else:
                rejected += 1
        regions = kept
    for reg in regions:
        reg.polygon = vectorize(reg, composite.transform)
        reg.tile = name
    return regions, rejected


def _map(fn, items, jobs: Optional[int]):
    items = list(items)
    if jobs == 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _guard(fn):
    def run(arg):
        try:
            return True, fn(arg)
        except (KilnError, ValueError) as exc:
            return False, f"{type(exc).__name__}: {exc}"
    return run


def run_pipeline(tiles: Sequence[Tile], heights: Optional[RasterGrid] = None,
                 config: Optional[DetectConfig] = None) -> PipelineResult:
    """Run every stage over ``tiles``; per-tile failures go into the report."""
    config = config or DetectConfig()
    config.validate()
    use_heights = config.height_filter == "on" or (config.height_filter == "auto" and heights is not None)
    if use_heights and heights is None:
        raise MissingHeightGrid("height_filter='on' but no height grid was supplied")
    failures = []
    composites = _map(_guard(lambda t: composite_tile(t, config)), tiles, config.jobs)
    good = []
    for tile, (ok, value) in zip(tiles, composites):
        if ok:
            good.append((tile.name, value))
        else:
            failures.append({"tile": tile.name, "stage": "composite", "error": value})

    thresholds: dict = {}
    if config.threshold_scope == "scene" and good:
        pooled = np.concatenate([_valid_values(c) for _, c in good])
        try:
            t = otsu_threshold(pooled, config.otsu_bins)
            thresholds = {name: t for name, _ in good}
        except DegenerateHistogram as exc:
            failures.extend({"tile": name, "stage": "threshold", "error": f"DegenerateHistogram: {exc}"}
                            for name, _ in good)
            good = []
    elif good:
        results = _map(_guard(lambda item: otsu_threshold(item[1], config.otsu_bins)), good, config.jobs)
        kept = []
        for (name, comp), (ok, value) in zip(good, results):
            if ok:
                thresholds[name] = value
                kept.append((name, comp))
            else:
                failures.append({"tile": name, "stage": "threshold", "error": value})
        good = kept

    hgrid = heights if use_heights else None
    extracted = _map(_guard(lambda item: extract_tile_regions(item[0], item[1], thresholds[item[0]],
                                                              hgrid, config)), good, config.jobs)
    regions, rejected = [], 0
    processed = 0
    for (name, _), (ok, value) in zip(good, extracted):
        if ok:
            regions.extend(value[0])
            rejected += value[1]
            processed += 1
        else:
            failures.append({"tile": name, "stage": "extract", "error": value})
    failures.sort(key=lambda f: [t.name for t in tiles].index(f["tile"]))
    report = {
        "tiles_processed": processed,
        "regions_total": len(regions),
        "regions_rejected_by_height": rejected,
        "threshold_per_tile": {name: effective_threshold(thresholds[name], config) for name, _ in good},
        "otsu_per_tile": {name: thresholds[name] for name, _ in good},
        "failures": failures,
    }
    return PipelineResult(regions, report)
