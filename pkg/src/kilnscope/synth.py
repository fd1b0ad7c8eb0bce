"""Seeded generators for ground-truthed raster scenes and POI graphs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import PlacementFailure
from .geo import GeoPoint, GeoTransform
from .graph import PoiNode, SpatialGraph, knn_edges
from .metrics import BBox
from .raster import RasterGrid, dumps_geojson, feature_collection, write_grid, write_rgb_tile


# --- raster scenes -------------------------------------------------------------

@dataclass
class SceneSpec:
    seed: int = 0
    width: int = 512
    height: int = 512
    frames: int = 5
    kiln_count: int = 12
    kiln_radius_px: int = 8
    background_rgb: tuple = (70, 120, 60)
    kiln_rgb: tuple = (190, 80, 70)
    roof_rgb: tuple = (180, 75, 70)
    activity_probability: float = 0.6
    distractor_count: int = 3
    distractor_height_m: float = 12.0
    noise_sigma: float = 6.0
    origin_lon: float = 74.0
    origin_lat: float = 31.5
    pixel_size_deg: float = 1e-4

    def validate(self) -> None:
        if not 0 < self.activity_probability <= 1:
            raise ValueError("activity_probability must be in (0, 1]")
        if self.width < 1 or self.height < 1 or self.frames < 1:
            raise ValueError("width, height and frames must be >= 1")
        if self.kiln_count < 0 or self.distractor_count < 0 or self.kiln_radius_px < 1:
            raise ValueError("counts must be >= 0 and kiln_radius_px >= 1")

    @property
    def transform(self) -> GeoTransform:
        return GeoTransform(self.origin_lon, self.origin_lat, self.pixel_size_deg, -self.pixel_size_deg)


@dataclass
class PlantedObject:
    kind: str  # "kiln" or "roof"
    mask: np.ndarray  # full-scene boolean footprint
    bbox: BBox
    center: tuple


@dataclass
class GroundTruth:
    boxes: list = field(default_factory=list)
    polygons: list = field(default_factory=list)
    labels: Optional[np.ndarray] = None


@dataclass
class RasterScene:
    frames: list            # one 3-band RasterGrid per timestamp
    heights: RasterGrid
    truth: GroundTruth      # kilns only
    kilns: list
    distractors: list
    activity: np.ndarray    # (frames, kiln_count) bool


def _mask_bbox(mask: np.ndarray) -> BBox:
    rows, cols = np.nonzero(mask)
    return BBox(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


def _place(rng, spec: SceneSpec) -> list:
    r = spec.kiln_radius_px
    yy, xx = np.mgrid[0:spec.height, 0:spec.width]
    shapes = ["kiln"] * spec.kiln_count + ["roof"] * spec.distractor_count
    placed: list[PlantedObject] = []
    for kind in shapes:
        # roofs are rectangles of 2r x 1.5r pixels, circumscribed radius ~ 1.25 r
        half_w, half_h = (r, r) if kind == "kiln" else (r, max(1, int(round(0.75 * r))))
        reach = math.hypot(half_w, half_h) if kind == "roof" else r
        for _ in range(20000):
            cx = int(rng.integers(half_w + 2, spec.width - half_w - 2)) if spec.width > 2 * half_w + 4 else -1
            cy = int(rng.integers(half_h + 2, spec.height - half_h - 2)) if spec.height > 2 * half_h + 4 else -1
            if cx < 0 or cy < 0:
                raise PlacementFailure("scene too small for the requested objects")
            ok = all(math.hypot(cx - o.center[0], cy - o.center[1]) >= reach + o.center[2] + 2 * r
                     for o in placed)
            if ok:
                break
        else:
            raise PlacementFailure(f"could not place {len(shapes)} objects in {spec.width}x{spec.height}")
        if kind == "kiln":
            mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        else:
            mask = (np.abs(xx - cx) <= half_w - 1) & (np.abs(yy - cy) <= half_h - 1)
        placed.append(PlantedObject(kind, mask, _mask_bbox(mask), (cx, cy, reach)))
    return placed


def gen_raster_scene(spec: SceneSpec) -> RasterScene:
    """Red kiln disks flickering across frames over a noisy green background,
    plus permanently red tall-roof distractors."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    objects = _place(rng, spec)
    kilns = [o for o in objects if o.kind == "kiln"]
    roofs = [o for o in objects if o.kind == "roof"]
    activity = rng.random((spec.frames, len(kilns))) < spec.activity_probability
    bg = np.array(spec.background_rgb, dtype=np.float64)[:, None, None]
    frames = []
    for f in range(spec.frames):
        img = np.broadcast_to(bg, (3, spec.height, spec.width)).copy()
        for roof in roofs:
            img[:, roof.mask] = np.array(spec.roof_rgb, dtype=np.float64)[:, None]
        for k, kiln in enumerate(kilns):
            if activity[f, k]:
                img[:, kiln.mask] = np.array(spec.kiln_rgb, dtype=np.float64)[:, None]
        img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
        frames.append(RasterGrid(np.clip(np.rint(img), 0, 255), spec.transform))
    heights = np.zeros((spec.height, spec.width))
    for roof in roofs:
        heights[roof.mask] = spec.distractor_height_m
    truth = GroundTruth(boxes=[k.bbox for k in kilns], polygons=[_outline(k.mask, spec.transform) for k in kilns])
    return RasterScene(frames, RasterGrid(heights, spec.transform), truth, kilns, roofs, activity)


def _outline(mask: np.ndarray, transform: GeoTransform) -> list:
    from .rsdetect import connected_components, vectorize

    region = connected_components(mask)[0]
    return vectorize(region, transform)


class _Outline:
    def __init__(self, polygon, area_px, score=1.0):
        self.polygon, self.area_px, self.score = polygon, area_px, score


def truth_geojson(objects: list, transform: GeoTransform) -> str:
    items = [_Outline(_outline(o.mask, transform), int(o.mask.sum())) for o in objects]
    return dumps_geojson(feature_collection(items))


def split_tiles(grid: RasterGrid, tile_size: Optional[int]) -> list:
    """Cut a grid into (name, subgrid) tiles in row-major order."""
    if not tile_size or (tile_size >= grid.width and tile_size >= grid.height):
        return [("tile_000_000", grid)]
    gt = grid.transform
    out = []
    for ty, r0 in enumerate(range(0, grid.height, tile_size)):
        for tx, c0 in enumerate(range(0, grid.width, tile_size)):
            sub = grid.data[:, r0:r0 + tile_size, c0:c0 + tile_size]
            t = GeoTransform(gt.origin_lon + c0 * gt.pixel_width, gt.origin_lat + r0 * gt.pixel_height,
                             gt.pixel_width, gt.pixel_height)
            out.append((f"tile_{ty:03d}_{tx:03d}", RasterGrid(sub.copy(), t, grid.nodata)))
    return out


def write_scene(scene: RasterScene, out_dir, tile_size: Optional[int] = None, fmt: str = "kgrd") -> Path:
    """Write frames/frame_XXX/<tile>.kgrd|png, heights.kgrd and ground-truth GeoJSON."""
    out = Path(out_dir)
    frames_dir = out / "frames"
    for f, frame in enumerate(scene.frames):
        fdir = frames_dir / f"frame_{f:03d}"
        fdir.mkdir(parents=True, exist_ok=True)
        for name, tile in split_tiles(frame, tile_size):
            if fmt == "png":
                write_rgb_tile(tile, fdir / f"{name}.png")
            else:
                write_grid(tile, fdir / f"{name}.kgrd")
    write_grid(scene.heights, out / "heights.kgrd")
    transform = scene.heights.transform
    (out / "ground_truth.geojson").write_text(truth_geojson(scene.kilns, transform) + "\n")
    (out / "distractors.geojson").write_text(truth_geojson(scene.distractors, transform) + "\n")
    return frames_dir


# --- graphs ------------------------------------------------------------------

@dataclass
class GraphSpec:
    seed: int = 0
    node_count: int = 1000
    k: int = 8
    anisotropy_axis_deg: float = 0.0
    class_rule: str = "anisotropic"  # or "feature_separable"
    noise_features: int = 1
    feature_dim: int = 4
    sigma: float = 0.5
    lon_min: float = 74.0
    lat_min: float = 31.0
    extent_deg: float = 0.5

    def validate(self) -> None:
        if self.node_count < 20:
            raise ValueError("node_count must be >= 20")
        if self.class_rule not in ("anisotropic", "feature_separable"):
            raise ValueError("class_rule must be 'anisotropic' or 'feature_separable'")


def _scatter(rng, spec: GraphSpec) -> tuple[np.ndarray, np.ndarray]:
    lons = spec.lon_min + rng.uniform(0.0, spec.extent_deg, spec.node_count)
    lats = spec.lat_min + rng.uniform(0.0, spec.extent_deg, spec.node_count)
    return lons, lats


def axis_labels(graph: SpatialGraph, axis_deg: float) -> np.ndarray:
    """1 where most of a node's edge bearings lie within 45 degrees of the
    (undirected) axis; an exact split goes to the sign of mean cos 2(theta - axis)."""
    axis = math.radians(axis_deg)
    c2 = np.cos(2.0 * (graph.bearing - axis))
    n = graph.num_nodes
    inside = np.bincount(graph.src, weights=(c2 > 0).astype(np.float64), minlength=n)
    degree = np.bincount(graph.src, minlength=n).astype(np.float64)
    mean_c2 = np.bincount(graph.src, weights=c2, minlength=n) / np.maximum(degree, 1)
    labels = np.where(2 * inside > degree, 1, np.where(2 * inside < degree, 0, (mean_c2 > 0).astype(int)))
    return labels.astype(np.int64)


def gen_anisotropic_graph(spec: GraphSpec) -> tuple[SpatialGraph, GroundTruth]:
    """Labels depend only on edge directions; features are label-free noise
    plus a constant-1 column."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lons, lats = _scatter(rng, spec)
    noise = rng.normal(size=(spec.node_count, spec.noise_features))
    feats = np.hstack([noise, np.ones((spec.node_count, 1))])
    nodes = [PoiNode(i, GeoPoint(float(lons[i]), float(lats[i])), feats[i]) for i in range(spec.node_count)]
    names = [f"noise_{j}" for j in range(spec.noise_features)] + ["const"]
    graph = knn_edges(nodes, spec.k, names)
    labels = axis_labels(graph, spec.anisotropy_axis_deg)
    for node, y in zip(graph.nodes, labels):
        node.label = int(y)
    return graph, GroundTruth(labels=labels)


def gen_feature_separable_graph(spec: GraphSpec) -> tuple[SpatialGraph, GroundTruth]:
    """Balanced random labels; features ~ N(+1 or -1, sigma^2) per dimension."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = rng.integers(0, 2, spec.node_count)
    means = np.where(labels[:, None] == 1, 1.0, -1.0)
    feats = means + spec.sigma * rng.normal(size=(spec.node_count, spec.feature_dim))
    lons, lats = _scatter(rng, spec)
    nodes = [PoiNode(i, GeoPoint(float(lons[i]), float(lats[i])), feats[i], int(labels[i]))
             for i in range(spec.node_count)]
    graph = knn_edges(nodes, spec.k, [f"f_{j}" for j in range(spec.feature_dim)])
    return graph, GroundTruth(labels=labels.astype(np.int64))


def gen_graph(spec: GraphSpec) -> tuple[SpatialGraph, GroundTruth]:
    if spec.class_rule == "anisotropic":
        return gen_anisotropic_graph(spec)
    return gen_feature_separable_graph(spec)
