"""POI graph construction: CSV loading, k-NN edges with bearings, raster
feature sampling with buffered-mean imputation, and feature standardisation.

Edges are directed from a centre node ``src`` to one of its k nearest
neighbours ``dst``; messages flow dst -> src and ``bearing`` is measured
from src towards dst.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (DuplicateId, MissingColumn, MissingCoordinates, NonNumericCell,
                     SinglePoint)
from .geo import GeoPoint, bearing, geo_to_pixel_frac, haversine_distance, haversine_many
from .raster import RasterGrid

log = logging.getLogger(__name__)

DEFAULT_K = 8
DEFAULT_BUFFER_PX = 3


@dataclass
class PoiNode:
    id: int
    location: GeoPoint
    features: np.ndarray
    label: Optional[int] = None

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.features)


@dataclass
class SpatialGraph:
    nodes: list
    src: np.ndarray
    dst: np.ndarray
    distance: np.ndarray
    bearing: np.ndarray
    k: int
    feature_names: list = field(default_factory=list)

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return int(self.src.size)

    def features(self) -> np.ndarray:
        if not self.nodes:
            return np.zeros((0, len(self.feature_names)))
        return np.vstack([n.features for n in self.nodes]).astype(np.float64)

    def labels(self) -> np.ndarray:
        """Labels as an int array with -1 for unlabeled nodes."""
        return np.array([-1 if n.label is None else n.label for n in self.nodes], dtype=np.int64)

    def with_features(self, features: np.ndarray, names: Optional[list] = None) -> "SpatialGraph":
        nodes = [replace(n, features=np.asarray(features[i], dtype=np.float64)) for i, n in enumerate(self.nodes)]
        return replace(self, nodes=nodes, feature_names=list(names if names is not None else self.feature_names))

    def edge_list(self) -> list:
        ids = [n.id for n in self.nodes]
        return [(ids[s], ids[d], float(dist), float(b))
                for s, d, dist, b in zip(self.src, self.dst, self.distance, self.bearing)]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "feature_names": list(self.feature_names),
            "nodes": [{"id": n.id, "lon": n.location.lon, "lat": n.location.lat, "label": n.label,
                       "features": [None if math.isnan(v) else float(v) for v in n.features]}
                      for n in self.nodes],
            "edges": [list(e) for e in self.edge_list()],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SpatialGraph":
        nodes = [PoiNode(int(n["id"]), GeoPoint(float(n["lon"]), float(n["lat"])),
                         np.array([np.nan if v is None else v for v in n["features"]], dtype=np.float64),
                         None if n.get("label") is None else int(n["label"]))
                 for n in doc["nodes"]]
        index = {n.id: i for i, n in enumerate(nodes)}
        edges = doc.get("edges", [])
        src = np.array([index[e[0]] for e in edges], dtype=np.int64)
        dst = np.array([index[e[1]] for e in edges], dtype=np.int64)
        dist = np.array([e[2] for e in edges], dtype=np.float64)
        bear = np.array([e[3] for e in edges], dtype=np.float64)
        return cls(nodes, src, dst, dist, bear, int(doc["k"]), list(doc.get("feature_names", [])))


def dumps_graph(graph: SpatialGraph) -> str:
    return json.dumps(graph.to_dict(), separators=(",", ":"), allow_nan=False)


def write_graph(graph: SpatialGraph, path) -> None:
    Path(path).write_text(dumps_graph(graph) + "\n")


def read_graph(path) -> SpatialGraph:
    return SpatialGraph.from_dict(json.loads(Path(path).read_text()))


# --- loading -----------------------------------------------------------------

def _parse_float(text: str, row: int, column: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise NonNumericCell(row, column, text) from None
    if not math.isfinite(v):
        raise NonNumericCell(row, column, text)
    return v


def load_pois(csv_path, feature_columns: Optional[Sequence[str]] = None,
              label_column: Optional[str] = "label") -> tuple[list, list]:
    """Read POIs from CSV; returns (nodes, feature_names).

    Row numbers in errors count the header as row 1. Blank feature cells
    become NaN and are filled later by :func:`impute_features`.
    """
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = list(reader.fieldnames or [])
        for col in ("id", "lon", "lat"):
            if col not in header:
                raise MissingColumn(f"required column {col!r} not in header")
        if label_column and label_column not in header:
            label_column = None
        if feature_columns is None:
            reserved = {"id", "lon", "lat", label_column}
            feature_columns = [c for c in header if c not in reserved]
        for col in feature_columns:
            if col not in header:
                raise MissingColumn(f"feature column {col!r} not in header")
        nodes, seen, bad_rows = [], set(), []
        for rownum, rec in enumerate(reader, start=2):
            raw_id = (rec["id"] or "").strip()
            if not raw_id:
                raise NonNumericCell(rownum, "id", raw_id)
            try:
                node_id = int(raw_id)
            except ValueError:
                raise NonNumericCell(rownum, "id", raw_id) from None
            if node_id in seen:
                raise DuplicateId(f"id {node_id} repeated at row {rownum}")
            seen.add(node_id)
            lon_s, lat_s = (rec["lon"] or "").strip(), (rec["lat"] or "").strip()
            if not lon_s or not lat_s:
                bad_rows.append(rownum)
                continue
            loc = GeoPoint(_parse_float(lon_s, rownum, "lon"), _parse_float(lat_s, rownum, "lat"))
            feats = []
            for col in feature_columns:
                cell = (rec[col] or "").strip()
                feats.append(np.nan if cell == "" else _parse_float(cell, rownum, col))
            label = None
            if label_column:
                cell = (rec[label_column] or "").strip()
                if cell:
                    v = _parse_float(cell, rownum, label_column)
                    if v != int(v) or v < 0:
                        raise NonNumericCell(rownum, label_column, cell)
                    label = int(v)
            nodes.append(PoiNode(node_id, loc, np.array(feats, dtype=np.float64), label))
        if bad_rows:
            raise MissingCoordinates(bad_rows)
    return nodes, list(feature_columns)


# --- edges -------------------------------------------------------------------

def knn_edges(nodes: Sequence[PoiNode], k: int = DEFAULT_K,
              feature_names: Optional[list] = None) -> SpatialGraph:
    """Directed k-NN graph by great-circle distance; ties go to the smaller node id."""
    n = len(nodes)
    if n < 2:
        raise SinglePoint(f"need at least 2 nodes, got {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    kk = min(k, n - 1)
    lons = np.array([p.location.lon for p in nodes])
    lats = np.array([p.location.lat for p in nodes])
    ids = np.array([p.id for p in nodes])
    if len(set(ids.tolist())) != n:
        raise DuplicateId("node ids are not unique")
    src, dst, dist, bear = [], [], [], []
    for i in range(n):
        d = haversine_many(lons[i], lats[i], lons, lats)
        d[i] = np.inf
        # vectorised trig can differ from libm by an ulp: shortlist with a small
        # margin, then rank the shortlist with the scalar distance
        cutoff = np.partition(d, kk - 1)[kk - 1]
        shortlist = np.flatnonzero(d <= cutoff * (1 + 1e-9) + 1e-9)
        exact = [(haversine_distance(nodes[i].location, nodes[j].location), int(ids[j]), j)
                 for j in shortlist.tolist()]
        for dj, _, j in sorted(exact)[:kk]:
            src.append(i)
            dst.append(j)
            dist.append(dj)
            bear.append(bearing(nodes[i].location, nodes[j].location))
    if feature_names is None:
        feature_names = [f"f_{c}" for c in range(len(nodes[0].features))]
    return SpatialGraph(list(nodes), np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64),
                        np.array(dist), np.array(bear), k, list(feature_names))


# --- features ----------------------------------------------------------------

def sample_features(node: PoiNode, rasters: Sequence[RasterGrid], buffer_px: int = DEFAULT_BUFFER_PX) -> np.ndarray:
    """One value per raster band at the node location.

    Fallback chain for NoData: mean of valid pixels in the
    (2*buffer+1)^2 window, then the band's global mean, then 0.
    """
    out = []
    for grid in rasters:
        fc, fr = geo_to_pixel_frac(grid.transform, node.location)
        c, r = math.floor(fc + 0.5), math.floor(fr + 0.5)
        inside = 0 <= c < grid.width and 0 <= r < grid.height
        for b in range(grid.bands):
            band = grid.data[b]
            valid = grid.valid_mask(b)
            if inside and valid[r, c]:
                out.append(float(band[r, c]))
                continue
            r0, r1 = max(r - buffer_px, 0), min(r + buffer_px + 1, grid.height)
            c0, c1 = max(c - buffer_px, 0), min(c + buffer_px + 1, grid.width)
            if r0 < r1 and c0 < c1 and valid[r0:r1, c0:c1].any():
                out.append(float(band[r0:r1, c0:c1][valid[r0:r1, c0:c1]].mean()))
            elif valid.any():
                out.append(float(band[valid].mean()))
            else:
                log.warning("band %d of a raster is entirely NoData; node %s gets 0", b, node.id)
                out.append(0.0)
    return np.array(out, dtype=np.float64)


def impute_features(graph: SpatialGraph) -> SpatialGraph:
    """Fill NaN feature cells with the mean of the node's valid k-NN neighbours,
    falling back to the column mean and finally 0."""
    x = graph.features()
    if not np.isnan(x).any():
        return graph
    filled = x.copy()
    col_valid = ~np.isnan(x)
    col_means = np.array([x[col_valid[:, j], j].mean() if col_valid[:, j].any() else 0.0
                          for j in range(x.shape[1])])
    for i, j in zip(*np.nonzero(np.isnan(x))):
        nbrs = graph.dst[graph.src == i]
        vals = x[nbrs, j]
        vals = vals[~np.isnan(vals)]
        filled[i, j] = vals.mean() if vals.size else col_means[j]
    return graph.with_features(filled)


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        safe = np.where(self.std > 0, self.std, 1.0)
        return np.where(self.std > 0, (x - self.mean) / safe, 0.0)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def fit_feature_stats(x: np.ndarray, rows=None) -> FeatureStats:
    x = np.asarray(x, dtype=np.float64)
    ref = x if rows is None else x[rows]
    if ref.shape[0] < 2:
        raise ValueError("standardisation needs at least 2 rows")
    return FeatureStats(ref.mean(axis=0), ref.std(axis=0))


def standardize_features(graph: SpatialGraph, rows=None,
                         stats: Optional[FeatureStats] = None) -> tuple[SpatialGraph, FeatureStats]:
    """z-score features using ``rows`` (e.g. the training split) or given stats."""
    x = graph.features()
    if stats is None:
        stats = fit_feature_stats(x, rows)
    return graph.with_features(stats.apply(x)), stats


def build_graph(csv_path, rasters: Sequence[RasterGrid] = (), k: int = DEFAULT_K,
                buffer_px: int = DEFAULT_BUFFER_PX, feature_columns=None,
                label_column: Optional[str] = "label", raster_names: Sequence[str] = ()) -> SpatialGraph:
    nodes, names = load_pois(csv_path, feature_columns, label_column)
    if rasters:
        for node in nodes:
            node.features = np.concatenate([node.features, sample_features(node, rasters, buffer_px)])
        for i, grid in enumerate(rasters):
            stem = raster_names[i] if i < len(raster_names) else f"raster{i}"
            names.extend(f"{stem}_b{b}" for b in range(grid.bands))
    graph = knn_edges(nodes, k, names)
    return impute_features(graph)
