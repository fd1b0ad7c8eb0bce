"""Grid and vector IO: the KGRD binary format, PNG tiles with JSON sidecars,
and GeoJSON output.

KGRD layout (all little-endian)::

    offset  size  field
    0       4     magic b"KGRD"
    4       2     u16 version (= 1)
    6       4     u32 width
    10      4     u32 height
    14      2     u16 bands
    16      1     u8  dtype code (1 = f32, 2 = f64)
    17      1     u8  nodata-present flag
    18      8     f64 nodata
    26      48    6 x f64 geotransform, GDAL order:
                  origin_lon, pixel_width, 0, origin_lat, 0, pixel_height
    74      ...   band-sequential samples, row-major within a band
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
from PIL import Image

from .errors import (BadMagic, DimensionMismatch, MissingSidecar, RasterFormatError,
                     TruncatedFile, UnsupportedVersion)
from .geo import GeoTransform

MAGIC = b"KGRD"
VERSION = 1
_HEADER = struct.Struct("<4sHIIHBBd6d")
HEADER_SIZE = _HEADER.size  # 74
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TILE_SIZE = 256


@dataclass
class RasterGrid:
    """Multi-band float64 grid; ``data`` has shape (bands, height, width)."""

    data: np.ndarray
    transform: GeoTransform
    nodata: Optional[float] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[np.newaxis]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"grid data must be (bands, height, width), got {data.shape}")
        self.data = data

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def valid_mask(self, band: Optional[int] = None) -> np.ndarray:
        """True where a sample is neither NoData nor NaN (per band, or all bands when band is None)."""
        values = self.data if band is None else self.data[band]
        mask = ~np.isnan(values)
        if self.nodata is not None and not math.isnan(self.nodata):
            mask &= values != self.nodata
        if band is None:
            mask = mask.all(axis=0)
        return mask

    def band(self, index: int) -> np.ndarray:
        return self.data[index]


def write_grid(grid: RasterGrid, path, dtype_code: int = 2) -> None:
    if dtype_code not in _DTYPES:
        raise ValueError(f"unknown dtype code {dtype_code}")
    gt = grid.transform
    header = _HEADER.pack(
        MAGIC, VERSION, grid.width, grid.height, grid.bands, dtype_code,
        1 if grid.nodata is not None else 0,
        float(grid.nodata) if grid.nodata is not None else 0.0,
        gt.origin_lon, gt.pixel_width, 0.0, gt.origin_lat, 0.0, gt.pixel_height,
    )
    payload = np.ascontiguousarray(grid.data, dtype=_DTYPES[dtype_code]).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def parse_grid(buf: bytes) -> RasterGrid:
    if len(buf) < 4:
        raise TruncatedFile(f"{len(buf)} bytes is shorter than the magic")
    if buf[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, found {buf[:4]!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedFile(f"header needs {HEADER_SIZE} bytes, file has {len(buf)}")
    (_, version, width, height, bands, dtype_code, has_nodata, nodata,
     gx0, gx1, gx2, gy0, gy1, gy2) = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise UnsupportedVersion(f"KGRD version {version}")
    if dtype_code not in _DTYPES:
        raise RasterFormatError(f"unknown dtype code {dtype_code}")
    if gx2 != 0.0 or gy1 != 0.0:
        raise RasterFormatError("rotated geotransforms are not supported")
    if width < 1 or height < 1 or bands < 1:
        raise RasterFormatError(f"empty grid {width}x{height}x{bands}")
    dtype = _DTYPES[dtype_code]
    count = width * height * bands
    need = HEADER_SIZE + count * dtype.itemsize
    if len(buf) < need:
        raise TruncatedFile(f"expected {need} bytes, file has {len(buf)}")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=HEADER_SIZE)
    data = data.astype(np.float64).reshape(bands, height, width)
    return RasterGrid(data, GeoTransform(gx0, gy0, gx1, gy2), nodata if has_nodata else None)


def read_grid(path) -> RasterGrid:
    return parse_grid(Path(path).read_bytes())


def read_sidecar(path) -> GeoTransform:
    path = Path(path)
    if not path.exists():
        raise MissingSidecar(f"sidecar not found: {path}")
    meta = json.loads(path.read_text())
    try:
        return GeoTransform(float(meta["origin_lon"]), float(meta["origin_lat"]),
                            float(meta["pixel_width"]), float(meta["pixel_height"]))
    except KeyError as exc:
        raise RasterFormatError(f"sidecar {path} lacks key {exc.args[0]!r}") from None


def write_sidecar(transform: GeoTransform, path) -> None:
    meta = {
        "origin_lon": transform.origin_lon,
        "origin_lat": transform.origin_lat,
        "pixel_width": transform.pixel_width,
        "pixel_height": transform.pixel_height,
    }
    Path(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_rgb_tile(png_path, sidecar_json_path=None, *, allow_any_size: bool = False) -> RasterGrid:
    """Load an 8-bit RGB tile as a 3-band grid with values in [0, 255]."""
    png_path = Path(png_path)
    sidecar = Path(sidecar_json_path) if sidecar_json_path else png_path.with_suffix(".json")
    transform = read_sidecar(sidecar)
    with Image.open(png_path) as img:
        rgb = np.asarray(img.convert("RGB"), dtype=np.float64)
    h, w = rgb.shape[:2]
    if not allow_any_size and (h, w) != (TILE_SIZE, TILE_SIZE):
        raise DimensionMismatch(f"{png_path.name}: tile is {w}x{h}, expected {TILE_SIZE}x{TILE_SIZE}")
    return RasterGrid(np.moveaxis(rgb, -1, 0), transform)


def write_rgb_tile(grid: RasterGrid, png_path) -> None:
    if grid.bands != 3:
        raise ValueError("RGB tile needs 3 bands")
    arr = np.clip(np.rint(grid.data), 0, 255).astype(np.uint8)
    Image.fromarray(np.moveaxis(arr, 0, -1), mode="RGB").save(png_path)
    write_sidecar(grid.transform, Path(png_path).with_suffix(".json"))


# --- GeoJSON -----------------------------------------------------------------

def _ring_coords(ring) -> list:
    return [[float(x), float(y)] for x, y in ring]


def feature_collection(regions: Iterable, extra_properties=None) -> dict:
    features = []
    for idx, region in enumerate(regions):
        rings = region.polygon
        for ring in rings:
            if len(ring) < 4 or tuple(ring[0]) != tuple(ring[-1]):
                raise ValueError(f"region {idx}: ring not closed or too short")
        props = {"id": idx, "area_px": int(region.area_px), "score": float(region.score)}
        if extra_properties:
            props.update(extra_properties(idx, region))
        features.append({
            "type": "Feature",
            "geometry": {"type": "Polygon", "coordinates": [_ring_coords(r) for r in rings]},
            "properties": props,
        })
    return {"type": "FeatureCollection", "features": features}


def dumps_geojson(collection: dict) -> str:
    return json.dumps(collection, separators=(",", ":"), allow_nan=False)


def write_geojson(regions, path) -> None:
    Path(path).write_text(dumps_geojson(feature_collection(regions)) + "\n")


def read_geojson_polygons(path) -> list[list]:
    """Return the ring lists of every Polygon/MultiPolygon feature, in file order."""
    doc = json.loads(Path(path).read_text())
    if doc.get("type") != "FeatureCollection":
        raise RasterFormatError(f"{path}: not a FeatureCollection")
    out = []
    for feat in doc["features"]:
        geom = feat.get("geometry") or {}
        if geom.get("type") == "Polygon":
            out.append(geom["coordinates"])
        elif geom.get("type") == "MultiPolygon":
            out.append([ring for poly in geom["coordinates"] for ring in poly])
        else:
            raise RasterFormatError(f"{path}: unsupported geometry {geom.get('type')!r}")
    return out

