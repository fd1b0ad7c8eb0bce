"""Geodesy and georeferencing primitives.

Angles are in degrees at the API boundary; bearings come back in radians.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateEdge

EARTH_RADIUS_M = 6_371_000.0


def _wrap_lon(lon: float) -> float:
    return (lon + 180.0) % 360.0 - 180.0


@dataclass(frozen=True)
class GeoPoint:
    lon: float
    lat: float

    def __post_init__(self):
        if not (-90.0 <= self.lat <= 90.0) or not math.isfinite(self.lat):
            raise ValueError(f"latitude out of range: {self.lat}")
        if not math.isfinite(self.lon):
            raise ValueError(f"longitude not finite: {self.lon}")
        if not (-180.0 <= self.lon < 180.0):
            object.__setattr__(self, "lon", _wrap_lon(self.lon))


@dataclass(frozen=True)
class GeoTransform:
    """North-up affine transform.

    ``origin_lon``/``origin_lat`` locate the *center* of pixel (0, 0); the outer
    corner of the grid sits half a pixel further out.
    """

    origin_lon: float
    origin_lat: float
    pixel_width: float
    pixel_height: float

    def __post_init__(self):
        if not self.pixel_width > 0:
            raise ValueError("pixel_width must be > 0")
        if self.pixel_height == 0:
            raise ValueError("pixel_height must be non-zero")
        for v in (self.origin_lon, self.origin_lat, self.pixel_width, self.pixel_height):
            if not math.isfinite(v):
                raise ValueError("geotransform fields must be finite")

    def corner_to_geo(self, x, y):
        """Map pixel-edge coordinates (x=col edge, y=row edge) to lon/lat."""
        return (self.origin_lon + (x - 0.5) * self.pixel_width,
                self.origin_lat + (y - 0.5) * self.pixel_height)


def haversine_distance(a: GeoPoint, b: GeoPoint) -> float:
    """Great-circle distance in meters."""
    phi1 = math.radians(a.lat)
    phi2 = math.radians(b.lat)
    dphi = phi2 - phi1
    dlam = math.radians(b.lon - a.lon)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2.0) ** 2
    h = min(1.0, max(0.0, h))
    return 2.0 * EARTH_RADIUS_M * math.asin(math.sqrt(h))


def haversine_many(lon0: float, lat0: float, lons: np.ndarray, lats: np.ndarray) -> np.ndarray:
    """Vectorised haversine from one point to many (meters)."""
    phi1 = np.radians(lat0)
    phi2 = np.radians(lats)
    dphi = phi2 - phi1
    dlam = np.radians(lons - lon0)
    h = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def bearing(a: GeoPoint, b: GeoPoint) -> float:
    """Planar bearing from a to b in radians, 0 = east, pi/2 = north.

    Offsets are taken in a local equirectangular plane scaled by the cosine
    of the mean latitude of the two points.
    """
    if a.lon == b.lon and a.lat == b.lat:
        raise DegenerateEdge(f"coincident points {a} and {b}")
    dlon = b.lon - a.lon
    # shortest way around the antimeridian
    if dlon > 180.0:
        dlon -= 360.0
    elif dlon < -180.0:
        dlon += 360.0
    mid_lat = math.radians((a.lat + b.lat) / 2.0)
    dx = math.radians(dlon) * math.cos(mid_lat)
    dy = math.radians(b.lat - a.lat)
    theta = math.atan2(dy, dx)
    if theta == -math.pi:
        theta = math.pi
    return theta


def pixel_to_geo(gt: GeoTransform, col: float, row: float) -> GeoPoint:
    return GeoPoint(gt.origin_lon + col * gt.pixel_width, gt.origin_lat + row * gt.pixel_height)


def geo_to_pixel_frac(gt: GeoTransform, point: GeoPoint) -> tuple[float, float]:
    return ((point.lon - gt.origin_lon) / gt.pixel_width,
            (point.lat - gt.origin_lat) / gt.pixel_height)


def geo_to_pixel(gt: GeoTransform, point: GeoPoint) -> tuple[int, int]:
    """Index (col, row) of the pixel whose footprint contains ``point``."""
    fc, fr = geo_to_pixel_frac(gt, point)
    return int(math.floor(fc + 0.5)), int(math.floor(fr + 0.5))
