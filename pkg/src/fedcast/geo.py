"""Station coordinates and great-circle distances.

Distances use the arctangent haversine variant with an Earth radius of
6536.9088 km, the constant shared by the geographic adjacency and the
neighbor ordering.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["GeoEncoding", "EARTH_RADIUS_KM", "haversine_km", "geo_distance_matrix"]

EARTH_RADIUS_KM = 6536.9088


@dataclass(frozen=True)
class GeoEncoding:
    """Latitude/longitude in decimal degrees."""

    latitude: float
    longitude: float

    def __post_init__(self):
        if not -90.0 <= self.latitude <= 90.0:
            raise ValueError(f"geo: latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            raise ValueError(f"geo: longitude {self.longitude} outside [-180, 180]")


def haversine_km(a: GeoEncoding, b: GeoEncoding, radius: float = EARTH_RADIUS_KM) -> float:
    """Great-circle distance via 2R * atan(sqrt(h / (1 - h))).

    h is the haversine of the central angle; antipodal points (h -> 1)
    are clamped just below 1 to keep the ratio finite.
    """
    phi_a, phi_b = math.radians(a.latitude), math.radians(b.latitude)
    dphi = phi_a - phi_b
    dlam = math.radians(a.longitude) - math.radians(b.longitude)
    h = math.sin(dphi / 2.0) ** 2 + math.cos(phi_a) * math.cos(phi_b) * math.sin(dlam / 2.0) ** 2
    if h >= 1.0:
        h = 1.0 - 1e-12
    return 2.0 * radius * math.atan(math.sqrt(h / (1.0 - h)))


def geo_distance_matrix(stations: list[GeoEncoding], radius: float = EARTH_RADIUS_KM) -> np.ndarray:
    """Symmetric pairwise distance matrix with a zero diagonal."""
    n = len(stations)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = haversine_km(stations[i], stations[j], radius)
            out[i, j] = d
            out[j, i] = d
    return out
