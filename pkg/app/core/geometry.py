"""
Region geometry in WGS84 degrees
GeoJSON polygons, even-odd point-in-polygon tests and uniform sampling
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.errors import ConfigError, DegenerateGeometryError, GeometryError

logger = logging.getLogger(__name__)

NO_SUBREGION = "_none"
# Distance (degrees) under which a point counts as lying on an edge
EDGE_TOLERANCE = 1e-12
CONTAINMENT_TOLERANCE = 1e-6
MAX_PROPOSALS = 10_000_000
MIN_ACCEPTANCE = 1e-4


@dataclass
class Polygon:
    """
    Possibly multi-part polygon with holes

    ``parts`` is a list of polygons, each a list of closed rings given as
    k x 2 arrays of (longitude, latitude); the first ring of a part is its
    exterior, the others are holes.
    """
    parts: List[List[np.ndarray]]

    @property
    def rings(self) -> List[np.ndarray]:
        return [ring for part in self.parts for ring in part]

    def bounds(self) -> np.ndarray:
        """(min_lon, min_lat, max_lon, max_lat)"""
        stacked = np.vstack(self.rings)
        return np.concatenate([stacked.min(axis=0), stacked.max(axis=0)])

    def to_geojson(self) -> Dict:
        coordinates = [[ring.tolist() for ring in part] for part in self.parts]
        if len(coordinates) == 1:
            return {"type": "Polygon", "coordinates": coordinates[0]}
        return {"type": "MultiPolygon", "coordinates": coordinates}

    @classmethod
    def from_geojson(cls, geometry: Dict) -> 'Polygon':
        """
        Build from a GeoJSON Polygon or MultiPolygon geometry

        Raises:
            GeometryError: Unsupported type, empty or open rings
        """
        geo_type = geometry.get("type") if isinstance(geometry, dict) else None
        coordinates = geometry.get("coordinates", []) if geo_type else []
        if geo_type == "Polygon":
            raw_parts = [coordinates]
        elif geo_type == "MultiPolygon":
            raw_parts = coordinates
        else:
            raise GeometryError(f"Unsupported geometry type: {geo_type!r}")

        parts = []
        for raw_rings in raw_parts:
            rings = []
            for raw_ring in raw_rings:
                ring = np.asarray(raw_ring, dtype=np.float64)
                if ring.ndim != 2 or ring.shape[1] < 2 or ring.shape[0] < 4:
                    raise GeometryError("A ring needs at least 4 positions (closed triangle)")
                ring = ring[:, :2]
                if not np.array_equal(ring[0], ring[-1]):
                    raise GeometryError("Polygon rings must be closed (first vertex equals last)")
                rings.append(ring)
            if rings:
                parts.append(rings)
        if not parts:
            raise GeometryError("Polygon has no rings")
        return cls(parts)

    @classmethod
    def from_exterior(cls, vertices: Sequence[Sequence[float]], holes: Sequence[Sequence[Sequence[float]]] = ()) -> 'Polygon':
        """Single-part polygon from open or closed vertex lists"""
        rings = []
        for raw in [vertices, *holes]:
            ring = np.asarray(raw, dtype=np.float64)
            if not np.array_equal(ring[0], ring[-1]):
                ring = np.vstack([ring, ring[:1]])
            rings.append(ring)
        return cls([rings])


@dataclass
class RegionGeometry:
    """Region polygon plus named subregions (postcodes, neighborhoods, ...)"""
    region: Polygon
    subregions: Dict[str, Polygon] = field(default_factory=dict)

    @property
    def subregion_ids(self) -> List[str]:
        return sorted(self.subregions)

    def to_geojson(self) -> Dict:
        features = [{"type": "Feature", "properties": {}, "geometry": self.region.to_geojson()}]
        for sid in self.subregion_ids:
            features.append({
                "type": "Feature",
                "properties": {"subregion_id": sid},
                "geometry": self.subregions[sid].to_geojson(),
            })
        return {"type": "FeatureCollection", "features": features}

    def save_to_file(self, filepath: str):
        with open(filepath, 'w', encoding='utf-8') as f:
            json.dump(self.to_geojson(), f)


def load_geometry(path: str) -> RegionGeometry:
    """
    Read a GeoJSON FeatureCollection

    Features with a "subregion_id" property are subregions; a feature
    without one is the region. Without a region feature, the region is the
    union (as a MultiPolygon) of all subregions.

    Raises:
        ConfigError: If the file does not exist
        GeometryError: Malformed collection or a subregion outside the region
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"Geometry file not found: {path}")
    except json.JSONDecodeError as e:
        raise GeometryError(f"Geometry file {path} is not valid JSON: {e}")
    return geometry_from_geojson(data)


def geometry_from_geojson(data: Dict) -> RegionGeometry:
    if not isinstance(data, dict) or data.get("type") != "FeatureCollection":
        raise GeometryError("Geometry must be a GeoJSON FeatureCollection")

    region: Optional[Polygon] = None
    subregions: Dict[str, Polygon] = {}
    for feature in data.get("features", []):
        properties = feature.get("properties") or {}
        polygon = Polygon.from_geojson(feature.get("geometry") or {})
        if "subregion_id" in properties:
            sid = str(properties["subregion_id"])
            if sid in subregions:
                raise GeometryError(f"Duplicate subregion id: {sid}")
            if sid == NO_SUBREGION:
                raise GeometryError(f"Subregion id {NO_SUBREGION} is reserved")
            subregions[sid] = polygon
        elif region is None:
            region = polygon
        else:
            raise GeometryError("More than one region feature")

    if region is None:
        if not subregions:
            raise GeometryError("Geometry holds no polygons")
        region = Polygon([part for sid in sorted(subregions) for part in subregions[sid].parts])

    geom = RegionGeometry(region, subregions)
    validate_geometry(geom)
    return geom


def validate_geometry(geom: RegionGeometry):
    """Check every subregion boundary point lies in the region (within 1e-6 degrees)"""
    for sid in geom.subregion_ids:
        points = _boundary_samples(geom.subregions[sid])
        inside = points_in_polygon(points[:, 0], points[:, 1], geom.region)
        outside = points[~inside]
        if len(outside) and np.max(distance_to_boundary(outside, geom.region)) > CONTAINMENT_TOLERANCE:
            raise GeometryError(f"Subregion {sid} extends outside the region")


def _boundary_samples(polygon: Polygon) -> np.ndarray:
    samples = []
    for ring in polygon.rings:
        samples.append(ring[:-1])
        samples.append(0.5 * (ring[:-1] + ring[1:]))
    return np.vstack(samples)


def distance_to_boundary(points: np.ndarray, polygon: Polygon) -> np.ndarray:
    """Euclidean (degree) distance from each point to the nearest polygon edge"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    best = np.full(len(points), np.inf)
    for ring in polygon.rings:
        a, b = ring[:-1], ring[1:]
        for (ax, ay), (bx, by) in zip(a, b):
            dx, dy = bx - ax, by - ay
            length2 = dx * dx + dy * dy
            if length2 > 0:
                t = np.clip(((points[:, 0] - ax) * dx + (points[:, 1] - ay) * dy) / length2, 0.0, 1.0)
            else:
                t = np.zeros(len(points))
            px, py = ax + t * dx, ay + t * dy
            best = np.minimum(best, np.hypot(points[:, 0] - px, points[:, 1] - py))
    return best


def _on_ring(lon: np.ndarray, lat: np.ndarray, ring: np.ndarray) -> np.ndarray:
    on_edge = np.zeros(lon.shape, dtype=bool)
    for (xi, yi), (xj, yj) in zip(ring[:-1], ring[1:]):
        dx, dy = xj - xi, yj - yi
        length = np.hypot(dx, dy)
        cross = dx * (lat - yi) - dy * (lon - xi)
        if length > 0:
            near_line = np.abs(cross) <= EDGE_TOLERANCE * length
        else:
            near_line = (lon == xi) & (lat == yi)
        within = (
            (lon >= min(xi, xj) - EDGE_TOLERANCE) & (lon <= max(xi, xj) + EDGE_TOLERANCE)
            & (lat >= min(yi, yj) - EDGE_TOLERANCE) & (lat <= max(yi, yj) + EDGE_TOLERANCE)
        )
        on_edge |= near_line & within
    return on_edge


def _ring_parity(lon: np.ndarray, lat: np.ndarray, ring: np.ndarray) -> np.ndarray:
    # Cast a ray eastward and count edge crossings
    inside = np.zeros(lon.shape, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore"):
        for (xi, yi), (xj, yj) in zip(ring[:-1], ring[1:]):
            straddles = (yi > lat) != (yj > lat)
            if not straddles.any():
                continue
            x_cross = (xj - xi) * (lat - yi) / (yj - yi) + xi
            inside ^= straddles & (lon < x_cross)
    return inside


def points_in_polygon(lon: np.ndarray, lat: np.ndarray, polygon: Polygon) -> np.ndarray:
    """
    Vectorized even-odd point-in-polygon test

    A point is inside a part when it crosses an odd number of that part's
    ring edges (so holes are excluded), inside the polygon when inside any
    part. Points on any edge count as inside.
    """
    lon = np.asarray(lon, dtype=np.float64)
    lat = np.asarray(lat, dtype=np.float64)
    inside = np.zeros(lon.shape, dtype=bool)
    for part in polygon.parts:
        parity = np.zeros(lon.shape, dtype=bool)
        for ring in part:
            parity ^= _ring_parity(lon, lat, ring)
            inside |= _on_ring(lon, lat, ring)
        inside |= parity
    return inside


def point_in_region(lon: float, lat: float, geom: Polygon) -> bool:
    """Even-odd test of a single point; boundary points count as inside"""
    return bool(points_in_polygon(np.array([lon]), np.array([lat]), geom)[0])


def polygon_area(polygon: Polygon) -> float:
    """Planar shoelace area in square degrees, holes subtracted"""
    total = 0.0
    for part in polygon.parts:
        for k, ring in enumerate(part):
            x, y = ring[:, 0], ring[:, 1]
            area = 0.5 * abs(float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1])))
            total += area if k == 0 else -area
    return total


def assign_subregion(table, geom: RegionGeometry) -> np.ndarray:
    """
    Subregion id of every row

    Each row maps to the first subregion, in id order, containing its
    point; rows in no subregion map to "_none".

    Args:
        table: GeoTable (its longitude/latitude columns are used)
        geom: Geometry with at least one subregion

    Returns:
        Object array of subregion ids
    """
    if not geom.subregions:
        raise ConfigError("Geometry has no subregions")
    coords = table.coords()
    ids = np.full(len(coords), NO_SUBREGION, dtype=object)
    unassigned = np.ones(len(coords), dtype=bool)
    for sid in geom.subregion_ids:
        if not unassigned.any():
            break
        hit = points_in_polygon(coords[unassigned, 0], coords[unassigned, 1], geom.subregions[sid])
        rows = np.flatnonzero(unassigned)[hit]
        ids[rows] = sid
        unassigned[rows] = False
    return ids


def uniform_points_in_polygon(geom: Polygon, n: int, seed: int) -> np.ndarray:
    """
    Draw points uniformly inside a polygon by rejection from its bounding box

    Args:
        geom: Polygon with positive area
        n: Number of points
        seed: Seed of the proposals

    Returns:
        n x 2 array of (longitude, latitude)

    Raises:
        DegenerateGeometryError: Zero area, or acceptance below 1e-4 after
            1e7 proposals
    """
    if n < 0:
        raise ConfigError("n must be non-negative")
    if n == 0:
        return np.zeros((0, 2))
    if polygon_area(geom) <= 0.0:
        raise DegenerateGeometryError("Polygon has zero area")

    min_lon, min_lat, max_lon, max_lat = geom.bounds()
    low = np.array([min_lon, min_lat])
    size = np.array([max_lon - min_lon, max_lat - min_lat])
    rng = np.random.default_rng(seed)

    accepted = []
    have = 0
    proposals = 0
    rate = 1.0
    while have < n:
        batch = int(min(max(1024, 2 * (n - have) / max(rate, MIN_ACCEPTANCE)), 1_000_000))
        points = low + rng.random((batch, 2)) * size
        keep = points[points_in_polygon(points[:, 0], points[:, 1], geom)]
        accepted.append(keep)
        have += len(keep)
        proposals += batch
        rate = have / proposals
        if proposals >= MAX_PROPOSALS and rate < MIN_ACCEPTANCE:
            raise DegenerateGeometryError(f"Acceptance rate {rate:.2e} after {proposals} proposals")
    return np.vstack(accepted)[:n]
