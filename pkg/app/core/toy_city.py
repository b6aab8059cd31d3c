"""
Bundled synthetic benchmark city
A rectangular town tiled by a 3 x 3 grid of neighborhoods, with homes
clustered around five centres.
"""

from typing import List, Tuple

import numpy as np
from scipy.special import expit

from app.core.dataset import ColumnKind, ColumnSpec, GeoTable
from app.core.geometry import Polygon, RegionGeometry, points_in_polygon

LON_RANGE = (7.60, 7.75)
LAT_RANGE = (45.00, 45.12)
CENTRE = (7.675, 45.06)
GRID_SIDE = 3

# (lon, lat, std in degrees, share of homes)
CLUSTERS = [
    (7.675, 45.060, 0.010, 0.30),
    (7.625, 45.095, 0.008, 0.20),
    (7.720, 45.100, 0.009, 0.15),
    (7.630, 45.025, 0.011, 0.20),
    (7.725, 45.020, 0.007, 0.15),
]

TOY_SCHEMA = [
    ColumnSpec("lon", ColumnKind.LONGITUDE),
    ColumnSpec("lat", ColumnKind.LATITUDE),
    ColumnSpec("surface", ColumnKind.NUMERIC, bounds=(15.0, 600.0)),
    ColumnSpec("garage", ColumnKind.BOOLEAN),
    ColumnSpec("price", ColumnKind.NUMERIC, bounds=(1000.0, 1.0e8)),
]


def toy_city_geometry() -> RegionGeometry:
    """The town rectangle and its nine neighborhoods "n<row><col>" (row 0 is the south)"""
    lon_edges = np.linspace(LON_RANGE[0], LON_RANGE[1], GRID_SIDE + 1)
    lat_edges = np.linspace(LAT_RANGE[0], LAT_RANGE[1], GRID_SIDE + 1)
    subregions = {}
    for row in range(GRID_SIDE):
        for col in range(GRID_SIDE):
            west, east = float(lon_edges[col]), float(lon_edges[col + 1])
            south, north = float(lat_edges[row]), float(lat_edges[row + 1])
            subregions[f"n{row}{col}"] = Polygon.from_exterior([(west, south), (east, south), (east, north), (west, north)])
    (west, east), (south, north) = LON_RANGE, LAT_RANGE
    region = Polygon.from_exterior([(west, south), (east, south), (east, north), (west, north)])
    return RegionGeometry(region, subregions)


def _neighborhood_effects(rng: np.random.Generator) -> np.ndarray:
    return rng.normal(0.0, 0.15, size=(GRID_SIDE, GRID_SIDE))


def _clustered_points(n: int, rng: np.random.Generator, region: Polygon) -> np.ndarray:
    shares = np.array([c[3] for c in CLUSTERS])
    points: List[np.ndarray] = []
    have = 0
    while have < n:
        need = n - have
        cluster = rng.choice(len(CLUSTERS), size=need, p=shares / shares.sum())
        centres = np.array([CLUSTERS[k][:2] for k in cluster])
        spread = np.array([CLUSTERS[k][2] for k in cluster])[:, None]
        candidates = centres + rng.standard_normal((need, 2)) * spread
        keep = candidates[points_in_polygon(candidates[:, 0], candidates[:, 1], region)]
        points.append(keep)
        have += len(keep)
    return np.vstack(points)[:n]


def make_toy_city(n: int = 5000, seed: int = 0) -> Tuple[GeoTable, RegionGeometry]:
    """
    Generate the benchmark city

    Log-price is linear in log-surface plus a location effect (distance to
    the centre and a neighborhood term); the chance of a garage rises with
    distance from the centre.

    Args:
        n: Number of homes
        seed: Seed of every random draw

    Returns:
        (table, geometry)
    """
    rng = np.random.default_rng(seed)
    geom = toy_city_geometry()
    coords = _clustered_points(n, rng, geom.region)
    distance = np.hypot(coords[:, 0] - CENTRE[0], coords[:, 1] - CENTRE[1])

    surface = np.clip(np.exp(rng.normal(4.4, 0.35, size=n) + 3.0 * distance), 15.0, 600.0)
    garage = rng.random(n) < expit(-1.5 + 40.0 * distance)

    col = np.clip(((coords[:, 0] - LON_RANGE[0]) / (LON_RANGE[1] - LON_RANGE[0]) * GRID_SIDE).astype(int), 0, GRID_SIDE - 1)
    row = np.clip(((coords[:, 1] - LAT_RANGE[0]) / (LAT_RANGE[1] - LAT_RANGE[0]) * GRID_SIDE).astype(int), 0, GRID_SIDE - 1)
    location = -6.0 * distance + _neighborhood_effects(rng)[row, col]
    log_price = 7.6 + 1.0 * np.log(surface) + 0.12 * garage + location + rng.normal(0.0, 0.1, size=n)
    price = np.clip(np.exp(log_price), 1000.0, 1.0e8)

    table = GeoTable.from_columns(TOY_SCHEMA, {
        "lon": coords[:, 0],
        "lat": coords[:, 1],
        "surface": surface,
        "garage": garage,
        "price": price,
    })
    return table, geom
