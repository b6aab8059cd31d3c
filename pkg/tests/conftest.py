import os

import hypothesis
import numpy as np
import pytest

from app.core.dataset import ColumnKind, ColumnSpec, GeoTable
from app.core.geometry import Polygon, RegionGeometry

np.seterr(all="warn")

hypothesis.settings.register_profile("default", max_examples=50, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "default"))


def square(west, south, east, north):
    return Polygon.from_exterior([(west, south), (east, south), (east, north), (west, north)])


@pytest.fixture
def unit_geometry():
    """Unit square split into a west and an east half"""
    return RegionGeometry(square(0.0, 0.0, 1.0, 1.0), {
        "east": square(0.5, 0.0, 1.0, 1.0),
        "west": square(0.0, 0.0, 0.5, 1.0),
    })


@pytest.fixture
def mixed_schema():
    return [
        ColumnSpec("lon", ColumnKind.LONGITUDE),
        ColumnSpec("lat", ColumnKind.LATITUDE),
        ColumnSpec("surface", ColumnKind.NUMERIC, bounds=(0.0, 1000.0)),
        ColumnSpec("rooms", ColumnKind.INTEGER, bounds=(1.0, 10.0)),
        ColumnSpec("garage", ColumnKind.BOOLEAN),
        ColumnSpec("energy", ColumnKind.CATEGORICAL, categories=("A", "B", "C")),
    ]


@pytest.fixture
def mixed_table(mixed_schema):
    """200 random rows inside the unit square"""
    rng = np.random.default_rng(7)
    n = 200
    return GeoTable.from_columns(mixed_schema, {
        "lon": rng.uniform(0.0, 1.0, n),
        "lat": rng.uniform(0.0, 1.0, n),
        "surface": rng.uniform(30.0, 200.0, n),
        "rooms": rng.integers(1, 8, n),
        "garage": rng.random(n) < 0.4,
        "energy": rng.choice(["A", "B", "C"], n, p=[0.5, 0.3, 0.2]),
    })
