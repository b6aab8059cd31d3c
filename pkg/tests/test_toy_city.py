"""
Tests for the bundled benchmark city
"""

import numpy as np
import pandas as pd
import pytest

from app.core.geometry import assign_subregion, points_in_polygon
from app.core.toy_city import make_toy_city, toy_city_geometry


class TestToyCity:
    """Test cases for make_toy_city"""

    def test_rows_respect_schema_and_region(self):
        """Test sizes, bounds and containment"""
        table, geom = make_toy_city(n=500, seed=0)
        assert table.N == 500
        coords = table.coords()
        assert points_in_polygon(coords[:, 0], coords[:, 1], geom.region).all()
        assert table.frame["surface"].between(15.0, 600.0).all()
        assert (table.frame["price"] > 0).all()
        assert table.frame["garage"].dtype == bool

    def test_deterministic(self):
        """Test the same seed yields the same city"""
        a, _ = make_toy_city(n=100, seed=4)
        b, _ = make_toy_city(n=100, seed=4)
        pd.testing.assert_frame_equal(a.frame, b.frame)

    def test_neighborhoods_tile_the_town(self):
        """Test every home falls in one of the nine neighborhoods"""
        table, _ = make_toy_city(n=300, seed=1)
        geom = toy_city_geometry()
        assert len(geom.subregion_ids) == 9
        assert "_none" not in set(assign_subregion(table, geom).tolist())

    def test_price_rises_with_surface(self):
        """Test the hedonic signal is present"""
        table, _ = make_toy_city(n=2000, seed=2)
        correlation = np.corrcoef(np.log(table.frame["surface"]), np.log(table.frame["price"]))[0, 1]
        assert correlation > 0.3


if __name__ == "__main__":
    pytest.main([__file__])
