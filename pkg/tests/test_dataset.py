"""
Tests for schema handling, table IO, encoding and splitting
"""

import os
import shutil
import tempfile

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from app.core.dataset import (ColumnKind, ColumnSpec, GeoTable, clamp_numeric, decode, encode,
                              feature_matrix, load_schema, load_table, round_half_up, save_schema,
                              save_table, split, split_mask, validate_schema)
from app.errors import ConfigError, EmptyDataError, SchemaError


class TestSchema:
    """Test cases for column specifications"""

    def test_boolean_levels_are_true_then_false(self):
        """Test boolean level order"""
        assert ColumnSpec("garage", ColumnKind.BOOLEAN).levels() == [True, False]

    def test_coordinate_range_is_clipped_by_bounds(self):
        """Test latitude bounds intersect the WGS84 limits"""
        spec = ColumnSpec("lat", ColumnKind.LATITUDE, bounds=(-100.0, 45.0))
        assert spec.value_range() == (-90.0, 45.0)

    def test_inverted_bounds_rejected(self):
        """Test bounds with min > max"""
        with pytest.raises(SchemaError):
            ColumnSpec.from_dict({"name": "x", "kind": "numeric", "bounds": [2, 1]})

    def test_unknown_kind_rejected(self):
        """Test an unknown column kind"""
        with pytest.raises(SchemaError):
            ColumnSpec.from_dict({"name": "x", "kind": "text"})

    def test_needs_one_coordinate_pair(self, mixed_schema):
        """Test a schema with two latitude columns"""
        schema = mixed_schema + [ColumnSpec("lat2", ColumnKind.LATITUDE)]
        with pytest.raises(SchemaError):
            validate_schema(schema)

    def test_duplicate_categories_rejected(self):
        """Test categorical columns need unique levels"""
        schema = [
            ColumnSpec("lon", ColumnKind.LONGITUDE),
            ColumnSpec("lat", ColumnKind.LATITUDE),
            ColumnSpec("energy", ColumnKind.CATEGORICAL, categories=("A", "A")),
        ]
        with pytest.raises(SchemaError):
            validate_schema(schema)


class TestTableIO:
    """Test cases for CSV loading and saving"""

    def setup_method(self):
        """Set up test with temporary directory"""
        self.temp_dir = tempfile.mkdtemp()

    def teardown_method(self):
        """Clean up temporary files"""
        if os.path.exists(self.temp_dir):
            shutil.rmtree(self.temp_dir)

    def test_save_and_load_reproduce_table(self, mixed_table):
        """Test CSV persistence is exact"""
        path = os.path.join(self.temp_dir, "table.csv")
        save_table(mixed_table, path)
        loaded = load_table(path, mixed_table.schema)

        assert loaded.rejected == 0
        pd.testing.assert_frame_equal(loaded.frame, mixed_table.frame)

    def test_schema_round_trip(self, mixed_schema):
        """Test schema persistence"""
        path = os.path.join(self.temp_dir, "schema.json")
        save_schema(mixed_schema, path)
        assert load_schema(path) == mixed_schema

    def test_invalid_rows_are_rejected(self, mixed_schema):
        """Test row-level validation"""
        path = os.path.join(self.temp_dir, "table.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("lon,lat,surface,rooms,garage,energy,extra\n")
            f.write("0.1,0.2,50.5,2,true,A,ignored\n")
            f.write("0.1,0.2,50.5,2.5,true,A,x\n")     # non-integer rooms
            f.write("0.1,0.2,50.5,2,maybe,A,x\n")      # bad boolean
            f.write("0.1,0.2,50.5,2,no,Z,x\n")         # unknown level
            f.write("0.1,95.0,50.5,2,no,B,x\n")        # latitude out of range
            f.write("0.1,0.2,,2,no,B,x\n")             # missing value
            f.write("0.3,0.4,1000,10,NO,C,x\n")

        table = load_table(path, mixed_schema)
        assert table.N == 2
        assert table.rejected == 5
        assert table.frame["garage"].tolist() == [True, False]
        assert table.frame["rooms"].dtype == np.int64

    def test_missing_column(self, mixed_schema):
        """Test a CSV lacking a schema column"""
        path = os.path.join(self.temp_dir, "table.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("lon,lat\n0,0\n")
        with pytest.raises(SchemaError):
            load_table(path, mixed_schema)

    def test_no_valid_rows(self, mixed_schema):
        """Test a table with only invalid rows"""
        path = os.path.join(self.temp_dir, "table.csv")
        with open(path, "w", encoding="utf-8") as f:
            f.write("lon,lat,surface,rooms,garage,energy\n")
            f.write("0.1,0.2,-5,2,true,A\n")
        with pytest.raises(EmptyDataError):
            load_table(path, mixed_schema)

    def test_missing_file(self, mixed_schema):
        """Test a missing data file is a configuration error"""
        with pytest.raises(ConfigError):
            load_table(os.path.join(self.temp_dir, "nope.csv"), mixed_schema)


class TestEncoding:
    """Test cases for encode/decode"""

    def test_model_mode_standardizes(self, mixed_table):
        """Test z-scored numerics and one-hot groups"""
        matrix = encode(mixed_table)
        assert matrix.width == 2 + 2 + 2 + 3
        surface = matrix.values[:, matrix.indices("surface")[0]]
        assert abs(surface.mean()) < 1e-12
        assert surface.std() == pytest.approx(1.0)
        energy = matrix.values[:, matrix.indices("energy")]
        assert np.all(energy.sum(axis=1) == 1.0)

    def test_distance_mode_is_unit_interval(self, mixed_table):
        """Test min-max scaling"""
        matrix = encode(mixed_table, mode="distance")
        assert matrix.values.min() == 0.0
        assert matrix.values.max() == 1.0

    def test_coordinate_indices_order(self, mixed_table):
        """Test longitude comes before latitude"""
        matrix = encode(mixed_table)
        assert matrix.coordinate_indices() == [0, 1]

    def test_decode_inverts_encode(self, mixed_table):
        """Test decode(encode(table)) reproduces the table"""
        decoded = decode(encode(mixed_table))
        assert np.allclose(decoded.coords(), mixed_table.coords())
        assert np.allclose(decoded.frame["surface"], mixed_table.frame["surface"])
        assert decoded.frame["rooms"].tolist() == mixed_table.frame["rooms"].tolist()
        assert decoded.frame["garage"].tolist() == mixed_table.frame["garage"].tolist()
        assert decoded.frame["energy"].tolist() == mixed_table.frame["energy"].tolist()

    def test_decode_clamps_and_resolves_ties(self, mixed_table):
        """Test clamping and argmax with ties"""
        matrix = encode(mixed_table)
        values = np.zeros((1, matrix.width))
        values[0, matrix.indices("surface")[0]] = 1e9
        values[0, matrix.indices("rooms")[0]] = -1e9
        decoded = decode(matrix.with_values(values))

        assert decoded.frame["surface"].iloc[0] == 1000.0
        assert decoded.frame["rooms"].iloc[0] == 1
        assert decoded.frame["garage"].iloc[0] == True  # noqa: E712
        assert decoded.frame["energy"].iloc[0] == "A"

    def test_reference_scalers_are_reused(self, mixed_table):
        """Test encoding a second table with the first one's scalers"""
        reference = encode(mixed_table)
        other = encode(mixed_table.take([0, 1, 2]), reference=reference)
        assert np.array_equal(other.values, reference.values[:3])

    def test_feature_matrix_drop_first(self, mixed_table):
        """Test hedonic design columns"""
        _, names = feature_matrix(mixed_table, exclude=("surface",), drop_first=True)
        assert names == ["rooms", "garage=False", "energy=B", "energy=C"]

    def test_integer_rounding_is_half_up(self):
        """Test integer clamping"""
        spec = ColumnSpec("rooms", ColumnKind.INTEGER, bounds=(1.0, 10.0))
        assert clamp_numeric(spec, np.array([2.5, 3.49, -4.0, 10.5])).tolist() == [3.0, 3.0, 1.0, 10.0]

    @given(st.floats(min_value=-1e12, max_value=1e12, allow_nan=False))
    def test_clamped_integers_stay_admissible(self, value):
        """Test every clamped integer value is an admissible integer"""
        spec = ColumnSpec("rooms", ColumnKind.INTEGER, bounds=(1.0, 10.0))
        result = clamp_numeric(spec, np.array([value]))[0]
        assert 1.0 <= result <= 10.0
        assert result == np.floor(result)


class TestSplit:
    """Test cases for table splitting"""

    def test_sizes_and_disjointness(self, mixed_table):
        """Test the two parts partition the table"""
        first, rest = split(mixed_table, 0.8, seed=3)
        assert first.N == round_half_up(0.8 * mixed_table.N)
        assert first.N + rest.N == mixed_table.N
        merged = pd.concat([first.frame, rest.frame]).sort_values(["lon", "lat"]).reset_index(drop=True)
        expected = mixed_table.frame.sort_values(["lon", "lat"]).reset_index(drop=True)
        pd.testing.assert_frame_equal(merged, expected)

    def test_split_is_deterministic(self, mixed_table):
        """Test the same seed yields the same split"""
        a, _ = split(mixed_table, 0.5, seed=11)
        b, _ = split(mixed_table, 0.5, seed=11)
        pd.testing.assert_frame_equal(a.frame, b.frame)

    def test_stratified_proportions(self, mixed_table):
        """Test stratification keeps each level's share"""
        first, _ = split(mixed_table, 0.8, seed=0, stratify_on="energy")
        total = mixed_table.frame["energy"].value_counts()
        kept = first.frame["energy"].value_counts()
        for level, count in total.items():
            assert abs(kept[level] - 0.8 * count) <= 1.0

    def test_singleton_level_goes_to_first_part(self):
        """Test a level with one row"""
        labels = np.array(["a"] * 9 + ["b"])
        mask = split_mask(10, 0.5, seed=0, labels=labels)
        assert mask[9]
        assert mask.sum() == 5

    def test_fraction_out_of_range(self):
        """Test invalid fractions"""
        with pytest.raises(ConfigError):
            split_mask(10, 1.0, seed=0)

    def test_empty_first_part(self):
        """Test fraction * N below one"""
        with pytest.raises(EmptyDataError):
            split_mask(1, 0.5, seed=0)


if __name__ == "__main__":
    pytest.main([__file__])
