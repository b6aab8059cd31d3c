"""
Exception hierarchy for GeoSynth
Every error carries the process exit code the CLI reports for it
"""

from typing import Optional


class GeoSynthError(Exception):
    """Base class for all GeoSynth errors"""

    exit_code = 1


class ConfigError(GeoSynthError, ValueError):
    """Invalid configuration, flags or paths"""

    exit_code = 2


class SchemaError(ConfigError):
    """Malformed schema or table/schema mismatch"""


class DataError(GeoSynthError, ValueError):
    """Input data that cannot be used as given"""

    exit_code = 3


class EmptyDataError(DataError):
    """No valid rows left after loading"""


class TooFewSamplesError(DataError):
    """Not enough rows to train a neural model"""


class DegenerateDataError(DataError):
    """Data without the variation an operation needs"""


class GeometryError(DataError):
    """Malformed or inconsistent polygons"""


class DegenerateGeometryError(GeometryError):
    """Polygon with (near) zero area"""


class RegionMismatchError(DataError):
    """Generator places nearly all of its mass outside the region"""


class NoNeighborsError(DataError):
    """Moran weight matrix is all zeros"""


class NoOverlapError(DataError):
    """Real and synthetic tables share no grid cell"""


class EvaluationError(DataError):
    """A metric cannot be evaluated on the given inputs"""


class NumericError(GeoSynthError, ArithmeticError):
    """Numerical failure during training or evaluation"""

    exit_code = 4


class ShapeError(NumericError):
    """Array dimensions do not line up"""


class StaleTapeError(NumericError):
    """Backward pass on a tape recorded before a parameter update"""


class NonFiniteLossError(NumericError):
    """Training produced a NaN or infinite loss"""

    def __init__(self, message: str, epoch: Optional[int] = None, batch_index: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch_index = batch_index
