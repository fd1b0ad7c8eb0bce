"""Exception hierarchy shared by every kilnscope module."""


class KilnError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(KilnError, ValueError):
    pass


# geodesy
class DegenerateEdge(KilnError, ValueError):
    pass


# raster / vector io
class RasterFormatError(KilnError, ValueError):
    pass


class BadMagic(RasterFormatError):
    pass


class TruncatedFile(RasterFormatError):
    pass


class UnsupportedVersion(RasterFormatError):
    pass


class DimensionMismatch(KilnError, ValueError):
    pass


class MissingSidecar(KilnError, FileNotFoundError):
    pass


# remote-sensing pipeline
class BandCountMismatch(KilnError, ValueError):
    pass


class EmptyStack(KilnError, ValueError):
    pass


class DegenerateHistogram(KilnError, ValueError):
    pass


class MissingHeightGrid(KilnError, ValueError):
    pass


# graph construction
class MissingColumn(KilnError, ValueError):
    pass


class NonNumericCell(KilnError, ValueError):
    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"non-numeric cell at row {row}, column {column!r}: {value!r}")
        self.row = row
        self.column = column
        self.value = value


class DuplicateId(KilnError, ValueError):
    pass


class MissingCoordinates(KilnError, ValueError):
    def __init__(self, rows):
        self.rows = list(rows)
        super().__init__(f"rows with missing lon/lat: {self.rows}")


class SinglePoint(KilnError, ValueError):
    pass


# differentiable engine / model
class ShapeMismatch(KilnError, ValueError):
    pass


class NumericalError(KilnError, ArithmeticError):
    pass


class EmptySegment(KilnError, ValueError):
    pass


class EmptyMask(KilnError, ValueError):
    pass


class MissingClass(KilnError, ValueError):
    pass


class NonFiniteLoss(NumericalError):
    def __init__(self, epoch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}")
        self.epoch = epoch
        self.value = value


# evaluation
class LengthMismatch(KilnError, ValueError):
    pass


# synthetic data
class PlacementFailure(KilnError, RuntimeError):
    pass
