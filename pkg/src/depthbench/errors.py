"""Exception types shared across the package."""


class DepthbenchError(Exception):
    """Base class for all library errors."""


class ShapeError(DepthbenchError, ValueError):
    """An operation received tensors with incompatible shapes."""


class GraphError(DepthbenchError, RuntimeError):
    """Misuse of the autodiff tape (mixed graphs, backward off-graph, ...)."""


class DegenerateInputError(DepthbenchError, ValueError):
    """Input carries no usable signal (constant ground truth, < 2 valid pixels)."""


class FormatError(DepthbenchError, ValueError):
    """A binary or text payload does not conform to its file format."""


class SchemaError(DepthbenchError, ValueError):
    """A JSON document violates its schema; message carries a JSON pointer."""

    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{message} (at {pointer or '/'})")
        self.pointer = pointer


class DataError(DepthbenchError, ValueError):
    """Referenced data is missing or inconsistent (e.g. predictions without GT)."""
