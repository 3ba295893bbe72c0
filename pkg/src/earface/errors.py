"""Exception types shared across the package."""


class EarFaceError(Exception):
    """Base class for package errors."""


class DataError(EarFaceError, ValueError):
    """Malformed or inconsistent dataset input."""


class OutOfRangeError(DataError):
    pass


class DimensionError(EarFaceError, ValueError):
    """Tensor shapes or feature widths do not line up."""


class ConfigError(EarFaceError, ValueError):
    pass


class DegenerateInputError(EarFaceError, ValueError):
    pass


class PipelineError(EarFaceError, RuntimeError):
    pass


class ImageReadError(EarFaceError, OSError):
    """An image file could not be opened or decoded."""

    def __init__(self, path, reason: str = ""):
        self.path = str(path)
        msg = f"cannot read image {self.path}"
        super().__init__(f"{msg}: {reason}" if reason else msg)
