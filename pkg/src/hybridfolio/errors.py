class DataError(ValueError):
    """Malformed or insufficient input data."""


class DivergenceError(FloatingPointError):
    """A loss or reward became non-finite during training."""


class PrerequisiteError(RuntimeError):
    """A pipeline stage was requested before the artifacts it needs exist."""
