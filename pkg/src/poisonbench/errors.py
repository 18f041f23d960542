"""Exception types shared across the package."""


class PoisonBenchError(Exception):
    """Base class for all package errors."""


class ShapeError(PoisonBenchError):
    """Tensor shapes do not conform for the requested operation."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        pretty = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {pretty}")


class ConfigError(PoisonBenchError):
    """Invalid or unknown configuration content."""


class CraftError(PoisonBenchError):
    """Poison crafting aborted (e.g. the objective became non-finite)."""


class CheckpointError(PoisonBenchError):
    """Malformed or unreadable model checkpoint."""


class DataError(PoisonBenchError):
    """Malformed dataset file or violated dataset contract."""
