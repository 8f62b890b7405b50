"""Exception types shared across the package."""


class SparseforgeError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(SparseforgeError, ValueError):
    """Tensor shapes incompatible with the requested operation."""


class ScheduleError(SparseforgeError, ValueError):
    """Sparsity/pruning schedule violated (e.g. non-monotone target)."""


class ConfigError(SparseforgeError, ValueError):
    """Invalid recipe, architecture, or schedule configuration."""


class RunError(SparseforgeError, RuntimeError):
    """A training run failed (e.g. loss diverged to NaN)."""
