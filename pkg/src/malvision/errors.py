"""Exception hierarchy shared by every module.

All library errors derive from MalError so the CLI can map them to a
diagnostic class and a nonzero exit code.
"""


class MalError(Exception):
    """Base class for all malvision errors."""


class DimensionError(MalError):
    """Tensor shapes or dtypes are incompatible for the requested operation."""


class GeometryError(MalError):
    """Image / patch / cluster extents violate a divisibility constraint."""


class NumericsError(MalError):
    """A documented operation produced or received non-finite values."""


class MaskError(MalError):
    """Invalid attention mask (e.g. a row with no attendable position)."""


class SelectionError(MalError):
    """A masking-ratio selection yields no tokens or is otherwise invalid."""


class ConfigError(MalError):
    """Run configuration failed validation.

    ``violations`` lists every violated constraint, not just the first.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DataError(MalError):
    """Dataset ingestion failure (missing, corrupt, or mismatched files)."""


class CheckpointError(MalError):
    """Checkpoint file is malformed or does not match the run configuration."""


class OptimError(MalError):
    """Optimizer step rejected (e.g. non-finite gradient)."""
