"""Exception types shared across treecast modules."""


class TreecastError(Exception):
    """Base class for all treecast errors."""


class ConstraintViolation(TreecastError):
    """Model parameters violate a structural constraint."""


class DegenerateChannel(TreecastError):
    """Noiseless or collapsed channel requested without explicit opt-in."""


class BudgetExceeded(TreecastError):
    """Exact enumeration would exceed the configured size budget."""


class LevelMismatch(TreecastError):
    """Paired distributions belong to different tree levels."""


class EmptyPool(TreecastError):
    """Sample pool has no entries."""


class NonFinite(TreecastError):
    """A log-space product produced a non-finite value."""


class SolverStall(TreecastError):
    """Bisection interval cannot shrink further with consistent signs."""


class ConfigError(TreecastError):
    """Malformed run configuration."""
