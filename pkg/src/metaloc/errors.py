"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent run setup."""


class ShapeError(ValueError):
    """Array arguments with incompatible shapes."""


class GeometryError(ValueError):
    """Degenerate or out-of-bounds scene geometry."""


class ContractError(RuntimeError):
    """An operation was called outside its documented contract."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""
