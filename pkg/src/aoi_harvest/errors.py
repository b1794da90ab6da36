"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid parameter; ``field`` names the offending setting."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class DegenerateChainError(ValueError):
    """The battery chain has no unique stationary distribution."""


class StateSpaceTooLarge(RuntimeError):
    """The exact ancillary chain would exceed the configured state cap."""


class NoRefreshError(ValueError):
    """The age never refreshes under the given policy (e.g. all-zero policy)."""
