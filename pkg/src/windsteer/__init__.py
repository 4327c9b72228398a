"""Load-constrained wake steering with independent soft actor-critic agents."""

__version__ = "0.1.0"


class ConfigError(ValueError):
    """Invalid configuration value. ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
