"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Inconsistent configuration or an environment the pipeline cannot work with."""
