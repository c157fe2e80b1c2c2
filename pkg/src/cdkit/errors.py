"""Exception types shared across the toolkit."""


class ValidationError(ValueError):
    """An argument violates a documented precondition (bad shape, range, ...)."""


class ConfigError(Exception):
    """Malformed or inconsistent configuration. CLI exit code 2."""


class DataError(Exception):
    """Dataset layout or content problem. CLI exit code 3."""
