"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes (config -> 2, data -> 3, anything
else -> 4), so raise the most specific class that applies.
"""


class ElevdxError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(ElevdxError):
    """Invalid or inconsistent configuration (schema files, experiment configs, flags)."""


class DataError(ElevdxError):
    """Invalid data: manifests, images, label files, splits."""
