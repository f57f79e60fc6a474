"""Bridge exception hierarchy."""


class BridgeError(Exception):
    """Base for every error this package raises on purpose."""


class ModelLoadError(BridgeError):
    """A configured model asset cannot be loaded. Always fatal."""


class ConfigError(BridgeError):
    """Extraction configuration is malformed or self-contradictory."""
