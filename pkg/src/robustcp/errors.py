"""Error types shared across the package."""


class InputError(Exception):
    """Malformed external input (files, tensors, labels)."""


class ConfigurationError(Exception):
    """Incompatible or contradictory configuration (e.g. threat model vs noise)."""
