"""Exception taxonomy shared across the package."""


class PtsimError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PtsimError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(PtsimError):
    """A configuration value violates an invariant."""


class InputError(PtsimError):
    """Runtime input (e.g. a token id) is out of range."""


class MeshProtocolError(PtsimError):
    """Devices violated the collective protocol (divergent shapes, skipped
    collectives, mismatched call sites, or a timed-out rendezvous)."""
