"""Exception hierarchy used across the package."""


class TensCircError(Exception):
    """Base class for all errors raised by tenscirc."""


class InputError(TensCircError, ValueError):
    """Invalid user-supplied argument (bad permutation, out-of-range category, ...)."""


class StructureError(TensCircError, ValueError):
    """A circuit or region graph violates a structural requirement."""


class ConfigurationError(TensCircError, ValueError):
    """An incompatible combination of options was requested."""


class PreconditionError(TensCircError, RuntimeError):
    """An operation was called on an object that does not satisfy its precondition."""


class FormatError(TensCircError, ValueError):
    """A file could not be parsed."""


class GuardError(TensCircError, MemoryError):
    """A configured size guard would be exceeded."""
