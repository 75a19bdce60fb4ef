"""Exception hierarchy shared by all modules.

Every error carries a short machine-readable ``code`` (the class name) so
the CLI can print ``error=<code>`` lines without string matching.
"""


class RemapSimError(Exception):
    """Base class for all errors raised by remapsim."""

    exit_code = 1

    @property
    def code(self) -> str:
        return type(self).__name__


class ConfigError(RemapSimError):
    exit_code = 2


class FileError(RemapSimError):
    exit_code = 2


class CapacityError(RemapSimError):
    pass


class RangeError(RemapSimError, ValueError):
    pass


class ScaleError(RemapSimError, ValueError):
    pass


class InfeasibleAlpha(RemapSimError):
    pass


class StateError(RemapSimError):
    pass


class PressureError(RemapSimError):
    pass


class DoubleFree(RemapSimError):
    pass


class Exhausted(RemapSimError):
    """Every tenant is at its remap limit and the KV shortfall persists."""


class EmptyRun(RemapSimError):
    pass


class TraceMismatch(RemapSimError):
    pass
