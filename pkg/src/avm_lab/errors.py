"""Exception hierarchy for avm-lab.

Every error carries the process exit code the CLI reports for it.
"""


class AvmError(Exception):
    """Base class for all avm-lab errors."""

    exit_code: int = 1


class ConfigError(AvmError, ValueError):
    """Invalid configuration or input that does not match the configuration."""

    exit_code = 2


class DimensionError(ConfigError):
    """Operand shapes are incompatible."""

    def __init__(self, op: str, left: tuple, right: tuple, detail: str = ""):
        self.op = op
        self.left = tuple(left)
        self.right = tuple(right)
        message = f"{op}: incompatible shapes {self.left} and {self.right}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class ContractError(AvmError, ValueError):
    """A documented precondition was violated by the caller."""

    exit_code = 2


class StaleHandleError(ContractError):
    """A tape handle from an earlier generation was dereferenced."""


class AvmdError(AvmError, OSError):
    """Failure reading or writing an AVMD container."""

    exit_code = 3


class AvmdManifestError(AvmdError):
    """The manifest is missing, malformed, or inconsistent."""


class AvmdVersionError(AvmdError):
    """The container was written by an incompatible format version."""

    def __init__(self, found: int, supported: int):
        self.found = found
        self.supported = supported
        super().__init__(
            f"AVMD manifest version {found} is not readable by reader version {supported}"
        )


class AvmdTruncatedError(AvmdError):
    """A blob extends past the end of the data file."""


class AvmdChecksumError(AvmdError):
    """A blob's CRC32 does not match the manifest."""


class DivergenceError(AvmError, ArithmeticError):
    """A loss or objective became non-finite."""

    exit_code = 4


class InvariantBreach(AvmError, RuntimeError):
    """An internal invariant (e.g. frozen backbone bytes) was violated."""

    exit_code = 5
