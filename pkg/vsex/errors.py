"""
Error hierarchy for vsex.

Every error carries the process exit code the CLI reports for it:
0 success, 2 usage, 3 data error, 4 numerical failure.
"""

from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class VsexError(RuntimeError):
    """Base class for all vsex failures."""

    exit_code = EXIT_DATA


class ConfigError(VsexError, ValueError):
    """An invalid configuration value."""

    exit_code = EXIT_USAGE


class ContractError(VsexError, ValueError):
    """Shapes or dimensions that do not fit together."""

    exit_code = EXIT_DATA


class DomainError(VsexError, ValueError):
    """A value outside the domain of a numerical primitive."""

    exit_code = EXIT_NUMERICAL


class DataError(VsexError):
    exit_code = EXIT_DATA


class FormatError(DataError):
    """Bad magic or malformed header."""


class VersionError(DataError):
    def __init__(self, found: int, expected: int, path: str = ""):
        super().__init__(
            f"{path or 'file'} has format version {found}, "
            f"expected {expected}"
        )
        self.found = found
        self.expected = expected


class TruncatedFileError(DataError):
    pass


class ChecksumError(DataError):
    pass


class MissingCheckpointError(DataError):
    def __init__(self, smnr_db: float):
        super().__init__(f"No VSE checkpoint given for SMNR {smnr_db:g} dB")
        self.smnr_db = smnr_db


class NumericalError(VsexError):
    exit_code = EXIT_NUMERICAL


class SimulationDivergedError(NumericalError):
    def __init__(self, step: int, value: float):
        super().__init__(
            f"Lorenz simulation diverged at step {step} (|x| = {value:g})"
        )
        self.step = step


class DegenerateSignalError(NumericalError):
    """Clean measurements with zero temporal power."""


class DegenerateMetricError(NumericalError):
    """A truth sequence with zero energy."""


class DegenerateFilterError(NumericalError):
    def __init__(self, step: int):
        super().__init__(f"All particle weights underflowed at step {step}")
        self.step = step


class TrainingInstabilityError(NumericalError):
    def __init__(
        self,
        message: str,
        parameter: Optional[str] = None,
        last_good: Optional[dict] = None,
    ):
        super().__init__(message)
        self.parameter = parameter
        self.last_good = last_good
