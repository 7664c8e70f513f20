"""Exception hierarchy shared by the pipeline and the CLI exit-code mapping."""


class VirtualTargetError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigurationError(VirtualTargetError, ValueError):
    """Invalid configuration or arguments (bad counts, empty datasets, ...)."""

    exit_code = 2


class ContractViolation(VirtualTargetError, ValueError):
    """A caller broke an operation precondition (shape mismatch, non-finite input)."""

    exit_code = 2


class DataError(VirtualTargetError):
    """A file could not be parsed or is internally inconsistent."""

    exit_code = 3


class SimulationError(VirtualTargetError, ArithmeticError):
    exit_code = 4


class TrainingError(VirtualTargetError, ArithmeticError):
    exit_code = 4
