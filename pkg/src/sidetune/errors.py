"""Exception hierarchy shared across the package."""


class LabError(Exception):
    """Base class for every error this package raises deliberately."""


class DimensionError(LabError):
    """Tensor shapes incompatible with the requested operation."""


class NumericError(LabError):
    """Non-finite values showed up where finite math was required."""


class ContractError(LabError):
    """An API precondition was violated by the caller."""


class NetworkSpecError(LabError):
    """Layer specifications do not compose into a valid network."""


class InitSchemeError(LabError):
    """Side-network initialization scheme constraints not met."""


class TaskSetupError(LabError):
    """Task shapes or metadata incompatible with the strategy."""


class ConfigError(LabError):
    """Experiment configuration is invalid."""


class DataFormatError(LabError):
    """An on-disk data file is malformed."""
