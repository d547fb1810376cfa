"""Exception hierarchy shared by every module"""


class BanditError(Exception):
    """Base class for toolkit errors"""

    exit_code = 1


class ConfigError(BanditError):
    """Invalid command-line or file configuration"""

    exit_code = 2


class DimensionError(BanditError):
    """Vector or matrix sizes do not agree"""


class ArmIndexError(BanditError):
    """Arm index outside [0, K)"""


class NotPsdError(BanditError):
    """Interaction matrix is not positive semi-definite"""


class ConvergenceError(BanditError):
    """An iterative solver stopped before reaching its tolerance"""


class DataError(BanditError):
    """Input data cannot support the requested computation"""


class BudgetError(BanditError):
    """Not enough pulls to complete a probe schedule"""
