"""Exception hierarchy shared by the library and the command line."""


class LrbmError(Exception):
    """Base class for every error raised by the toolkit."""


class ContractError(LrbmError, ValueError):
    """A dimension, index or precondition check failed."""


class DataError(LrbmError):
    """Input data is malformed or inconsistent."""


class ConfigError(LrbmError, ValueError):
    """A configuration value or command-line flag is invalid."""


class NumericalError(LrbmError, ArithmeticError):
    """A computation produced non-finite values or a non-normalizable model."""
