"""Exception hierarchy shared by every picnet module."""


class PicnetError(Exception):
    """Base class for all picnet failures."""


class ShapeError(PicnetError, ValueError):
    pass


class ConfigError(PicnetError, ValueError):
    pass


class DataError(PicnetError, ValueError):
    pass


class NumericError(PicnetError, ArithmeticError):
    pass


class UsageError(PicnetError, RuntimeError):
    pass
