class MvError(Exception):
    exit_code = 1


class ConfigError(MvError, ValueError):
    exit_code = 2


class DataError(MvError, ValueError):
    exit_code = 3


class DimensionError(MvError, ValueError):
    exit_code = 3


class NumericError(MvError, ArithmeticError):
    exit_code = 4
