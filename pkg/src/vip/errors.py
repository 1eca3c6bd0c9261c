"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class VipError(Exception):
    exit_code = 1


class InvalidArgumentError(VipError, ValueError):
    exit_code = 3


class LoadError(VipError):
    exit_code = 4


class FormatError(LoadError):
    exit_code = 5


class UndefinedResultError(VipError, ArithmeticError):
    exit_code = 6


class PreprocessError(VipError):
    exit_code = 7


class DecodeError(PreprocessError):
    exit_code = 8


class EmptyDatasetError(VipError):
    exit_code = 9


class InvalidDatasetError(VipError):
    exit_code = 10


class ReportIOError(VipError, OSError):
    exit_code = 11
