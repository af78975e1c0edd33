"""Exception hierarchy. The CLI maps each family to an exit code."""


class XferlabError(Exception):
    exit_code = 1


class ConfigError(XferlabError):
    exit_code = 2


class DataError(XferlabError):
    exit_code = 3


class NumericalError(XferlabError):
    exit_code = 4


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class InputError(ValueError):
    """Caller supplied out-of-range ids or malformed inputs."""
