class ConfigError(ValueError):
    exit_code = 2


class MissingPrerequisite(RuntimeError):
    exit_code = 3


class NumericalError(FloatingPointError):
    exit_code = 4
