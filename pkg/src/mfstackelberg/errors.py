"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class MfsgError(Exception):
    exit_code = 1


class ConfigError(MfsgError, ValueError):
    """Bad user input: dimensions, parameters, scenario files."""

    exit_code = 2


class DivergenceError(MfsgError, RuntimeError):
    """An iterative solver failed to converge."""

    exit_code = 3

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class NumericalBlowup(DivergenceError):
    """Non-finite value produced while integrating; `node` is the offending index."""

    def __init__(self, message, node=None, **diagnostics):
        super().__init__(message, node=node, **diagnostics)
        self.node = node


class StationarityError(DivergenceError):
    pass


class StallError(DivergenceError):
    pass


class BudgetError(MfsgError):
    exit_code = 4


class OracleDomainError(MfsgError, ValueError):
    exit_code = 2
