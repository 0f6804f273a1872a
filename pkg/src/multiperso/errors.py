"""Exception hierarchy shared across the package."""


class MultiPersoError(Exception):
    pass


class InvalidArgumentError(MultiPersoError, ValueError):
    pass


class CapabilityError(MultiPersoError, TypeError):
    """The supplied model object lacks a required capability (e.g. attention taps)."""


class ContractViolationError(MultiPersoError, RuntimeError):
    pass


class NumericError(MultiPersoError, ArithmeticError):
    pass


class TransportError(MultiPersoError, ConnectionError):
    """An external client (describer, generator, segmenter, ...) failed."""


class PipelineError(MultiPersoError, RuntimeError):
    pass


class TrainingError(MultiPersoError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
