"""Exception hierarchy for the simulator."""


class EEFLError(Exception):
    """Base class for all errors raised by eefl."""


class ConfigurationError(EEFLError, ValueError):
    pass


class ModelError(EEFLError, ValueError):
    """Shapes or segment layouts do not match the model configuration."""


class InfeasibleTargetError(EEFLError, ValueError):
    """No CTC alignment exists between the frames and the target sequence."""


class IntegrityError(EEFLError, ValueError):
    """A client update carries nonzero values outside its sub-net."""


class DivergenceError(EEFLError, FloatingPointError):
    """Training produced a non-finite loss or parameter update."""


class ClientDivergenceError(DivergenceError):
    pass


class CheckpointError(EEFLError, ValueError):
    pass


class ReportParseError(EEFLError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
