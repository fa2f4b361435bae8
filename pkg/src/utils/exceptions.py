# EXCEPTION HIERARCHY SHARED BY ALL COMPONENTS

class MicrostructureError(Exception):
    """
    Base class for every error raised on purpose by this package.

    `exit_code` is the process exit status the CLI uses when the error escapes a command.
    """
    exit_code = 1


class ConfigurationError(MicrostructureError, ValueError):
    exit_code = 2


class IncompressibilityError(ConfigurationError):
    """ Raised when a Poisson's ratio at or above 0.5 is requested. """


class DataFormatError(MicrostructureError, ValueError):
    exit_code = 3

    def __init__(self, message : str, offset : int | None = None) -> None:
        self.offset = offset

        if offset is not None:
            message = f"{message} (at byte offset {offset})"

        super().__init__(message)


class InputPathError(DataFormatError, FileNotFoundError):
    pass


class ContractError(MicrostructureError, ValueError):
    """ Shape or length mismatch at a module boundary. """
    exit_code = 3


class CheckpointError(MicrostructureError):
    exit_code = 3


class NumericalFailureError(MicrostructureError, ArithmeticError):
    exit_code = 4

    def __init__(self, message : str, step : int | None = None) -> None:
        self.step = step

        if step is not None:
            message = f"{message} (step {step})"

        super().__init__(message)


class ElementInversionError(NumericalFailureError):
    """
    det F <= 0 at a quadrature point. `element` and `point` locate the first offending point.
    """

    def __init__(self, message : str, element : int | None = None, point : tuple | None = None) -> None:
        self.element = element
        self.point   = point

        if element is not None:
            message  = f"{message} in element {element} at {point}"

        super().__init__(message)


class NonConvergenceError(NumericalFailureError):

    def __init__(self, message : str, residual_norm : float, step : int | None = None) -> None:
        self.residual_norm = residual_norm

        super().__init__(f"{message}; last residual norm {residual_norm:.3e}", step = step)


class ExhaustionError(MicrostructureError):
    """ A filter run hit its generation cap without a single acceptance. """
    exit_code = 5
