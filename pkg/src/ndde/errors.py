"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DomainError(ValueError):
    """Argument lies outside the mathematically valid domain."""


class InputError(ValueError):
    """Malformed input data (samples, orderings, file contents)."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""


class DivergenceError(RuntimeError):
    """Time integration produced a non-finite state.

    When raised by the solver, t is the offending time (kept on .t);
    training raises it with a plain message once its retry budget is spent,
    in which case .t is nan.
    """

    def __init__(self, t, detail=""):
        if isinstance(t, str):
            self.t = float("nan")
            msg = t
        else:
            self.t = float(t)
            msg = "non-finite state at t=%r" % t
        if detail:
            msg += " (%s)" % detail
        super().__init__(msg)


class StateError(RuntimeError):
    """An object lacks data required by the requested operation."""


class ConfigError(ValueError):
    """Bad configuration file, flag, or unknown option."""
