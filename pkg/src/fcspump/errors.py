"""Exception types raised by the fcspump pipeline."""


class FcsPumpError(Exception):
    """Base class for all package errors."""


class UnphysicalRate(FcsPumpError, ValueError):
    """A transition rate became negative.

    Parameters
    ----------
    time : float
        First time at which a negative rate was found.
    which : str
        Name of the offending rate channel.
    value : float
        The negative value.
    """

    def __init__(self, time, which="", value=float("nan")):
        self.time = float(time)
        self.which = which
        self.value = float(value)
        super().__init__(
            f"rate {which or '?'} = {self.value:.6g} < 0 at t = {self.time:.6g}"
        )


class DomainError(FcsPumpError, ValueError):
    """Input outside the domain of a closed-form expression."""


class NumericBlowup(FcsPumpError, FloatingPointError):
    """State or adjoint magnitude exceeded its sanity bound."""


class DegenerateKernel(FcsPumpError, ValueError):
    """The zero eigenvalue of a generator is not simple."""


class GridMismatch(FcsPumpError, ValueError):
    """Trajectory nodes do not line up with the period grid."""


class BoundViolated(FcsPumpError, ValueError):
    """An instantaneous rate exceeded the thinning bound."""


class ConfigError(FcsPumpError, ValueError):
    """Invalid experiment configuration.

    Parameters
    ----------
    message : str
    key : str, optional
        Offending configuration key.
    line : int, optional
        1-based line number in the config file.
    """

    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")

    def record(self):
        return {
            "error": type(self).__name__,
            "message": str(self),
            "key": self.key,
            "line": self.line,
        }
