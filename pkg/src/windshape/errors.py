"""Exception hierarchy shared by all windshape modules."""


class WindshapeError(Exception):
    """Base class for every error raised by the package."""


class DomainError(WindshapeError, ValueError):
    """An argument lies outside the physical or mathematical domain."""


class ConfigurationError(WindshapeError, ValueError):
    """Parameters or weights are inconsistent or malformed."""


class EnvelopeError(WindshapeError):
    """Requested operating point violates the turbine envelope."""


class InfeasibleReferenceError(WindshapeError):
    """No equilibrium delivers the requested power at this wind speed."""


class NumericError(WindshapeError, ArithmeticError):
    """A numerical kernel failed to converge or met a degenerate case."""


class NoStabilizingSolutionError(NumericError):
    """Riccati Hamiltonian has eigenvalues on the imaginary axis."""


class UnboundedNormError(NumericError):
    """H-infinity norm requested for a system that is not stable."""


class ResonanceError(NumericError):
    """Frequency response evaluated at a pole on the imaginary axis."""


class AlgebraicLoopError(NumericError):
    """Feedback interconnection is ill-posed (I - D_G D_K singular)."""


class DiscretizationError(NumericError):
    """Bilinear transform hit a pole at s = 2/dt."""


class SynthesisError(WindshapeError):
    """Loop-shaping synthesis failed; ``step`` names the stage (a)-(e)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step

    def __str__(self):
        base = super().__str__()
        return f"step ({self.step}): {base}" if self.step else base


class IntegrationFault(WindshapeError):
    """Plant integration left the physical domain.

    The last valid state is available as ``last_state``.
    """

    def __init__(self, message, last_state=None, time=None):
        super().__init__(message)
        self.last_state = last_state
        self.time = time
