"""Exception types shared across the toolkit."""


class OtsegError(Exception):
    """Base class for all otseg-specific errors."""


class DomainError(OtsegError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class MassMismatch(OtsegError, ValueError):
    """Two histograms that must carry equal total mass do not."""

    def __init__(self, mass_a: float, mass_b: float, tol: float):
        self.mass_a = float(mass_a)
        self.mass_b = float(mass_b)
        self.tol = float(tol)
        super().__init__(
            f"histogram masses differ: {mass_a!r} vs {mass_b!r} "
            f"(tolerance {tol:.3e})"
        )


class NotConverged(OtsegError, RuntimeError):
    """An iterative routine exhausted its iteration budget.

    Carries the final residual so callers can decide whether the result
    is still usable.
    """

    def __init__(self, message: str, residual: float, iterations: int):
        self.residual = float(residual)
        self.iterations = int(iterations)
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")


class NumericalUnderflow(OtsegError, FloatingPointError):
    """A computation underflowed so badly the result would be meaningless."""


class Diverged(OtsegError, RuntimeError):
    """An iterate became non-finite."""

    def __init__(self, iteration: int):
        self.iteration = int(iteration)
        super().__init__(f"iterate became non-finite at iteration {iteration}")
