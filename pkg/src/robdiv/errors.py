"""Exception hierarchy shared across modules; the CLI maps these to exit codes."""


class RobdivError(Exception):
    """Base class for all package errors."""


class ConfigError(RobdivError):
    """Bad configuration, bad model file, or out-of-domain input."""


class AssumptionError(RobdivError):
    """Solvability conditions on the surplus model do not hold."""


class BeyondUpperBoundError(RobdivError):
    """Quadratic root requested where the discriminant is negative (x past b_upper)."""

    def __init__(self, x, discriminant):
        self.x = x
        self.discriminant = discriminant
        super().__init__(
            f"psi roots undefined at x={x!r}: discriminant {discriminant:.6e} < 0"
        )


class SolverError(RobdivError):
    """ODE integration or shooting failure."""


class DivergedError(SolverError):
    """Backward Riccati integration blew up before reaching x = 0."""

    def __init__(self, b, last_x, message="log-derivative blow-up"):
        self.b = b
        self.last_x = last_x
        super().__init__(f"{message}: b={b:.12g}, integration stopped at x={last_x:.12g}")


class SolvabilityError(SolverError):
    """Shooting bracket failure: residual has the same sign at both endpoints."""

    def __init__(self, b_lo, f_lo, b_hi, f_hi):
        self.bracket = (b_lo, b_hi)
        self.values = (f_lo, f_hi)
        super().__init__(
            f"no sign change in shooting residual on ({b_lo:.6g}, {b_hi:.6g}): "
            f"f={f_lo:.6g} and f={f_hi:.6g}"
        )


class CflError(RobdivError):
    """Lattice transition probability left [0, 1]; decrease dt (or refine the grid)."""


class PicardError(RobdivError):
    """Node-wise fixed point failed to converge."""

    def __init__(self, message, residuals):
        self.residuals = list(residuals)
        super().__init__(f"{message}; residual history tail {self.residuals[-5:]}")


class EstimationError(RobdivError):
    """Monte Carlo estimate cannot be formed (e.g. every path censored)."""
