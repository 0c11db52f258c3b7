"""Exception types raised across the library."""

from __future__ import annotations


class EneError(Exception):
    """Base class for all library-specific failures."""


class SingularMatrix(EneError):
    """A pivot of the symmetric-indefinite factorization fell below the floor."""


class NonFinite(EneError):
    """A numerical evaluation produced NaN or infinity."""


class NotSymmetric(EneError):
    """A matrix expected to be symmetric violated the symmetry tolerance."""


class TooManyActive(EneError):
    """More constraints are active at one step than there are controls."""


class RankDeficientActiveSet(EneError):
    """The active constraint Jacobian w.r.t. the control lost row rank."""


class ZuuNotPositive(EneError):
    """The control-space curvature failed the positive-definiteness check.

    A Levenberg-style diagonal shift on the control curvature would restore
    positivity, but the recursion fails loudly instead of regularizing.
    """

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"control curvature not positive definite at step {step}")


class SingularKkt(EneError):
    """The per-step control/multiplier KKT block is singular."""

    def __init__(self, step: int | None = None, message: str | None = None):
        self.step = step
        where = "" if step is None else f" at step {step}"
        super().__init__(message or f"singular control-space KKT block{where}")


class SolveFailed(EneError):
    """The nominal solver exhausted its iteration budget."""

    def __init__(self, best_kkt_norm: float, best=None):
        self.best_kkt_norm = float(best_kkt_norm)
        self.best = best
        super().__init__(f"nominal solve did not converge; best stationarity norm {best_kkt_norm:.3e}")


class SegmentBudgetExceeded(EneError):
    """The multi-segment adaptation used more segments than allowed."""

    def __init__(self, segments):
        self.segments = segments
        super().__init__(f"segment budget exhausted after {len(segments)} segments")


class CycleDetected(EneError):
    """The same constraint flipped activity twice without homotopy progress."""

    def __init__(self, step: int, index: int):
        self.step = step
        self.index = index
        super().__init__(f"activity flip cycle at step {step}, constraint {index}")


class ConfigError(EneError):
    """A run configuration failed validation."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
