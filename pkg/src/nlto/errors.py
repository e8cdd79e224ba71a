"""Exception types raised by the engine."""


class EngineError(Exception):
    """Base class for engine failures that are not plain usage errors."""


class IllConditionedMaterialError(EngineError):
    """Material parameters too close to the incompressible limit."""


class SingularSystemError(EngineError):
    """Stiffness factorization failed (inadequate support or degenerate density)."""

    def __init__(self, message, dof=None):
        super().__init__(message)
        self.dof = dof


class ElementInversionError(EngineError):
    """A deformation state with non-positive Jacobian was reached."""


class NewtonConvergenceError(EngineError):
    """Incremental Newton solve failed even after step halving."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SubproblemError(EngineError):
    """Moving-asymptotes subproblem could not be solved to tolerance."""


class ShardError(EngineError):
    """Base class for shard file format errors."""


class ShardMagicError(ShardError):
    """File does not start with the shard magic bytes."""


class ShardVersionError(ShardError):
    """Shard format version is not supported."""


class ShardTruncatedError(ShardError):
    """Shard ended before the declared number of records."""


class ShardChecksumError(ShardError):
    """A record failed its CRC32 check."""
