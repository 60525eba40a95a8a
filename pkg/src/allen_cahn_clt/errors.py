"""Exception hierarchy shared by all modules."""


class AllenCahnError(Exception):
    """Base class for every error raised by the package."""


class GridMismatch(AllenCahnError, ValueError):
    pass


class WidthUnresolvable(AllenCahnError, ValueError):
    pass


class EpsilonUnresolvable(WidthUnresolvable):
    pass


class NonFiniteInput(AllenCahnError, ValueError):
    pass


class NonFiniteState(AllenCahnError, FloatingPointError):
    """Raised when a time integration produces NaN/Inf.

    Carries the step index and the largest finite magnitude seen so far.
    """

    def __init__(self, message, step=None, max_value=None):
        super().__init__(message)
        self.step = step
        self.max_value = max_value


class TrajectoryTooCoarse(AllenCahnError, ValueError):
    pass


class InsufficientSnapshots(AllenCahnError, ValueError):
    pass


class TimeNotInTrajectory(AllenCahnError, KeyError):
    pass


class SnapshotMismatch(AllenCahnError, ValueError):
    pass


class MissingSnapshot(AllenCahnError, KeyError):
    pass


class NegativeTestFunction(AllenCahnError, ValueError):
    pass


class NoiseNotStored(AllenCahnError, KeyError):
    pass


class QuadratureUnderResolved(AllenCahnError, ValueError):
    pass


class PairingOverflow(AllenCahnError, OverflowError):
    pass


class ConfigError(AllenCahnError, ValueError):
    pass


class MissingManifest(AllenCahnError, FileNotFoundError):
    pass


class ReplicaFailure(AllenCahnError, RuntimeError):
    def __init__(self, message, replica=None, seed=None):
        super().__init__(message)
        self.replica = replica
        self.seed = seed
