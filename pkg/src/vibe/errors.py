"""Exception hierarchy shared by every stage."""


class VibeError(Exception):
    """Base class for all pipeline errors."""


# geometry
class TooFewPoints(VibeError):
    pass


class DegenerateConfiguration(VibeError):
    pass


class NonConvergent(VibeError):
    pass


class BehindPlane(VibeError):
    pass


# tracker
class SingularInnovation(VibeError):
    pass


class OutOfOrderFrames(VibeError):
    pass


# metrics
class EmptyTruth(VibeError):
    pass


class EmptySamples(VibeError):
    pass


class GridMismatch(VibeError):
    pass


class WindowOutOfRange(VibeError):
    pass


# simulation
class ActionOutOfRange(VibeError):
    pass


class NoSuchAgentAtTime(VibeError):
    pass


class NoPath(VibeError):
    pass


# networks and learning
class ShapeMismatch(VibeError):
    pass


class BadMagic(VibeError):
    pass


class VersionMismatch(VibeError):
    pass


class TruncatedFile(VibeError):
    pass


class EmptyDataset(VibeError):
    pass


class NonFiniteLoss(VibeError):
    def __init__(self, message, batch=None, epoch=None):
        super().__init__(message)
        self.batch = batch
        self.epoch = epoch


# configuration / orchestration
class ConfigError(VibeError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class UnknownKey(ConfigError):
    pass


class TypeMismatch(ConfigError):
    pass


class MissingRequired(ConfigError):
    pass


class StageFailure(VibeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
