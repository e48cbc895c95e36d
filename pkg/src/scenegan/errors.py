"""Exception types raised across the package."""


class SceneGanError(Exception):
    """Base class for all package errors."""


class EmptyScene(SceneGanError):
    pass


class ResolutionTooLow(SceneGanError):
    pass


class UnknownInstance(SceneGanError):
    pass


class OutOfRoom(SceneGanError):
    pass


class WidthMismatch(SceneGanError):
    pass


class ShapeMismatch(SceneGanError):
    pass


class IndivisibleChannels(SceneGanError):
    pass


class DegenerateCamera(SceneGanError):
    pass


class AllZeroWeights(SceneGanError):
    pass


class UnsortedDepths(SceneGanError):
    pass


class NoValidCamera(SceneGanError):
    pass


class NonFiniteLoss(SceneGanError):
    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path


class PlacementFailure(SceneGanError):
    pass


class DimensionMismatch(SceneGanError):
    pass


class TooFewSamples(SceneGanError):
    pass


class TensorFormatError(SceneGanError):
    pass
