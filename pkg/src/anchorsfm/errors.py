"""Exception hierarchy shared by every module."""


class SfMError(Exception):
    """Base class for all errors raised by anchorsfm."""


class NumericalError(SfMError):
    """A solver or estimator could not produce a usable numeric answer."""


# camera geometry
class NonPositiveDepth(NumericalError):
    pass


class DistortionNotInvertible(NumericalError):
    pass


# closed-form estimators
class DegenerateConfiguration(NumericalError):
    pass


class InsufficientParallax(NumericalError):
    pass


class BehindCamera(NumericalError):
    pass


class ZeroLine(NumericalError):
    pass


# robust fitting
class TooFewMatches(SfMError):
    pass


class TooFewCorrespondences(SfMError):
    pass


class NoConsensus(NumericalError):
    pass


# least squares
class InvalidInitialPoint(NumericalError):
    pass


class NumericalFailure(NumericalError):
    pass


# pose / bundle
class DivergedBehindCamera(NumericalError):
    pass


class MissingEpipolarLine(SfMError):
    pass


class UnderConstrained(NumericalError):
    pass


class NegativeRayParameter(NumericalError):
    pass


# pipeline / io
class ProviderDeclined(SfMError):
    """The correspondence provider could not annotate the image the pipeline needs."""

    def __init__(self, image_id: str, state=None):
        super().__init__(f"image {image_id!r} needs a manual 2D-3D annotation")
        self.image_id = image_id
        self.state = state


class EmptyUnregisteredSet(SfMError):
    pass


class TooFewImages(SfMError):
    pass


class IdMismatch(SfMError):
    pass


class AlignmentDegenerate(NumericalError):
    pass


class InvalidSpec(SfMError):
    pass


class PointBehindCamera(NumericalError):
    pass
