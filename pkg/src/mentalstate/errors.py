"""Exception hierarchy shared by every stage of the pipeline."""


class MentalStateError(Exception):
    """Base class for all errors raised by this package."""


# dataio
class MalformedContainer(MentalStateError, ValueError):
    pass


class IoFailure(MentalStateError, OSError):
    pass


class SessionTooShort(MentalStateError, ValueError):
    pass


class InvalidSpec(MentalStateError, ValueError):
    pass


# dsp
class InvalidBand(MentalStateError, ValueError):
    pass


class SignalTooShort(MentalStateError, ValueError):
    pass


class DegenerateClip(MentalStateError, ValueError):
    pass


class ClipTooShort(MentalStateError, ValueError):
    pass


# nn
class ShapeMismatch(MentalStateError, ValueError):
    pass


class InsufficientBatch(MentalStateError, ValueError):
    pass


class InputTooShort(MentalStateError, ValueError):
    pass


class LabelOutOfRange(MentalStateError, ValueError):
    pass


# model
class InvalidConfig(MentalStateError, ValueError):
    pass


class ChecksumMismatch(MentalStateError, ValueError):
    pass


class VersionMismatch(MentalStateError, ValueError):
    pass


# evaluation / baseline
class TooFewUnits(MentalStateError, ValueError):
    pass


class EmptyTrainingSet(MentalStateError, ValueError):
    pass


class EmptyEvalSet(MentalStateError, ValueError):
    pass


class KTooLarge(MentalStateError, ValueError):
    pass
