"""Exception hierarchy shared by all racestack modules."""


class RaceStackError(Exception):
    """Base class for every error raised by racestack."""


class InvalidInputError(RaceStackError, ValueError):
    pass


class InvalidIndexError(InvalidInputError, IndexError):
    pass


class InsufficientDataError(RaceStackError):
    """Too few points / cones / samples to run an estimator."""


class DegenerateError(RaceStackError):
    """Geometric configuration makes the problem singular or unobservable."""


class DegenerateRegistrationError(DegenerateError):
    pass


class LocalizationLostError(RaceStackError):
    pass


class PointAtInfinityError(RaceStackError):
    pass


class InvalidDatasetError(InvalidInputError):
    pass


class InvalidTrackError(InvalidInputError):
    pass


class InvalidLogError(InvalidInputError):
    pass


class LowSpeedError(RaceStackError):
    """Dynamic tire model is singular below the configured minimum speed."""


class FormatError(RaceStackError, ValueError):
    """A file does not match the expected versioned format."""
