"""Exception types raised across the package."""


class EgoForecastError(Exception):
    """Base class for all package errors."""


class DegenerateGaze(EgoForecastError):
    pass


class ParallelGazes(EgoForecastError):
    pass


class GridMismatch(EgoForecastError):
    pass


class NonDivisibleFactor(EgoForecastError):
    pass


class EmptyFrame(EgoForecastError):
    pass


class DegenerateCollinear(EgoForecastError):
    pass


class ShapeMismatch(EgoForecastError):
    pass


class NonFiniteLoss(EgoForecastError):
    pass


class NoPairs(EgoForecastError):
    pass


class LengthMismatch(EgoForecastError):
    pass


class EmptySlice(EgoForecastError):
    pass


class TooLarge(EgoForecastError):
    pass


class InvalidConfig(EgoForecastError):
    pass


class HorizonExceedsData(EgoForecastError):
    pass


class VersionMismatch(EgoForecastError):
    pass


class HashMismatch(EgoForecastError):
    pass


class Corrupt(EgoForecastError):
    pass
