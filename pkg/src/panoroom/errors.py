"""Exception hierarchy shared across the package."""


class PanoRoomError(Exception):
    """Base class for every error raised by panoroom."""


class DomainError(PanoRoomError, ValueError):
    """An input lies outside the domain of a function (e.g. off-image pixel)."""


class DegenerateFitError(PanoRoomError):
    pass


class GeometryError(PanoRoomError):
    """Inconsistent scene geometry, such as a camera outside its room."""


class MapFormatError(PanoRoomError, ValueError):
    pass


class DimensionError(PanoRoomError, ValueError):
    pass


class DegenerateClassError(PanoRoomError):
    """A class-balanced loss was asked to weight a class with no pixels."""


class ExtractionError(PanoRoomError):
    pass


class FrameError(PanoRoomError):
    pass


class SolverError(PanoRoomError):
    pass


class MetricError(PanoRoomError):
    pass


class GenerationError(PanoRoomError):
    pass


class ConfigError(PanoRoomError, ValueError):
    pass
