"""Exception hierarchy shared by every module."""


class NLFError(Exception):
    """Base class for all package errors."""


class GeometryError(NLFError):
    pass


class DegenerateProjection(GeometryError):
    pass


class ParallelRay(GeometryError):
    pass


class NoIntersection(GeometryError):
    pass


class TangentRay(GeometryError):
    pass


class ZeroDirection(GeometryError):
    pass


class InvalidCamera(GeometryError):
    pass


class UnknownView(NLFError):
    pass


class InsufficientViews(NLFError):
    pass


class ShapeMismatch(NLFError, ValueError):
    pass


class AllPointsMasked(NLFError):
    pass


class AllViewsMasked(NLFError):
    pass


class NonFiniteLoss(NLFError, FloatingPointError):
    pass


class ConfigError(NLFError, ValueError):
    pass


class ImageTooSmall(NLFError, ValueError):
    pass


# scene-io
class ParseError(NLFError, ValueError):
    pass


class MissingImage(NLFError, FileNotFoundError):
    pass


class InvalidPose(NLFError, ValueError):
    def __init__(self, view_id, reason):
        super().__init__(f"view {view_id}: {reason}")
        self.view_id = view_id


class InvalidSpec(NLFError, ValueError):
    pass


class CheckpointError(NLFError):
    pass


class CorruptArchive(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TensorShapeMismatch(CheckpointError, ValueError):
    def __init__(self, name, expected, found):
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, found {tuple(found)}")
        self.name = name
        self.expected = tuple(expected)
        self.found = tuple(found)
