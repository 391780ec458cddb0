"""Exception hierarchy shared by every module."""


class DresError(Exception):
    """Base class for all toolkit errors."""


class ShapeMismatch(DresError, ValueError):
    pass


class LengthMismatch(ShapeMismatch):
    pass


class UnknownInstance(DresError, KeyError):
    def __init__(self, instance_id):
        super().__init__(instance_id)
        self.instance_id = instance_id

    def __str__(self):
        return f"instance id {self.instance_id} has no points in the scene"


class TaggedTextError(DresError, ValueError):
    """Malformed "[phrase](ids)" text. ``offset`` is a UTF-8 byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class UnbalancedDelimiters(TaggedTextError):
    pass


class EmptyIdList(TaggedTextError):
    pass


class NonIntegerId(TaggedTextError):
    pass


class FileUnreadable(DresError, OSError):
    pass


class MalformedRecord(DresError, ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


class EmptyDataset(DresError, ValueError):
    pass


class EmptyInput(DresError, ValueError):
    pass


class DegenerateScene(DresError, ValueError):
    pass


class IndexOutOfRange(DresError, IndexError):
    pass


class NonFiniteActivation(DresError, FloatingPointError):
    pass


class NonFiniteGradient(DresError, FloatingPointError):
    pass


class DivergedLoss(DresError, FloatingPointError):
    pass


class MissingPrediction(DresError, KeyError):
    def __init__(self, description_id):
        super().__init__(description_id)
        self.description_id = description_id

    def __str__(self):
        return f"no prediction for description {self.description_id!r}"


class PhraseCountMismatch(DresError, ValueError):
    pass


class ConfigInfeasible(DresError, ValueError):
    pass


class FeatureFileMissing(DresError, FileNotFoundError):
    pass


class PathUnwritable(DresError, OSError):
    pass
