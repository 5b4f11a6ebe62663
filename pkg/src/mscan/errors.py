"""Exception hierarchy shared by every stage of the pipeline."""


class MScanError(Exception):
    """Base class for all pipeline errors."""


class StudyError(MScanError):
    """Problem with on-disk study data (maps to CLI exit code 2)."""


class ManifestError(StudyError):
    pass


class MissingFile(StudyError):
    pass


class ShapeMismatch(StudyError):
    pass


class BadGeometry(StudyError):
    pass


class MissingLevel(StudyError):
    pass


class UnknownStudy(StudyError):
    pass


class EmptySeries(StudyError):
    pass


class NotEnoughSlices(MScanError):
    pass


class BadShape(MScanError, ValueError):
    pass


class BadLabel(MScanError, ValueError):
    pass


class EmptyDataset(MScanError):
    pass


class TooFewStudies(MScanError):
    pass


class SingleClass(MScanError, ValueError):
    pass


class MissingPriorStage(MScanError):
    pass


class CheckpointError(MScanError):
    pass
