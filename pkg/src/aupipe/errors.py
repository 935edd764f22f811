"""Exception hierarchy shared by every stage of the pipeline."""


class AUPipeError(Exception):
    """Base class for all pipeline errors."""


class DataError(AUPipeError, ValueError):
    """Input data could not be used (bad file, bad values, misaligned frames)."""


class FormatError(DataError):
    pass


class LabelValueError(DataError):
    pass


class DuplicateKeyError(DataError):
    pass


class AlignmentError(DataError):
    pass


class SplitError(DataError):
    pass


class ConfigError(AUPipeError, ValueError):
    pass


class ShapeError(AUPipeError, ValueError):
    pass


class TrainingError(AUPipeError, RuntimeError):
    pass
