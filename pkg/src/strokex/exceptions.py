"""Custom exceptions for the stroke extraction toolkit"""


class StrokexError(Exception):
    """Base exception class"""

    # exit code reported by the command line for this family of errors
    exit_code = 2


class ConfigException(StrokexError):
    """Exceptions for invalid, unsupported or conflicting configuration"""

    exit_code = 1


class DatasetException(StrokexError):
    """Exceptions for invalid primitives, layouts, samples and dataset files"""

    exit_code = 1


class CheckpointException(StrokexError):
    """Exceptions for missing, unreadable or mismatched stage checkpoints"""

    exit_code = 1


class ShapeException(StrokexError):
    """Exceptions for mismatched image, field or channel dimensions"""

    pass


class EstimationException(StrokexError):
    """Exceptions for empty regions handed to estimators and geometry helpers"""

    pass


class StageException(StrokexError):
    """Exceptions raised when a pipeline stage fails on a single stroke"""

    def __init__(self, stage, stroke_index, reason):

        self.stage = stage
        self.stroke_index = stroke_index
        super().__init__(f"stroke {stroke_index}: {stage} failed: {reason}")
