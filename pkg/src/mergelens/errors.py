"""Exception hierarchy shared by every module."""


class MergeLensError(Exception):
    """Base class for all domain errors."""


class MalformedContainer(MergeLensError):
    pass


class NonFiniteWeights(MergeLensError):
    def __init__(self, names):
        self.names = sorted(names)
        super().__init__(f"non-finite values in tensors: {', '.join(self.names)}")


class DuplicateTensorName(MergeLensError):
    pass


class IoFailure(MergeLensError):
    pass


class IncompatibleParents(MergeLensError):
    def __init__(self, message, report=None):
        self.report = report
        super().__init__(message)


class DegenerateWeights(MergeLensError):
    pass


class ParameterOutOfRange(MergeLensError):
    pass


class RecipeError(MergeLensError):
    pass


class ArchitectureMismatch(MergeLensError):
    pass


class DegenerateTask(MergeLensError):
    pass


class DimensionMismatch(MergeLensError):
    pass


class EmptySplit(MergeLensError):
    pass


class InsufficientData(MergeLensError):
    pass


class ConstantInput(MergeLensError):
    pass


class ManifestError(MergeLensError):
    """Invalid run manifest; ``field`` is the path of the first offending field."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class StageError(MergeLensError):
    """A pipeline stage failed; wraps the underlying error with the stage name."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
