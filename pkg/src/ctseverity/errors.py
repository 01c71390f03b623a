"""Exception types. CLI maps ``ValidationError`` to exit code 2 and every
other ``CtSeverityError`` to exit code 3."""


class CtSeverityError(Exception):
    pass


class ValidationError(CtSeverityError, ValueError):
    """Bad input: malformed files, inconsistent dims, invalid parameters."""


class EmptySegmentationError(ValidationError):
    """The lung segmentation has no labelled voxels."""


class ConvergenceError(CtSeverityError, RuntimeError):
    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class DivergenceError(CtSeverityError, RuntimeError):
    pass


class StageError(CtSeverityError):
    """A pipeline stage failed; carries the stage name and case id."""

    def __init__(self, stage, case_id, cause):
        self.stage = stage
        self.case_id = case_id
        self.cause = cause
        where = f" (case {case_id})" if case_id is not None else ""
        super().__init__(f"stage {stage!r} failed{where}: {cause}")
