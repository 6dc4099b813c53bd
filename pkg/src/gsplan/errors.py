class GsplanError(Exception):
    """Base class for all errors raised by gsplan."""


class PreconditionError(GsplanError, ValueError):
    pass


class FormatError(GsplanError):
    """Input file does not follow the expected layout or schema."""


class DataError(GsplanError):
    """Input file parses but holds unusable values."""


class PlanningError(GsplanError):
    pass


class PipelineError(GsplanError):
    pass
