"""Exception types shared across the package."""


class PsbenchError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PsbenchError):
    """Invalid generator/experiment configuration."""


class CohortFormatError(PsbenchError):
    """Malformed row in a cohort file; carries the offending line number."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


class ReferentialIntegrityError(PsbenchError):
    """Covariate row references a subject absent from the subject file."""


class DegenerateLabelsError(PsbenchError):
    """Labels contain a single class; a classifier cannot be fitted."""


class NumericalError(PsbenchError):
    """Non-finite objective or other numerical breakdown during a fit."""


class NoEventsError(PsbenchError):
    """No events of the requested flavor; a survival model cannot be fitted."""


class NoInformativeStrataError(PsbenchError):
    """Every stratum is uninformative for the stratified treatment-effect fit."""


class NoOverlapError(PsbenchError):
    """No treated subject found any within-caliper comparator."""


class DegenerateIvError(PsbenchError):
    """Simulated instrument would have zero carriers in one arm."""


class InsufficientControlsError(PsbenchError):
    """Fewer than two negative-control estimates; no null distribution fit."""
