"""Exception hierarchy for the spire package."""


class SpireError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SpireError):
    """Invalid model, data, or run configuration."""


class DataError(SpireError):
    """Malformed or inconsistent observed data."""


class DegenerateWorkingModelError(SpireError):
    """A working density assigned zero mass everywhere it was queried."""


class NumericalError(SpireError):
    """A numerical routine produced non-finite or unusable values."""


class ToleranceError(NumericalError):
    """An adaptive routine hit its depth cap before reaching tolerance."""


class SingularInformationError(SpireError):
    """The estimated score Jacobian is singular.

    Usually the data carry too little information for the requested model;
    consider a richer dataset or a smaller mean model.
    """


class TestFitError(SpireError):
    """A fit underlying the censoring test did not converge.

    Carries the two solver reports so callers can inspect diagnostics.
    """

    def __init__(self, message, reports=None):
        super().__init__(message)
        self.reports = reports or {}
