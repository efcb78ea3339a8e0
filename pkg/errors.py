"""Exceptions shared by the bao modules.

Validation-style failures subclass ValueError so callers that only know the
standard library can still catch them.
"""


class BaoError(Exception):
    pass


class DataError(BaoError, ValueError):
    """Parse or validation failure in a panel dataset."""

    def __init__(self, message, row=None, unit=None, field=None):
        super().__init__(message)
        self.row = row
        self.unit = unit
        self.field = field


class SpecificationError(BaoError, ValueError):
    pass


class StructuralError(BaoError, ValueError):
    pass


class FitError(BaoError, ValueError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


class InfeasibleError(BaoError, RuntimeError):
    def __init__(self, message, paths=()):
        super().__init__(message)
        self.paths = tuple(paths)


class TuningError(BaoError, RuntimeError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
