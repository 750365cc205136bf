"""Exception types raised across the package."""


class SpanidError(Exception):
    """Base class for all package errors."""


class InputError(SpanidError, ValueError):
    """Malformed input file or argument.

    ``path`` is the JSON field path (``members[3].area``) and ``line`` the
    1-based source line, when known.
    """

    def __init__(self, message, path=None, line=None, source=None):
        self.path = path
        self.line = line
        self.source = source
        where = []
        if source:
            where.append(str(source))
        if line is not None:
            where.append(f"line {line}")
        if path:
            where.append(f"field {path}")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)


class DegenerateGeometryError(SpanidError, ValueError):
    pass


class ConstraintViolationError(SpanidError, ValueError):
    pass


class IllPosedCondensationError(SpanidError, ValueError):
    pass


class SingularCoefficientError(SpanidError, ValueError):
    pass


class MappingError(SpanidError, ValueError):
    pass


class PhysicalInconsistencyError(SpanidError, ValueError):
    pass


class ReductionError(SpanidError, ValueError):
    """Singular slave block or a sleeper attached to a slave DOF."""


class CacheMissError(SpanidError, KeyError):
    pass


class InstabilityError(SpanidError, FloatingPointError):
    pass


class StepFailureError(SpanidError, ArithmeticError):
    pass


class ProfileError(SpanidError, ValueError):
    pass


class DivergenceError(SpanidError, FloatingPointError):
    """Non-finite loss or gradient during identification.

    ``last_good`` carries the last finite deviation ratios.
    """

    def __init__(self, message, last_good=None, epoch=None):
        super().__init__(message)
        self.last_good = last_good
        self.epoch = epoch


class GradientCheckError(SpanidError, AssertionError):
    pass
