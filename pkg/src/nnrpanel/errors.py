"""Exception hierarchy. Validation problems map to CLI exit code 1, numerical
failures to exit code 2."""


class NnrError(Exception):
    pass


class ValidationError(NnrError, ValueError):
    pass


class PanelFormatError(ValidationError):
    """Malformed panel CSV. Carries the offending line (1-based) and column."""

    def __init__(self, message, line=None, column=None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if column is not None:
            loc.append(f"column {column}")
        if loc:
            message = f"{message} ({', '.join(loc)})"
        super().__init__(message)
        self.line = line
        self.column = column


class UnsupportedFamilyError(ValidationError):
    pass


class NumericalError(NnrError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} at iteration {iteration}"
        super().__init__(message)
        self.iteration = iteration


class TuningError(NumericalError):
    def __init__(self, message, failures=None):
        super().__init__(message)
        self.failures = dict(failures or {})


class ConvergenceError(NumericalError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class InferenceError(NumericalError):
    pass


class JackknifeError(NumericalError):
    def __init__(self, message, half=None):
        if half is not None:
            message = f"{message} [{half}]"
        super().__init__(message)
        self.half = half
