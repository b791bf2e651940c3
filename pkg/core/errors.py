# ---------------------- core/errors.py ----------------------
"""Exception hierarchy shared by every cvselect module."""


class CVSelectError(Exception):
    """Base class for all toolkit errors."""


class DataError(CVSelectError, ValueError):
    """Dataset ingestion or validation failure."""


class PlanError(CVSelectError, ValueError):
    """Invalid splitting parameters or an infeasible plan."""


class LossError(CVSelectError, ValueError):
    """Loss/metric misuse: unknown kind, missing prediction fields, bad dispersion."""


class FitError(CVSelectError, RuntimeError):
    """A model could not be fitted."""


# The subclasses below rebuild from their own arguments so they survive
# pickling across worker processes.

class RankDeficiencyError(FitError):
    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(map(str, self.columns))}")

    def __reduce__(self):
        return (type(self), (self.columns,))


class ConvergenceError(FitError):
    def __init__(self, what, iterations):
        self.what = what
        self.iterations = iterations
        super().__init__(f"{what} did not converge after {iterations} iterations")

    def __reduce__(self):
        return (type(self), (self.what, self.iterations))


class SeparationError(FitError):
    pass


class SingularJacobianError(FitError):
    pass


class SplitFitError(FitError):
    """Fit failure on one split of a plan."""

    def __init__(self, split_id, cause, model_id=None):
        self.split_id = split_id
        self.model_id = model_id
        self.cause = str(cause)
        prefix = f"model {model_id}: " if model_id else ""
        super().__init__(f"{prefix}fit failed on split {split_id}: {cause}")

    def __reduce__(self):
        return (type(self), (self.split_id, self.cause, self.model_id))


class SelectionError(CVSelectError, ValueError):
    pass


class ReportError(CVSelectError, ValueError):
    pass


class ConfigError(CVSelectError, ValueError):
    pass
