"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numeric aborts exit 3.
"""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class DataError(RuntimeError):
    """Input data is missing, empty, corrupt or otherwise unusable."""


class BundleLoadError(DataError):
    """A saved model bundle could not be restored."""

    def __init__(self, component: str, message: str):
        self.component = component
        super().__init__(f"{component}: {message}")


class NumericAbort(RuntimeError):
    """Optimization produced a non-finite loss."""

    def __init__(self, message: str, **diagnostic):
        self.diagnostic = diagnostic
        parts = ", ".join(f"{k}={v}" for k, v in diagnostic.items())
        super().__init__(f"{message} ({parts})" if parts else message)
