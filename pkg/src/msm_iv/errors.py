"""Exception and warning types shared across the package."""


class MsmIvError(Exception):
    """Base class for package errors."""


class PanelError(MsmIvError, ValueError):
    """Malformed longitudinal input."""


class ConfigError(MsmIvError, ValueError):
    """Invalid scenario, model or DGP configuration."""


class SpecValidationError(ConfigError):
    """A DGP specification failed validation; carries the full report."""

    def __init__(self, report):
        self.report = report
        super().__init__("; ".join(report.errors) or "invalid DGP specification")


class NumericError(MsmIvError, ArithmeticError):
    """Solver failure, singular design, or a positivity breach."""


class IdentityError(MsmIvError):
    """An exact identity check did not hold."""


class StateSpaceError(ConfigError):
    """Enumeration would exceed the configured state-space cap."""


class SeparationWarning(UserWarning):
    """Logistic fit shows signs of (quasi-)separation."""


class MergedCellWarning(UserWarning):
    """A saturated fit had to borrow from a coarser cell."""


class RelevanceWarning(UserWarning):
    """Instrument effect is zero on some reachable history."""
