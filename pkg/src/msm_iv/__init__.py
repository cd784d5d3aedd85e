"""Marginal structural models with a time-varying instrument.

Instrument-weighted, multiply robust and locally efficient estimators of
MSM parameters when sequential randomization fails, together with an
exact enumeration oracle for small discrete processes.
"""
__version__ = "0.1.0"

from .errors import (ConfigError, IdentityError, MergedCellWarning, MsmIvError, NumericError,
                     PanelError, RelevanceWarning, SeparationWarning, SpecValidationError,
                     StateSpaceError)
from .panel import Panel, PanelSchema, Regime, enumerate_regimes, load_panel, write_panel
from .msm import MsmSpec
from .dgp import (BUILTINS, DgpSpec, MisspecPattern, conditional_tables, desk_dgp, simulate,
                  validate)
from .nuisance import NuisanceSet, ReferenceDensity, fit_nuisances, set_reference_density
from .weights import iv_weights, sra_weights, weight_diagnostics
from .estimators import (ESTIMATORS, Estimate, bootstrap, fit, fit_dr_sra, fit_efficient_iv,
                         fit_ipw_iv, fit_ipw_sra, fit_mr_iv)

__all__ = [
    "__version__", "Panel", "PanelSchema", "Regime", "enumerate_regimes", "load_panel",
    "write_panel", "MsmSpec", "BUILTINS", "DgpSpec", "MisspecPattern", "conditional_tables",
    "desk_dgp", "simulate", "validate", "NuisanceSet", "ReferenceDensity", "fit_nuisances",
    "set_reference_density", "iv_weights", "sra_weights", "weight_diagnostics", "ESTIMATORS",
    "Estimate", "bootstrap", "fit", "fit_dr_sra", "fit_efficient_iv", "fit_ipw_iv", "fit_ipw_sra",
    "fit_mr_iv", "MsmIvError", "PanelError", "ConfigError", "SpecValidationError", "NumericError",
    "IdentityError", "StateSpaceError", "SeparationWarning", "MergedCellWarning", "RelevanceWarning",
]
