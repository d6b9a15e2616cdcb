"""Generalized method of L-moments for parametric families.

Sample and model L-moments, weighted L-moment estimators with optimal
weights and overidentification tests, selection of the moments used,
inference by simulating the leading term, and treatment effects in
randomized experiments.
"""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .errors import ConvergenceError, DomainError, GLMomError, NumericalError, OrderConditionError
from .families import GEV, GPD, get_family, mle_fit
from .gmlm import FitResult, WeightMatrix, fit_first_step, fit_two_step, fit_weighted, plugin_quantile
from .lmom import LMomentVector, Sample, caglad_lmoments, theoretical_lmoments, unbiased_lmoments

__all__ = [
    "__version__",
    "GLMomError",
    "DomainError",
    "OrderConditionError",
    "NumericalError",
    "ConvergenceError",
    "GEV",
    "GPD",
    "get_family",
    "mle_fit",
    "Sample",
    "LMomentVector",
    "caglad_lmoments",
    "unbiased_lmoments",
    "theoretical_lmoments",
    "WeightMatrix",
    "FitResult",
    "fit_weighted",
    "fit_first_step",
    "fit_two_step",
    "plugin_quantile",
]
