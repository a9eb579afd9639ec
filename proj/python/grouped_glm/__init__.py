"""Fixed-effects, regularized fixed-effects and multilevel GLM estimators for grouped data."""

from ._core import DataError, fit, generate, integrated_loglik

__all__ = ["DataError", "fit", "generate", "integrated_loglik"]
__version__ = "0.1.0"
