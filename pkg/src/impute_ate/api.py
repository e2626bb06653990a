"""Top-level estimator with a scikit-learn style fit interface."""

from __future__ import annotations

from typing import Optional, Union

from sklearn.base import BaseEstimator

from .data import Dataset, check_arrays
from .estimation import AteEstimate, estimate
from .forest import ForestMatching
from .outcome import Adjuster, PolynomialAdjuster, ZeroAdjuster
from .smoothers import KernelMatching, LocalLinearMatching, Smoother, WnnMatching

_SMOOTHER_DEFAULTS = {
    "kernel": KernelMatching,
    "wnn": lambda: WnnMatching(n_neighbors=10),
    "local-linear": LocalLinearMatching,
    "forest": ForestMatching,
}


class ImputationAte(BaseEstimator):
    """Average-treatment-effect estimator based on regression-adjusted imputation.

    Missing potential outcomes are imputed by a cross-arm linear smoother and
    bias-corrected with per-arm outcome regressions. After :meth:`fit`, the
    point estimate, its exact component decomposition, the plug-in variance,
    and a 95% interval are available as attributes.

    Parameters
    ----------
    smoother : Smoother or {"kernel", "wnn", "local-linear", "forest"}
        Weight builder instance, or a name to use that builder's defaults.
    adjuster : Adjuster or {"polynomial", "zero"}
        Bias-correction model configuration.
    degree : int
        Polynomial degree when ``adjuster="polynomial"``.
    crossfit : int or None
        Number of folds for cross-fitting; None fits on the full sample.
    variance_mode : {"full", "foldwise"}
        Which nuisances enter the cross-fit variance estimate.
    seed : int
        Seed for fold assignment (and any randomized smoother).

    Examples
    --------
    >>> est = ImputationAte(smoother="wnn", degree=1).fit(X, d, y)
    >>> est.ate_, est.ci95_
    """

    def __init__(
        self,
        smoother: Union[str, Smoother] = "kernel",
        adjuster: Union[str, Adjuster] = "polynomial",
        degree: int = 2,
        crossfit: Optional[int] = None,
        variance_mode: str = "full",
        seed: int = 0,
    ):
        self.smoother = smoother
        self.adjuster = adjuster
        self.degree = degree
        self.crossfit = crossfit
        self.variance_mode = variance_mode
        self.seed = seed

    def _resolve_smoother(self) -> Smoother:
        if isinstance(self.smoother, str):
            try:
                return _SMOOTHER_DEFAULTS[self.smoother]()
            except KeyError:
                raise ValueError(
                    f"unknown smoother {self.smoother!r}; "
                    f"choose from {sorted(_SMOOTHER_DEFAULTS)}"
                ) from None
        return self.smoother

    def _resolve_adjuster(self) -> Adjuster:
        if isinstance(self.adjuster, str):
            if self.adjuster == "polynomial":
                return PolynomialAdjuster(self.degree)
            if self.adjuster == "zero":
                return ZeroAdjuster()
            raise ValueError(f"unknown adjuster {self.adjuster!r}")
        return self.adjuster

    def estimate(self, ds: Dataset) -> AteEstimate:
        """Estimate from an already validated :class:`Dataset`."""
        return estimate(
            ds,
            self._resolve_smoother(),
            self._resolve_adjuster(),
            crossfit=self.crossfit,
            seed=self.seed,
            variance_mode=self.variance_mode,
        )

    def fit(self, X, d, y) -> "ImputationAte":
        """Validate arrays, run the estimator, and store the results.

        Sets ``ate_``, ``components_``, ``sigma2_``, ``se_``, ``ci95_``,
        ``result_``, and ``n_features_in_``.
        """
        ds = check_arrays(X, d, y)
        result = self.estimate(ds)
        self.result_ = result
        self.ate_ = result.tau_hat
        self.components_ = result.components
        self.sigma2_ = result.sigma2_hat
        self.se_ = result.standard_error
        self.ci95_ = result.ci95
        self.n_features_in_ = ds.d
        return self

    def confidence_interval(self) -> tuple[float, float]:
        if not hasattr(self, "result_"):
            raise AttributeError("call fit first")
        return self.ci95_
