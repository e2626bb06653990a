"""ATE estimation from imputed potential outcomes.

The point estimate averages regression-adjusted imputations of the missing
potential outcomes. It decomposes exactly into an augmented
inverse-probability-weighting form: an outcome-regression term, residual
terms weighted by ``1 + column sum`` (the implicit density ratio), and a
bias term that vanishes whenever the smoother's rows sum to one. The
decomposition identity is checked on every estimate; a breach signals an
implementation bug, never bad data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from .data import Dataset
from .outcome import Adjuster, OutcomeFitError, OutcomeModel
from .smoothers import Smoother, SmoothingMatrix

IDENTITY_TOL = 1e-10
Z_95 = 1.96


class InternalConsistencyError(AssertionError):
    """The exact decomposition identity failed beyond tolerance: a code bug."""


@dataclass(frozen=True)
class ImputedOutcomes:
    """Per-unit imputed potential outcome pair; the observed arm passes through."""

    y0: NDArray[np.float64]
    y1: NDArray[np.float64]

    def effect(self) -> NDArray[np.float64]:
        return self.y1 - self.y0


@dataclass(frozen=True)
class AipwComponents:
    """Exact decomposition of the imputation estimator.

    ``tau = regression + treated_residual - control_residual + unnormalized_bias``.
    """

    regression: float
    treated_residual: float
    control_residual: float
    unnormalized_bias: float

    def reassembled(self) -> float:
        return (
            self.regression
            + self.treated_residual
            - self.control_residual
            + self.unnormalized_bias
        )

    def to_dict(self) -> dict:
        return {
            "regression": self.regression,
            "treated_residual": self.treated_residual,
            "control_residual": self.control_residual,
            "unnormalized_bias": self.unnormalized_bias,
        }


@dataclass
class AteEstimate:
    """Point estimate with its decomposition, variance, and 95% interval."""

    tau_hat: float
    components: AipwComponents
    sigma2_hat: float
    n: int
    ci95: tuple[float, float] = field(init=False)
    method: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        half = Z_95 * math.sqrt(self.sigma2_hat / self.n)
        self.ci95 = (self.tau_hat - half, self.tau_hat + half)

    @property
    def standard_error(self) -> float:
        return math.sqrt(self.sigma2_hat / self.n)

    def covers(self, value: float) -> bool:
        return self.ci95[0] <= value <= self.ci95[1]

    def to_dict(self) -> dict:
        return {
            "tau_hat": self.tau_hat,
            "components": self.components.to_dict(),
            "sigma2_hat": self.sigma2_hat,
            "standard_error": self.standard_error,
            "ci95": list(self.ci95),
            "n": self.n,
            "method": self.method,
        }


def _fsum(values: NDArray[np.float64]) -> float:
    # exactly-rounded sum: result does not depend on element order
    return math.fsum(values.tolist())


def _arm_predictions(ds: Dataset, om: OutcomeModel):
    m0 = om.predict(ds.covariates, 0)
    m1 = om.predict(ds.covariates, 1)
    treated = ds.treatment == 1
    mu_own = np.where(treated, m1, m0)
    mu_opp = np.where(treated, m0, m1)
    return m0, m1, mu_own, mu_opp


def impute(ds: Dataset, sm: SmoothingMatrix, om: OutcomeModel) -> ImputedOutcomes:
    """Regression-adjusted imputation of each unit's missing potential outcome.

    The missing side is the weighted opposite-arm average of
    ``outcome + adjuster(at the unit) - adjuster(at the donor)``; the
    observed side is passed through unchanged.
    """
    _, _, mu_own, mu_opp = _arm_predictions(ds, om)
    smoothed = sm.apply(ds.outcome) + mu_opp * sm.row_sum - sm.apply(mu_own)
    treated = ds.treatment == 1
    y1 = np.where(treated, ds.outcome, smoothed)
    y0 = np.where(treated, smoothed, ds.outcome)
    return ImputedOutcomes(y0=y0, y1=y1)


def aipw_decompose(
    ds: Dataset,
    sm: SmoothingMatrix,
    om: OutcomeModel,
    expected_tau: Optional[float] = None,
) -> AipwComponents:
    """Exact component breakdown of the imputation estimator.

    Verifies that the components reassemble the directly computed estimate
    to within ``IDENTITY_TOL`` and raises
    :class:`InternalConsistencyError` otherwise.
    """
    n = ds.n
    m0, m1, mu_own, mu_opp = _arm_predictions(ds, om)
    resid = ds.outcome - mu_own
    treated = ds.treatment == 1
    weighted_resid = (1.0 + sm.col_sum) * resid
    components = AipwComponents(
        regression=_fsum(m1 - m0) / n,
        treated_residual=_fsum(weighted_resid[treated]) / n,
        control_residual=_fsum(weighted_resid[~treated]) / n,
        unnormalized_bias=_fsum(
            (2.0 * ds.treatment - 1.0) * (1.0 - sm.row_sum) * mu_opp
        )
        / n,
    )
    if expected_tau is None:
        expected_tau = _fsum(impute(ds, sm, om).effect()) / n
    gap = abs(components.reassembled() - expected_tau)
    if not gap <= IDENTITY_TOL:
        raise InternalConsistencyError(
            f"decomposition identity off by {gap:.3e} (> {IDENTITY_TOL:.0e}); "
            "this is an implementation bug"
        )
    return components


def variance_estimate(
    ds: Dataset, sm: SmoothingMatrix, om: OutcomeModel, tau_hat: float
) -> float:
    """Plug-in asymptotic variance of the estimator.

    Mean square of the estimated influence terms
    ``m1(x) - m0(x) + (2d - 1)(1 + colsum) resid - tau``.
    """
    m0, m1, mu_own, _ = _arm_predictions(ds, om)
    resid = ds.outcome - mu_own
    sign = 2.0 * ds.treatment - 1.0
    infl = m1 - m0 + sign * (1.0 + sm.col_sum) * resid - tau_hat
    return _fsum(infl * infl) / ds.n


def estimate_ate_direct(
    ds: Dataset,
    sm: SmoothingMatrix,
    om: OutcomeModel,
    method: Optional[dict] = None,
) -> AteEstimate:
    """Full-sample estimate from a prebuilt smoothing matrix and adjuster."""
    tau_hat = _fsum(impute(ds, sm, om).effect()) / ds.n
    components = aipw_decompose(ds, sm, om, expected_tau=tau_hat)
    sigma2 = variance_estimate(ds, sm, om, tau_hat)
    return AteEstimate(
        tau_hat=tau_hat,
        components=components,
        sigma2_hat=sigma2,
        n=ds.n,
        method=method or {},
    )


def random_folds(n: int, n_folds: int, seed: int) -> list[NDArray[np.intp]]:
    """Seeded random partition into folds whose sizes differ by at most one."""
    if n_folds < 2:
        raise ValueError("need at least 2 folds")
    if n_folds > n:
        raise ValueError(f"cannot split {n} units into {n_folds} folds")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    return [np.sort(f) for f in np.array_split(rng.permutation(n), n_folds)]


def estimate_ate_crossfit(
    ds: Dataset,
    smoother: Smoother,
    adjuster: Adjuster,
    n_folds: int,
    seed: int = 0,
    variance_mode: str = "full",
    folds: Optional[list[NDArray[np.intp]]] = None,
    method: Optional[dict] = None,
) -> AteEstimate:
    """Cross-fit estimate: nuisances for each fold come from the other folds.

    For every held-out unit, the adjuster is refitted without its fold and
    the smoother's column sum is rebuilt from the unit together with all
    out-of-fold units. Fold averages are weighted by fold size, so unequal
    folds (when ``n_folds`` does not divide n) are handled exactly.

    Parameters
    ----------
    variance_mode : {"full", "foldwise"}
        "full" evaluates the variance formula with full-sample weights and
        adjusters (the default); "foldwise" reuses the per-fold quantities.
    """
    n = ds.n
    if folds is None:
        folds = random_folds(n, n_folds, seed)
    elif len(folds) != n_folds:
        raise ValueError("explicit folds disagree with n_folds")
    if variance_mode not in ("full", "foldwise"):
        raise ValueError("variance_mode must be 'full' or 'foldwise'")
    reg_diff = np.empty(n)
    col_sum = np.empty(n)
    resid = np.empty(n)
    all_units = np.arange(n)
    for fold in folds:
        out_fold = np.setdiff1d(all_units, fold)
        try:
            om_k = adjuster.fit(ds, exclude=fold)
        except OutcomeFitError as exc:
            raise OutcomeFitError(f"cross-fit fold too small to fit adjuster: {exc}") from exc
        x_in = ds.covariates[fold]
        reg_diff[fold] = om_k.predict(x_in, 1) - om_k.predict(x_in, 0)
        own = np.where(
            ds.treatment[fold] == 1, om_k.predict(x_in, 1), om_k.predict(x_in, 0)
        )
        resid[fold] = ds.outcome[fold] - own
        col_sum[fold] = smoother.crossfit_col_sums(ds, fold, out_fold)
    sign = 2.0 * ds.treatment - 1.0
    terms = reg_diff + sign * (1.0 + col_sum) * resid
    tau_hat = _fsum(terms) / n
    treated = ds.treatment == 1
    weighted_resid = (1.0 + col_sum) * resid
    components = AipwComponents(
        regression=_fsum(reg_diff) / n,
        treated_residual=_fsum(weighted_resid[treated]) / n,
        control_residual=_fsum(weighted_resid[~treated]) / n,
        unnormalized_bias=0.0,
    )
    gap = abs(components.reassembled() - tau_hat)
    if not gap <= IDENTITY_TOL:
        raise InternalConsistencyError(
            f"cross-fit decomposition off by {gap:.3e}; this is an implementation bug"
        )
    if variance_mode == "full":
        sm_full = smoother.weights(ds)
        om_full = adjuster.fit(ds)
        sigma2 = variance_estimate(ds, sm_full, om_full, tau_hat)
    else:
        centered = terms - tau_hat
        sigma2 = _fsum(centered * centered) / n
    return AteEstimate(
        tau_hat=tau_hat,
        components=components,
        sigma2_hat=sigma2,
        n=n,
        method=method or {},
    )


def estimate(
    ds: Dataset,
    smoother: Smoother,
    adjuster: Adjuster,
    crossfit: Optional[int] = None,
    seed: int = 0,
    variance_mode: str = "full",
) -> AteEstimate:
    """One-call estimate: builds weights, fits the adjuster, and assembles everything."""
    method = {
        "smoother": smoother.descriptor(),
        "adjuster": adjuster.descriptor(),
        "mode": "full" if crossfit is None else f"crossfit-{crossfit}",
        "seed": seed,
    }
    if crossfit is None:
        sm = smoother.weights(ds)
        om = adjuster.fit(ds)
        method["adjuster_fit"] = om.descriptor()
        return estimate_ate_direct(ds, sm, om, method=method)
    return estimate_ate_crossfit(
        ds,
        smoother,
        adjuster,
        n_folds=crossfit,
        seed=seed,
        variance_mode=variance_mode,
        method=method,
    )
