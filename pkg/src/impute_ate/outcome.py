"""Per-arm outcome regressions used for bias correction.

Bias-correction models are fitted separately on each arm (optionally
excluding held-out units for cross-fitting) and evaluated anywhere on the
covariate support. A deliberately trivial zero adjuster is provided so that
misspecified-outcome-model experiments are purely a matter of configuration.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, Optional

import numpy as np
from numpy.typing import NDArray

from .data import Dataset, canonical_order


class OutcomeFitError(ValueError):
    """Raised when an outcome regression cannot be identified."""


def _monomial_exponents(d: int, degree: int) -> NDArray[np.int64]:
    exps = [np.zeros(d, dtype=np.int64)]
    for total in range(1, degree + 1):
        for combo in combinations_with_replacement(range(d), total):
            e = np.zeros(d, dtype=np.int64)
            for c in combo:
                e[c] += 1
            exps.append(e)
    return np.asarray(exps)


def _basis(x: NDArray[np.float64], exps: NDArray[np.int64]) -> NDArray[np.float64]:
    return np.prod(x[:, None, :] ** exps[None, :, :], axis=2)


@dataclass(frozen=True)
class PolynomialModel:
    """Least-squares fit of the outcome on a bounded-degree monomial basis."""

    arm: int
    degree: int
    exponents: NDArray[np.int64]
    coef: NDArray[np.float64]
    center: NDArray[np.float64]
    scale: NDArray[np.float64]
    n_fit: int
    n_excluded: int

    def predict(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = (x - self.center) / self.scale
        return _basis(z, self.exponents) @ self.coef

    def descriptor(self) -> dict:
        return {
            "family": "polynomial",
            "degree": self.degree,
            "arm": self.arm,
            "n_fit": self.n_fit,
            "n_excluded": self.n_excluded,
        }


@dataclass(frozen=True)
class ZeroModel:
    """Predicts zero everywhere; residuals equal the raw outcomes."""

    arm: int = -1

    def predict(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        return np.zeros(x.shape[0])

    def descriptor(self) -> dict:
        return {"family": "zero"}


@dataclass(frozen=True)
class OutcomeModel:
    """Pair of fitted per-arm conditional-mean predictors."""

    control: PolynomialModel | ZeroModel
    treated: PolynomialModel | ZeroModel

    def predict(self, x: NDArray[np.float64], arm: int) -> NDArray[np.float64]:
        model = self.treated if arm == 1 else self.control
        out = model.predict(x)
        if not np.isfinite(out).all():
            raise OutcomeFitError("outcome model produced non-finite predictions")
        return out

    def arm_model(self, arm: int):
        return self.treated if arm == 1 else self.control

    def descriptor(self) -> dict:
        return {"control": self.control.descriptor(), "treated": self.treated.descriptor()}


_GRAM_RIDGE = 1e-10


def fit_polynomial(
    ds: Dataset,
    arm: int,
    degree: int,
    fold_mask: Optional[NDArray] = None,
) -> PolynomialModel:
    """Fit one arm's outcome regression on the monomial basis of the given degree.

    Parameters
    ----------
    ds : Dataset
    arm : {0, 1}
        Which arm's units enter the fit.
    degree : int
        Total degree bound of the basis.
    fold_mask : array of unit indices, optional
        Units excluded from the fit (cross-fitting).

    Raises
    ------
    OutcomeFitError
        If fewer fit units remain than basis functions.
    """
    if degree < 0:
        raise OutcomeFitError("degree must be nonnegative")
    if arm not in (0, 1):
        raise OutcomeFitError("arm must be 0 or 1")
    keep = np.zeros(ds.n, dtype=bool)
    keep[ds.treatment == arm] = True
    n_excl = 0
    if fold_mask is not None:
        fold_mask = np.asarray(fold_mask, dtype=np.intp)
        n_excl = int(keep[fold_mask].sum())
        keep[fold_mask] = False
    # fit in canonical covariate order so results do not depend on row labels
    order = canonical_order(ds)
    fit_units = order[keep[order]]
    exps = _monomial_exponents(ds.d, degree)
    if fit_units.size < exps.shape[0]:
        raise OutcomeFitError(
            f"under-identified basis: {fit_units.size} fit units for "
            f"{exps.shape[0]} basis functions (arm {arm}, degree {degree})"
        )
    x = ds.covariates[fit_units]
    y = ds.outcome[fit_units]
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    p_mat = _basis((x - center) / scale, exps)
    gram = p_mat.T @ p_mat
    gram[np.diag_indices_from(gram)] += _GRAM_RIDGE
    coef = np.linalg.solve(gram, p_mat.T @ y)
    if not np.isfinite(coef).all():
        raise OutcomeFitError(f"polynomial fit for arm {arm} did not converge")
    return PolynomialModel(
        arm=arm,
        degree=degree,
        exponents=exps,
        coef=coef,
        center=center,
        scale=scale,
        n_fit=int(fit_units.size),
        n_excluded=n_excl,
    )


def fit_outcome_pair(
    ds: Dataset, degree: int, fold_mask: Optional[NDArray] = None
) -> OutcomeModel:
    """Fit both arms' polynomial adjusters."""
    return OutcomeModel(
        control=fit_polynomial(ds, 0, degree, fold_mask),
        treated=fit_polynomial(ds, 1, degree, fold_mask),
    )


def zero_adjuster() -> OutcomeModel:
    """Adjuster pair that predicts zero, reducing imputation to raw weighted averages."""
    return OutcomeModel(control=ZeroModel(0), treated=ZeroModel(1))


def sup_error(
    model, truth: Callable[[NDArray], NDArray], grid: NDArray[np.float64]
) -> float:
    """Largest absolute gap between a fitted arm model and a reference function."""
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    if grid.shape[0] == 0:
        raise ValueError("grid must be nonempty")
    fitted = np.asarray(model.predict(grid), dtype=np.float64)
    target = np.asarray(truth(grid), dtype=np.float64).reshape(fitted.shape)
    return float(np.abs(fitted - target).max())


class Adjuster:
    """Configuration for a refittable bias-correction model."""

    def fit(self, ds: Dataset, exclude: Optional[NDArray] = None) -> OutcomeModel:
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class PolynomialAdjuster(Adjuster):
    degree: int = 2

    def fit(self, ds: Dataset, exclude: Optional[NDArray] = None) -> OutcomeModel:
        return fit_outcome_pair(ds, self.degree, exclude)

    def descriptor(self) -> dict:
        return {"type": "polynomial", "degree": self.degree}


@dataclass(frozen=True)
class ZeroAdjuster(Adjuster):
    def fit(self, ds: Dataset, exclude: Optional[NDArray] = None) -> OutcomeModel:
        return zero_adjuster()

    def descriptor(self) -> dict:
        return {"type": "zero"}


ADJUSTER_TYPES = {"polynomial": PolynomialAdjuster, "zero": ZeroAdjuster}
