"""Observational data container, validation, and permutation utilities."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray


class DataError(ValueError):
    """Raised when observational data fails validation.

    Row numbers in messages are 1-based to match file line reporting.
    """


@dataclass(frozen=True)
class ArmIndex:
    """Sorted unit indices (0-based) of each treatment arm."""

    treated: NDArray[np.intp]
    control: NDArray[np.intp]


@dataclass(frozen=True)
class Dataset:
    """Immutable observational sample of (covariates, treatment, outcome).

    Attributes
    ----------
    covariates : ndarray of shape (n, d)
        Real covariate rows.
    treatment : ndarray of shape (n,)
        Binary arm indicator, 0 for control and 1 for treated.
    outcome : ndarray of shape (n,)
        Observed scalar outcome.
    """

    covariates: NDArray[np.float64]
    treatment: NDArray[np.int64]
    outcome: NDArray[np.float64]

    def __post_init__(self) -> None:
        X = np.ascontiguousarray(self.covariates, dtype=np.float64)
        d_arr = np.asarray(self.treatment)
        y = np.ascontiguousarray(self.outcome, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] < 1:
            raise DataError("covariates must be a 2-d array with at least one column")
        n = X.shape[0]
        if d_arr.shape != (n,) or y.shape != (n,):
            raise DataError("covariates, treatment, and outcome lengths disagree")
        if n < 2:
            raise DataError(f"need at least 2 units, got {n}")
        bad = np.nonzero(~np.isfinite(X).all(axis=1))[0]
        if bad.size:
            raise DataError(f"non-finite covariate at row {bad[0] + 1}")
        bad = np.nonzero(~np.isfinite(y))[0]
        if bad.size:
            raise DataError(f"non-finite outcome at row {bad[0] + 1}")
        d_float = np.asarray(d_arr, dtype=np.float64)
        bad = np.nonzero(~np.isin(d_float, (0.0, 1.0)))[0]
        if bad.size:
            raise DataError(f"treatment must be 0 or 1 at row {bad[0] + 1}")
        d_int = d_float.astype(np.int64)
        if int(d_int.sum()) == 0:
            raise DataError("empty treated arm")
        if int(d_int.sum()) == n:
            raise DataError("empty control arm")
        for arr in (X, d_int, y):
            arr.setflags(write=False)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "treatment", d_int)
        object.__setattr__(self, "outcome", y)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    @property
    def n_treated(self) -> int:
        return int(self.treatment.sum())

    @property
    def n_control(self) -> int:
        return self.n - self.n_treated

    def arm_index(self) -> ArmIndex:
        return ArmIndex(
            treated=np.nonzero(self.treatment == 1)[0],
            control=np.nonzero(self.treatment == 0)[0],
        )

    def arm_units(self, arm: int) -> NDArray[np.intp]:
        """Sorted 0-based indices of units in the given arm."""
        return np.nonzero(self.treatment == arm)[0]

    def rows(self) -> list[tuple[list[float], int, float]]:
        """The sample as plain (covariate list, treatment, outcome) rows."""
        return [
            (self.covariates[i].tolist(), int(self.treatment[i]), float(self.outcome[i]))
            for i in range(self.n)
        ]


def check_arrays(X: ArrayLike, treatment: ArrayLike, outcome: ArrayLike) -> Dataset:
    """Validate array inputs and wrap them in a :class:`Dataset`.

    Accepts anything array-like; a 1-d covariate vector is treated as a
    single column.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    return Dataset(X, np.asarray(treatment), np.asarray(outcome, dtype=np.float64))


def load_dataset(rows: Iterable[Sequence]) -> Dataset:
    """Build a validated :class:`Dataset` from (covariates, treatment, outcome) rows.

    Parameters
    ----------
    rows : iterable of (covariate sequence, treatment flag, outcome)

    Raises
    ------
    DataError
        On dimension mismatch, non-finite values, an empty arm, or fewer
        than two rows; messages name the offending 1-based row.
    """
    covs: list[list[float]] = []
    flags: list[float] = []
    ys: list[float] = []
    dim: int | None = None
    for k, row in enumerate(rows):
        if len(row) != 3:
            raise DataError(f"expected (covariates, treatment, outcome) at row {k + 1}")
        x, flag, y = row
        x = np.atleast_1d(np.asarray(x, dtype=np.float64))
        if x.ndim != 1:
            raise DataError(f"covariates must be a vector at row {k + 1}")
        if dim is None:
            dim = x.size
            if dim < 1:
                raise DataError(f"empty covariate vector at row {k + 1}")
        elif x.size != dim:
            raise DataError(f"dimension mismatch at row {k + 1}")
        covs.append(x.tolist())
        flags.append(float(flag))
        ys.append(float(y))
    if not covs:
        raise DataError("need at least 2 units, got 0")
    return Dataset(
        np.asarray(covs, dtype=np.float64),
        np.asarray(flags),
        np.asarray(ys, dtype=np.float64),
    )


@dataclass(frozen=True)
class Permutation:
    """A bijection on unit indices {0, ..., n-1}."""

    mapping: NDArray[np.intp]

    def __post_init__(self) -> None:
        p = np.asarray(self.mapping, dtype=np.intp)
        n = p.size
        if not np.array_equal(np.sort(p), np.arange(n)):
            raise DataError("permutation mapping is not a bijection")
        p.setflags(write=False)
        object.__setattr__(self, "mapping", p)

    @property
    def n(self) -> int:
        return self.mapping.size

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.mapping)
        inv[self.mapping] = np.arange(self.n)
        return Permutation(inv)

    @staticmethod
    def identity(n: int) -> "Permutation":
        return Permutation(np.arange(n))

    @staticmethod
    def random(n: int, rng: np.random.Generator) -> "Permutation":
        return Permutation(rng.permutation(n))


def permute(ds: Dataset, p: Permutation) -> Dataset:
    """Reindex a dataset so row i of the output is row p(i) of the input."""
    if p.n != ds.n:
        raise DataError(f"permutation is over {p.n} units, dataset has {ds.n}")
    idx = p.mapping
    return Dataset(ds.covariates[idx], ds.treatment[idx], ds.outcome[idx])


def canonical_order(ds: Dataset) -> NDArray[np.intp]:
    """Relabeling-invariant unit order: lexicographic by covariate values.

    Weight builders run in this order so that identical point sets produce
    bitwise-identical weights no matter how the rows were fed in. Ties in
    covariate values keep their original relative order (lexsort is stable).
    """
    keys = tuple(ds.covariates[:, c] for c in range(ds.d - 1, -1, -1))
    return np.lexsort(keys)
