"""Cross-arm smoothing matrices: kernel, weighted nearest-neighbor, local linear.

Every smoother here produces weights ``w[i <- j]`` defined only for pairs in
opposite treatment arms, so that the missing potential outcome of unit i can
be imputed as a weighted combination of opposite-arm outcomes. Weights are a
function of covariates and treatment only, never outcomes.

All builders internally reorder units into a canonical covariate order
(:func:`impute_ate.data.canonical_order`) before accumulating any sums, so
the resulting weights are exactly invariant to relabeling of the input rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from sklearn.base import BaseEstimator

from .data import Dataset, canonical_order
from .kernels import BandwidthMatrix, KernelSpec, default_bandwidth, scaled_kernel


class SmootherError(ValueError):
    """Raised when a smoother cannot produce valid weights for the data."""


@dataclass
class SmoothingMatrix:
    """Cross-arm weights with per-unit row and column aggregates.

    Attributes
    ----------
    n_units : int
        Number of units in the originating dataset.
    row_sum : ndarray of shape (n,)
        ``sum_j w[i <- j]`` per unit; 1 for normalized smoothers.
    col_sum : ndarray of shape (n,)
        ``sum_j w[j <- i]`` per unit, the implicit density-ratio estimate.
    fallback_flags : ndarray of bool, shape (n,)
        True where a local-linear system degenerated to a locally constant fit.
    """

    n_units: int
    matrix: sp.csr_matrix
    row_sum: NDArray[np.float64]
    col_sum: NDArray[np.float64]
    fallback_flags: NDArray[np.bool_]
    row_abs_sum: NDArray[np.float64] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.row_abs_sum is None:
            m = self.matrix
            self.row_abs_sum = np.abs(m).sum(axis=1).A1 if m.nnz else np.zeros(self.n_units)

    def apply(self, values: NDArray[np.float64]) -> NDArray[np.float64]:
        """Return the smoothed vector ``(W v)[i] = sum_j w[i <- j] v[j]``."""
        return self.matrix @ np.asarray(values, dtype=np.float64)

    def entries(self) -> tuple[NDArray[np.intp], NDArray[np.intp], NDArray[np.float64]]:
        """All stored (i, j, w[i <- j]) triplets, 0-based."""
        coo = self.matrix.tocoo()
        return coo.row.astype(np.intp), coo.col.astype(np.intp), coo.data

    def validate(self, ds: Optional[Dataset] = None, tol: float = 1e-12) -> None:
        """Check structural invariants; raises SmootherError on breach."""
        recomputed_row = self.matrix.sum(axis=1).A1
        recomputed_col = self.matrix.sum(axis=0).A1
        if np.abs(recomputed_row - self.row_sum).max(initial=0.0) > tol:
            raise SmootherError("stored row sums disagree with entries")
        if np.abs(recomputed_col - self.col_sum).max(initial=0.0) > tol:
            raise SmootherError("stored column sums disagree with entries")
        if ds is not None:
            rows, cols, _ = self.entries()
            if rows.size and np.any(ds.treatment[rows] == ds.treatment[cols]):
                raise SmootherError("weight entry links units in the same arm")

    def summary(self) -> dict:
        """Aggregate statistics for reports."""
        return {
            "n_units": self.n_units,
            "nonzeros": int(self.matrix.nnz),
            "row_sum_min": float(self.row_sum.min()),
            "row_sum_max": float(self.row_sum.max()),
            "col_sum_min": float(self.col_sum.min()),
            "col_sum_max": float(self.col_sum.max()),
            "col_sum_mean": float(self.col_sum.mean()),
            "row_abs_sum_max": float(self.row_abs_sum.max()),
            "fallback_count": int(self.fallback_flags.sum()),
        }


def density_ratio(sm: SmoothingMatrix, ds: Dataset) -> NDArray[np.float64]:
    """Per-unit implicit density-ratio estimate read off the smoothing matrix.

    For treated units this estimates (1 - e(x)) / e(x) and for control units
    e(x) / (1 - e(x)), where e is the propensity score; no propensity model
    is ever fit.
    """
    if sm.n_units != ds.n:
        raise SmootherError("smoothing matrix does not match dataset size")
    return sm.col_sum.copy()


@dataclass(frozen=True)
class _CanonicalView:
    """Dataset reordered into canonical covariate order, split by arm."""

    order: NDArray[np.intp]  # canonical position -> original unit
    x: NDArray[np.float64]
    arm_pos: tuple[NDArray[np.intp], NDArray[np.intp]]  # canonical positions per arm

    @staticmethod
    def build(ds: Dataset) -> "_CanonicalView":
        order = canonical_order(ds)
        x = ds.covariates[order]
        d_c = ds.treatment[order]
        return _CanonicalView(
            order=order,
            x=x,
            arm_pos=(np.nonzero(d_c == 0)[0], np.nonzero(d_c == 1)[0]),
        )

    def units(self, arm: int) -> NDArray[np.intp]:
        """Original unit ids of the given arm, in canonical order."""
        return self.order[self.arm_pos[arm]]


def _assemble_dense(
    ds: Dataset,
    view: _CanonicalView,
    blocks: dict[int, NDArray[np.float64]],
    fallback: NDArray[np.bool_],
) -> SmoothingMatrix:
    """Scatter per-arm canonical weight blocks back to original unit ids.

    ``blocks[arm]`` is the dense (queries-in-arm x opposite-arm) weight
    block in canonical order. Row and column sums are accumulated in
    canonical order for exact relabeling invariance.
    """
    n = ds.n
    row_sum = np.zeros(n)
    col_sum = np.zeros(n)
    abs_sum = np.zeros(n)
    rows_all, cols_all, vals_all = [], [], []
    for arm in (0, 1):
        w = blocks[arm]
        q_units = view.units(arm)
        o_units = view.units(1 - arm)
        rows_all.append(np.repeat(q_units, o_units.size))
        cols_all.append(np.tile(o_units, q_units.size))
        vals_all.append(w.ravel())
        row_sum[q_units] = w.sum(axis=1)
        col_sum[o_units] = w.sum(axis=0)
        abs_sum[q_units] = np.abs(w).sum(axis=1)
    matrix = sp.csr_matrix(
        (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
        shape=(n, n),
    )
    return SmoothingMatrix(
        n_units=n,
        matrix=matrix,
        row_sum=row_sum,
        col_sum=col_sum,
        fallback_flags=fallback,
        row_abs_sum=abs_sum,
    )


def _pairwise_scaled_kernel(
    xq: NDArray[np.float64],
    xo: NDArray[np.float64],
    bw: BandwidthMatrix,
    kernel: KernelSpec,
) -> NDArray[np.float64]:
    """Kernel values k_H(xq[a] - xo[b]) as an (nq, no) array, chunked on queries."""
    nq, d = xq.shape
    no = xo.shape[0]
    if kernel.family == "gaussian":
        zq = xq @ bw.inv_sqrt.T
        zo = xo @ bw.inv_sqrt.T
        sq = np.einsum("ik,ik->i", zq, zq)
        so = np.einsum("ik,ik->i", zo, zo)
        dist2 = np.clip(sq[:, None] + so[None, :] - 2.0 * (zq @ zo.T), 0.0, None)
        return bw.det_factor * (2.0 * np.pi) ** (-0.5 * d) * np.exp(-0.5 * dist2)
    out = np.empty((nq, no))
    step = max(1, int(2e7 // max(1, no * d)))
    for start in range(0, nq, step):
        stop = min(nq, start + step)
        diffs = xq[start:stop, None, :] - xo[None, :, :]
        out[start:stop] = scaled_kernel(diffs, bw, kernel)
    return out


def _euclidean_distances(xq: NDArray[np.float64], xo: NDArray[np.float64]) -> NDArray[np.float64]:
    sq = np.einsum("ik,ik->i", xq, xq)
    so = np.einsum("ik,ik->i", xo, xo)
    return np.sqrt(np.clip(sq[:, None] + so[None, :] - 2.0 * (xq @ xo.T), 0.0, None))


class Smoother(BaseEstimator):
    """Base class for cross-arm weight builders.

    Subclasses implement :meth:`weights` as a pure function of the dataset's
    covariates and treatment indicators. Perturbing outcomes never changes
    the result.
    """

    name: str = "smoother"

    def weights(self, ds: Dataset) -> SmoothingMatrix:
        raise NotImplementedError

    def crossfit_col_sums(
        self,
        ds: Dataset,
        in_fold: NDArray[np.intp],
        out_fold: NDArray[np.intp],
    ) -> NDArray[np.float64]:
        """Column sums ``sum_j w[j <- i]`` for each held-out unit i.

        For unit i in ``in_fold``, weights are those of the dataset made of
        unit i together with all ``out_fold`` units, and j ranges over the
        out-of-fold opposite arm. Returned in the order of ``in_fold``.
        """
        raise NotImplementedError

    def descriptor(self) -> dict:
        out = {"type": self.name}
        out.update(self.get_params())
        return out


class KernelMatching(Smoother):
    """Locally constant matching weights from a scaled kernel density.

    Parameters
    ----------
    bandwidth : float, sequence, matrix, or None
        Smoothing length h, per-axis lengths, or a full symmetric
        positive-definite matrix. None selects ``scale * n**(-1/(d+4))``.
    scale : float
        Multiplier for the default bandwidth rule.
    family : str
        Kernel family; see :class:`impute_ate.kernels.KernelSpec`.
    """

    name = "kernel"

    def __init__(self, bandwidth=None, scale: float = 1.0, family: str = "gaussian"):
        self.bandwidth = bandwidth
        self.scale = scale
        self.family = family

    def _resolve(self, ds: Dataset) -> tuple[BandwidthMatrix, KernelSpec]:
        kernel = KernelSpec(self.family)
        if self.bandwidth is None:
            bw = BandwidthMatrix.isotropic(default_bandwidth(ds.n, ds.d, self.scale), ds.d)
        else:
            bw = BandwidthMatrix.from_spec(self.bandwidth, ds.d)
        return bw, kernel

    def weights(self, ds: Dataset) -> SmoothingMatrix:
        bw, kernel = self._resolve(ds)
        view = _CanonicalView.build(ds)
        blocks = {}
        base = None
        for arm in (0, 1):
            if base is None:
                xq = view.x[view.arm_pos[arm]]
                xo = view.x[view.arm_pos[1 - arm]]
                kmat = _pairwise_scaled_kernel(xq, xo, bw, kernel)
                base = kmat
            else:
                kmat = base.T.copy()  # symmetric kernel: k(x) = k(-x)
            denom = kmat.sum(axis=1)
            starved = np.nonzero(denom <= 0.0)[0]
            if starved.size:
                unit = int(view.units(arm)[starved[0]])
                raise SmootherError(
                    f"unit {unit + 1} has no opposite-arm mass under the "
                    f"{kernel.family} kernel; increase the bandwidth"
                )
            blocks[arm] = kmat / denom[:, None]
        return _assemble_dense(ds, view, blocks, np.zeros(ds.n, dtype=bool))

    def crossfit_col_sums(self, ds, in_fold, out_fold):
        bw, kernel = self._resolve(ds)
        x = ds.covariates
        d_all = ds.treatment
        col = np.zeros(in_fold.size)
        for arm in (0, 1):
            held = in_fold[d_all[in_fold] == arm]
            if held.size == 0:
                continue
            queries = out_fold[d_all[out_fold] == 1 - arm]
            pool = out_fold[d_all[out_fold] == arm]
            if queries.size == 0:
                continue
            base = (
                _pairwise_scaled_kernel(x[queries], x[pool], bw, kernel).sum(axis=1)
                if pool.size
                else np.zeros(queries.size)
            )
            kmat = _pairwise_scaled_kernel(x[held], x[queries], bw, kernel)
            denom = base[None, :] + kmat
            dead = np.nonzero((denom <= 0.0).any(axis=0))[0]
            if dead.size:
                raise SmootherError(
                    f"unit {int(queries[dead[0]]) + 1} has no opposite-arm mass in its "
                    f"cross-fit fold under the {kernel.family} kernel; increase the bandwidth"
                )
            col[np.searchsorted(in_fold, held)] = (kmat / denom).sum(axis=1)
        return col


class WnnMatching(Smoother):
    """Weighted nearest-neighbor matching over the opposite arm.

    Parameters
    ----------
    n_neighbors : int or None
        Number of neighbors M. Required unless ``gamma`` is given.
    gamma : sequence or None
        Nonnegative neighbor weights summing to one, nearest first.
        None means uniform weights 1/M.

    Notes
    -----
    Equidistant neighbors are ordered by canonical covariate order (which
    coincides with feed order for identical points); exact ties have measure
    zero for continuous covariates.
    """

    name = "wnn"

    def __init__(self, n_neighbors: Optional[int] = None, gamma=None):
        self.n_neighbors = n_neighbors
        self.gamma = gamma

    def resolve_gamma(self) -> NDArray[np.float64]:
        if self.gamma is not None:
            g = np.asarray(self.gamma, dtype=np.float64)
            if g.ndim != 1 or g.size == 0:
                raise SmootherError("gamma must be a nonempty vector")
            if (g < 0).any():
                raise SmootherError("gamma entries must be nonnegative")
            if abs(math.fsum(g.tolist()) - 1.0) > 1e-12:
                raise SmootherError("gamma must sum to 1")
            if self.n_neighbors is not None and self.n_neighbors != g.size:
                raise SmootherError("n_neighbors disagrees with len(gamma)")
            return g
        if self.n_neighbors is None:
            raise SmootherError("need n_neighbors or gamma")
        if self.n_neighbors < 1:
            raise SmootherError("n_neighbors must be positive")
        return np.full(self.n_neighbors, 1.0 / self.n_neighbors)

    def weights(self, ds: Dataset) -> SmoothingMatrix:
        gamma = self.resolve_gamma()
        m = gamma.size
        if m > min(ds.n_treated, ds.n_control):
            raise SmootherError(
                f"M={m} exceeds the smaller arm size {min(ds.n_treated, ds.n_control)}"
            )
        view = _CanonicalView.build(ds)
        n = ds.n
        row_total = math.fsum(gamma.tolist())
        row_sum = np.full(n, row_total)
        col_sum = np.zeros(n)
        rows_all, cols_all, vals_all = [], [], []
        for arm in (0, 1):
            xq = view.x[view.arm_pos[arm]]
            xo = view.x[view.arm_pos[1 - arm]]
            dist = _euclidean_distances(xq, xo)
            nq, no = dist.shape
            if m < no:
                part = np.argpartition(dist, m - 1, axis=1)[:, :m]
            else:
                part = np.broadcast_to(np.arange(no), (nq, no)).copy()
            dpart = np.take_along_axis(dist, part, axis=1)
            order = np.lexsort((part, dpart), axis=-1)
            neigh = np.take_along_axis(part, order, axis=1)
            q_units = view.units(arm)
            o_units = view.units(1 - arm)
            rows_all.append(np.repeat(q_units, m))
            cols_all.append(o_units[neigh].ravel())
            vals_all.append(np.tile(gamma, nq))
            # accumulate column sums in canonical query order so the result
            # does not depend on how the input rows were labeled
            col_sum[o_units] = np.bincount(
                neigh.ravel(), weights=np.tile(gamma, nq), minlength=no
            )
        matrix = sp.csr_matrix(
            (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(n, n),
        )
        return SmoothingMatrix(
            n_units=n,
            matrix=matrix,
            row_sum=row_sum,
            col_sum=col_sum,
            fallback_flags=np.zeros(n, dtype=bool),
            row_abs_sum=row_sum.copy(),
        )

    def crossfit_col_sums(self, ds, in_fold, out_fold):
        gamma = self.resolve_gamma()
        m = gamma.size
        x = ds.covariates
        d_all = ds.treatment
        col = np.zeros(in_fold.size)
        for arm in (0, 1):
            held = in_fold[d_all[in_fold] == arm]
            if held.size == 0:
                continue
            queries = out_fold[d_all[out_fold] == 1 - arm]
            pool = out_fold[d_all[out_fold] == arm]
            if m > pool.size + 1:
                raise SmootherError(
                    f"M={m} exceeds the cross-fit opposite arm size {pool.size + 1}"
                )
            if queries.size == 0:
                continue
            pool_dist = np.sort(_euclidean_distances(x[queries], x[pool]), axis=1)
            held_dist = _euclidean_distances(x[held], x[queries])
            ranks = np.empty_like(held_dist, dtype=np.intp)
            for a in range(queries.size):
                ranks[:, a] = np.searchsorted(pool_dist[a], held_dist[:, a], side="left")
            contrib = np.where(ranks < m, gamma[np.minimum(ranks, m - 1)], 0.0)
            col[np.searchsorted(in_fold, held)] = contrib.sum(axis=1)
        return col


class LocalLinearMatching(Smoother):
    """Local linear matching weights from a kernel-weighted least squares fit.

    For each unit, a weighted linear fit over the opposite arm is solved in
    closed form; the imputation weights are the fit's evaluation functional,
    so rows sum to one but individual weights may be negative. Near-singular
    systems get a tiny ridge; if the kernel support holds fewer than d+1
    points the unit falls back to locally constant weights and is flagged.
    """

    name = "local-linear"

    def __init__(self, bandwidth=None, scale: float = 1.0, family: str = "gaussian"):
        self.bandwidth = bandwidth
        self.scale = scale
        self.family = family

    _RIDGE = 1e-10

    def _resolve(self, ds: Dataset) -> tuple[BandwidthMatrix, KernelSpec]:
        kernel = KernelSpec(self.family)
        if self.bandwidth is None:
            bw = BandwidthMatrix.isotropic(default_bandwidth(ds.n, ds.d, self.scale), ds.d)
        else:
            bw = BandwidthMatrix.from_spec(self.bandwidth, ds.d)
        return bw, kernel

    def weights(self, ds: Dataset) -> SmoothingMatrix:
        bw, kernel = self._resolve(ds)
        d = ds.d
        if min(ds.n_treated, ds.n_control) < d + 1:
            raise SmootherError(f"local linear matching needs at least {d + 1} units per arm")
        view = _CanonicalView.build(ds)
        fallback = np.zeros(ds.n, dtype=bool)
        blocks = {}
        for arm in (0, 1):
            xq = view.x[view.arm_pos[arm]]
            xo = view.x[view.arm_pos[1 - arm]]
            q_units = view.units(arm)
            w = np.empty((xq.shape[0], xo.shape[0]))
            step = max(1, int(2e7 // max(1, xo.shape[0] * d)))
            for start in range(0, xq.shape[0], step):
                stop = min(xq.shape[0], start + step)
                w[start:stop] = self._solve_block(
                    xq[start:stop], xo, bw, kernel, q_units[start:stop], fallback
                )
            blocks[arm] = w
        return _assemble_dense(ds, view, blocks, fallback)

    def _solve_block(self, xq, xo, bw, kernel, q_units, fallback):
        d = xo.shape[1]
        diffs = xo[None, :, :] - xq[:, None, :]  # (nq, no, d)
        kv = scaled_kernel(diffs, bw, kernel)  # (nq, no)
        denom = kv.sum(axis=1)
        starved = np.nonzero(denom <= 0.0)[0]
        if starved.size:
            unit = int(q_units[starved[0]])
            raise SmootherError(
                f"unit {unit + 1} has no opposite-arm mass under the "
                f"{kernel.family} kernel; increase the bandwidth"
            )
        s1 = np.einsum("ab,abk->ak", kv, diffs)
        s2 = np.einsum("ab,abk,abl->akl", kv, diffs, diffs)
        nq = xq.shape[0]
        a_mat = np.empty((nq, d + 1, d + 1))
        a_mat[:, 0, 0] = denom
        a_mat[:, 0, 1:] = s1
        a_mat[:, 1:, 0] = s1
        a_mat[:, 1:, 1:] = s2
        trace = denom + np.einsum("akk->a", s2)
        lam = self._RIDGE * trace / (d + 1)
        a_mat[:, np.arange(d + 1), np.arange(d + 1)] += lam[:, None]
        e1 = np.zeros((nq, d + 1, 1))
        e1[:, 0, 0] = 1.0
        try:
            z = np.linalg.solve(a_mat, e1)[..., 0]
        except np.linalg.LinAlgError:
            z = np.full((nq, d + 1), np.nan)
        w = kv * (z[:, :1] + np.einsum("ak,abk->ab", z[:, 1:], diffs))
        support = (kv > 0.0).sum(axis=1)
        bad = support < d + 1
        if bad.any():
            w[bad] = kv[bad] / denom[bad, None]
            fallback[q_units[bad]] = True
        broken = ~np.isfinite(w).all(axis=1) & ~bad
        if broken.any():
            unit = int(q_units[np.nonzero(broken)[0][0]])
            raise SmootherError(
                f"local linear system for unit {unit + 1} is singular even after ridge"
            )
        return w

    def crossfit_col_sums(self, ds, in_fold, out_fold):
        bw, kernel = self._resolve(ds)
        if kernel.compact_support:
            raise SmootherError(
                "cross-fit local linear matching requires the gaussian kernel "
                "(compact supports can starve held-out units)"
            )
        d = ds.d
        x = ds.covariates
        d_all = ds.treatment
        col = np.zeros(in_fold.size)
        for arm in (0, 1):
            held = in_fold[d_all[in_fold] == arm]
            if held.size == 0:
                continue
            queries = out_fold[d_all[out_fold] == 1 - arm]
            pool = out_fold[d_all[out_fold] == arm]
            if pool.size + 1 < d + 1 or queries.size == 0:
                raise SmootherError("cross-fit fold too small for local linear matching")
            # per-query normal matrix over the out-of-fold pool, eigendecomposed
            # so the held-out unit's rank-one update and its ridge can be applied
            # in closed form
            diffs = x[pool][None, :, :] - x[queries][:, None, :]  # (nq, np, d)
            kv = scaled_kernel(diffs, bw, kernel)
            a_mat = np.empty((queries.size, d + 1, d + 1))
            a_mat[:, 0, 0] = kv.sum(axis=1)
            s1 = np.einsum("ab,abk->ak", kv, diffs)
            a_mat[:, 0, 1:] = s1
            a_mat[:, 1:, 0] = s1
            a_mat[:, 1:, 1:] = np.einsum("ab,abk,abl->akl", kv, diffs, diffs)
            trace = np.einsum("akk->a", a_mat)
            evals, evecs = np.linalg.eigh(a_mat)
            u = evecs[:, 0, :]  # Q^T e1 per query
            hdiffs = x[held][:, None, :] - x[queries][None, :, :]  # (nh, nq, d)
            kh = scaled_kernel(hdiffs, bw, kernel)
            b = np.concatenate([np.ones(hdiffs.shape[:2] + (1,)), hdiffs], axis=2)
            v = np.einsum("qrk,hqr->hqk", evecs, b)
            lam = (
                self._RIDGE
                * (trace[None, :] + kh * (1.0 + np.einsum("hqk,hqk->hq", hdiffs, hdiffs)))
                / (d + 1)
            )
            dd = evals[None, :, :] + lam[:, :, None]
            e1ab = np.einsum("qk,hqk->hq", u, v / dd)
            bab = np.einsum("hqk,hqk->hq", v, v / dd)
            w = kh * e1ab / (1.0 + kh * bab)
            col[np.searchsorted(in_fold, held)] = w.sum(axis=1)
        return col


SMOOTHER_TYPES = {
    "kernel": KernelMatching,
    "wnn": WnnMatching,
    "local-linear": LocalLinearMatching,
}
