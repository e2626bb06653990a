"""Honest subsampled regression forests and their matching weights.

Trees are grown from covariates and a seeded RNG only; outcomes never enter
split selection, so rebuilding after perturbing outcomes reproduces the
structure bit for bit. Growth enforces three constraints by construction:

* every split keeps at least a ``split_balance`` fraction of its node's
  points on each side;
* terminal leaves hold between ``min_leaf`` and
  ``floor(min_leaf / split_balance)`` points;
* along every root-to-leaf path, each axis receives at least an
  ``axis_balance / d`` share of the splits (up to one split of rounding),
  via a deadline schedule on the axis choices that is independent of the
  data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray

from .data import Dataset, canonical_order
from .smoothers import Smoother, SmootherError, SmoothingMatrix


class ForestBuildError(ValueError):
    """Raised when a tree cannot satisfy its size and balance constraints."""


@dataclass(frozen=True)
class ForestConfig:
    """Growth parameters for an honest subsampled forest.

    Attributes
    ----------
    n_trees : int
        Number of trees B.
    subsample_size : int
        Points drawn without replacement per tree.
    min_leaf : int
        Smallest admissible terminal leaf.
    split_balance : float in (0, 0.5]
        Minimum fraction of a node's points kept on each side of a split.
    axis_balance : float in (0, 1)
        Lower bound, relative to 1/d, on each axis's share of path splits.
    seed : int
        Base RNG seed; tree b of arm a draws from an independent stream.
    """

    n_trees: int
    subsample_size: int
    min_leaf: int = 8
    split_balance: float = 0.25
    axis_balance: float = 0.9
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_trees < 1:
            raise ForestBuildError("n_trees must be positive")
        if self.min_leaf < 1:
            raise ForestBuildError("min_leaf must be positive")
        if self.subsample_size < self.min_leaf:
            raise ForestBuildError(
                f"subsample_size={self.subsample_size} is below min_leaf={self.min_leaf}"
            )
        if not 0.0 < self.split_balance <= 0.5:
            raise ForestBuildError("split_balance must lie in (0, 0.5]")
        if not 0.0 < self.axis_balance < 1.0:
            raise ForestBuildError("axis_balance must lie in (0, 1)")

    @property
    def max_leaf(self) -> int:
        return int(self.min_leaf / self.split_balance)

    @staticmethod
    def resolve(
        ds: Dataset,
        n_trees: Optional[int] = None,
        subsample_size: Optional[int] = None,
        min_leaf: int = 8,
        split_balance: float = 0.25,
        axis_balance: float = 0.9,
        seed: int = 0,
    ) -> "ForestConfig":
        """Fill defaults: B = n and s = ceil(2 sqrt(n)) capped at the arm sizes."""
        arm_cap = min(ds.n_treated, ds.n_control)
        if subsample_size is None:
            subsample_size = min(int(math.ceil(2.0 * math.sqrt(ds.n))), arm_cap)
        if subsample_size > arm_cap:
            raise ForestBuildError(
                f"subsample_size={subsample_size} exceeds the smaller arm size {arm_cap}"
            )
        if n_trees is None:
            n_trees = ds.n
        return ForestConfig(
            n_trees=n_trees,
            subsample_size=subsample_size,
            min_leaf=min_leaf,
            split_balance=split_balance,
            axis_balance=axis_balance,
            seed=seed,
        )


@dataclass
class HonestTree:
    """One grown tree, stored as flat node arrays.

    ``feature[k] == -1`` marks node k as a leaf. ``member_units`` holds the
    original unit ids of the subsample; ``member_leaf`` maps each of them to
    its terminal node.
    """

    feature: NDArray[np.int32]
    threshold: NDArray[np.float64]
    left: NDArray[np.int32]
    right: NDArray[np.int32]
    node_size: NDArray[np.int32]
    member_units: NDArray[np.intp]
    member_leaf: NDArray[np.int32]

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def leaf_ids(self) -> NDArray[np.intp]:
        return np.nonzero(self.feature < 0)[0]

    def query(self, x: NDArray[np.float64]) -> NDArray[np.int32]:
        """Terminal node id for each query row (vectorized descent)."""
        x = np.atleast_2d(x)
        idx = np.zeros(x.shape[0], dtype=np.int32)
        rows = np.arange(x.shape[0])
        while True:
            feat = self.feature[idx]
            active = feat >= 0
            if not active.any():
                return idx
            sel = rows[active]
            node = idx[sel]
            go_left = x[sel, feat[active]] <= self.threshold[node]
            idx[sel] = np.where(go_left, self.left[node], self.right[node])


@dataclass
class Forest:
    """Honest trees grown over one arm's units."""

    arm: int
    config: ForestConfig
    trees: list[HonestTree]
    n_data: int

    @property
    def n_trees(self) -> int:
        return len(self.trees)


def _axis_deadlines(counts: NDArray[np.int64], d: int, phi: float) -> NDArray[np.int64]:
    # last step by which each axis must be split again to keep its share
    # of path splits at or above phi/d - 1/depth
    return np.floor((counts + 1) * d / phi + 1e-9).astype(np.int64) + 1


def _schedule_safe_axes(counts: NDArray[np.int64], depth: int, phi: float) -> list[int]:
    """Axes whose selection now leaves every future share constraint servable."""
    d = counts.size
    ahead = np.arange(1, d + 1) + depth + 1
    safe = []
    for c in range(d):
        counts[c] += 1
        deadlines = np.sort(_axis_deadlines(counts, d, phi))
        counts[c] -= 1
        if np.all(deadlines >= ahead):
            safe.append(c)
    return safe


def _grow_tree(
    xs: NDArray[np.float64],
    member_units: NDArray[np.intp],
    cfg: ForestConfig,
    rng: np.random.Generator,
) -> HonestTree:
    s, d = xs.shape
    alpha, theta, phi = cfg.split_balance, cfg.min_leaf, cfg.axis_balance
    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    node_size: list[int] = []
    member_leaf = np.full(s, -1, dtype=np.int32)

    def new_node(size: int) -> int:
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        node_size.append(size)
        return len(feature) - 1

    root = new_node(s)
    stack = [(root, np.arange(s), np.zeros(d, dtype=np.int64), 0)]
    while stack:
        node, idx, counts, depth = stack.pop()
        m = idx.size
        lmin = max(int(math.ceil(alpha * m - 1e-9)), theta)
        if 2 * lmin > m:
            if m > cfg.max_leaf:
                raise ForestBuildError(
                    f"node of {m} points admits no balanced split with both sides "
                    f">= {lmin} yet exceeds the leaf cap {cfg.max_leaf}; "
                    f"adjust subsample_size, min_leaf, or split_balance"
                )
            member_leaf[idx] = node
            continue
        safe = _schedule_safe_axes(counts, depth, phi)
        if not safe:  # unreachable for valid configs; keep the tree well formed
            safe = [int(np.argmin(_axis_deadlines(counts, d, phi)))]
        axis = safe[int(rng.integers(len(safe)))]
        coords = xs[idx, axis]
        order = np.argsort(coords, kind="stable")
        svals = coords[order]
        cands = np.arange(lmin, m - lmin + 1)
        cands = cands[np.argsort(np.abs(cands - m / 2.0), kind="stable")]
        cut = -1
        for pos in cands:
            if svals[pos - 1] < svals[pos]:
                cut = int(pos)
                break
        if cut < 0:
            # scheduled axis is constant across every admissible position
            # (tied covariates); stop here rather than consult the data for
            # a different axis
            member_leaf[idx] = node
            continue
        feature[node] = axis
        threshold[node] = 0.5 * (svals[cut - 1] + svals[cut])
        lchild = new_node(cut)
        rchild = new_node(m - cut)
        left[node] = lchild
        right[node] = rchild
        child_counts = counts.copy()
        child_counts[axis] += 1
        stack.append((rchild, idx[order[cut:]], child_counts, depth + 1))
        stack.append((lchild, idx[order[:cut]], child_counts.copy(), depth + 1))
    return HonestTree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        node_size=np.asarray(node_size, dtype=np.int32),
        member_units=member_units,
        member_leaf=member_leaf,
    )


def build_forest(
    ds: Dataset,
    arm: int,
    cfg: ForestConfig,
    seed_seq: Optional[np.random.SeedSequence] = None,
) -> Forest:
    """Grow ``cfg.n_trees`` honest trees over the units of the given arm.

    Subsampling and growth depend on covariates, the arm indicator, and the
    seed only. Units are handled in canonical covariate order, so relabeling
    the input rows reproduces the same forest on the same points.
    """
    if arm not in (0, 1):
        raise ForestBuildError("arm must be 0 or 1")
    order = canonical_order(ds)
    arm_pos = order[ds.treatment[order] == arm]
    if cfg.subsample_size > arm_pos.size:
        raise ForestBuildError(
            f"subsample_size={cfg.subsample_size} exceeds arm {arm} size {arm_pos.size}"
        )
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(cfg.seed, spawn_key=(arm,))
    children = seed_seq.spawn(cfg.n_trees)
    x_arm = ds.covariates[arm_pos]
    trees = []
    for b in range(cfg.n_trees):
        rng = np.random.default_rng(children[b])
        picks = np.sort(rng.choice(arm_pos.size, size=cfg.subsample_size, replace=False))
        trees.append(_grow_tree(x_arm[picks], arm_pos[picks], cfg, rng))
    return Forest(arm=arm, config=cfg, trees=trees, n_data=ds.n)


class ForestSmoothingMatrix:
    """Forest matching weights in operator form.

    Presents the same surface as :class:`impute_ate.smoothers.SmoothingMatrix`
    but defers materializing individual entries: each unit's row is the
    average over trees of the uniform weights on the opposite-arm leaf that
    contains it. Row sums are exactly 1 by construction.
    """

    def __init__(self, f_control: Forest, f_treated: Forest, ds: Dataset):
        if f_control.arm != 0 or f_treated.arm != 1:
            raise SmootherError("forest_weights expects (control forest, treated forest)")
        if f_control.n_data != ds.n or f_treated.n_data != ds.n:
            raise SmootherError("forests were not built from this dataset")
        self.n_units = ds.n
        order = canonical_order(ds)
        d_c = ds.treatment[order]
        self._queries = {
            # units of arm a query the opposite arm's forest, canonical order
            0: order[d_c == 1],
            1: order[d_c == 0],
        }
        self._forests = {0: f_control, 1: f_treated}
        self._qleaf = {0: [], 1: []}
        for arm in (0, 1):
            xq = ds.covariates[self._queries[arm]]
            empty = 0
            for tree in self._forests[arm].trees:
                leaf = tree.query(xq)
                if np.any(tree.node_size[leaf] <= 0):
                    empty += 1
                self._qleaf[arm].append(leaf)
            assert empty == 0, "query landed in an empty leaf; tree construction bug"
        self.fallback_flags = np.zeros(ds.n, dtype=bool)
        self.col_sum = self._column_sums()
        self.row_sum = self.apply(np.ones(ds.n))
        self.row_abs_sum = self.row_sum.copy()
        self._csr: Optional[sp.csr_matrix] = None

    def _column_sums(self) -> NDArray[np.float64]:
        col = np.zeros(self.n_units)
        for arm in (0, 1):
            forest = self._forests[arm]
            inv_b = 1.0 / forest.n_trees
            for tree, leaf in zip(forest.trees, self._qleaf[arm]):
                hits = np.bincount(leaf, minlength=tree.n_nodes).astype(np.float64)
                ratio = hits[tree.member_leaf] / tree.node_size[tree.member_leaf]
                np.add.at(col, tree.member_units, inv_b * ratio)
        return col

    def apply(self, values: NDArray[np.float64]) -> NDArray[np.float64]:
        """Smoothed vector ``sum_j w[i <- j] v[j]`` per unit."""
        values = np.asarray(values, dtype=np.float64)
        out = np.zeros(self.n_units)
        for arm in (0, 1):
            forest = self._forests[arm]
            acc = np.zeros(self._queries[arm].size)
            for tree, leaf in zip(forest.trees, self._qleaf[arm]):
                sums = np.bincount(
                    tree.member_leaf, weights=values[tree.member_units], minlength=tree.n_nodes
                )
                acc += sums[leaf] / tree.node_size[leaf]
            out[self._queries[arm]] = acc / forest.n_trees
        return out

    def to_csr(self, max_entries: int = 50_000_000) -> sp.csr_matrix:
        """Materialize the weight matrix; intended for desk-scale diagnostics."""
        if self._csr is not None:
            return self._csr
        rows_all, cols_all, vals_all = [], [], []
        total = 0
        for arm in (0, 1):
            forest = self._forests[arm]
            q_units = self._queries[arm]
            inv_b = 1.0 / forest.n_trees
            for tree, leaf in zip(forest.trees, self._qleaf[arm]):
                member_order = np.argsort(tree.member_leaf, kind="stable")
                sorted_leaf = tree.member_leaf[member_order]
                starts = np.searchsorted(sorted_leaf, np.arange(tree.n_nodes))
                ends = np.searchsorted(sorted_leaf, np.arange(tree.n_nodes), side="right")
                sizes = (ends - starts)[leaf]
                total += int(sizes.sum())
                if total > max_entries:
                    raise SmootherError(
                        "materializing forest weights would exceed the entry cap; "
                        "use the operator interface instead"
                    )
                rows = np.repeat(q_units, sizes)
                gather = np.concatenate(
                    [member_order[starts[lf] : ends[lf]] for lf in leaf]
                ) if leaf.size else np.empty(0, dtype=np.intp)
                cols = tree.member_units[gather]
                vals = np.repeat(inv_b / tree.node_size[leaf], sizes)
                rows_all.append(rows)
                cols_all.append(cols)
                vals_all.append(vals)
        matrix = sp.csr_matrix(
            (np.concatenate(vals_all), (np.concatenate(rows_all), np.concatenate(cols_all))),
            shape=(self.n_units, self.n_units),
        )
        matrix.sum_duplicates()
        self._csr = matrix
        return matrix

    @property
    def matrix(self) -> sp.csr_matrix:
        return self.to_csr()

    def entries(self) -> tuple[NDArray[np.intp], NDArray[np.intp], NDArray[np.float64]]:
        coo = self.to_csr().tocoo()
        return coo.row.astype(np.intp), coo.col.astype(np.intp), coo.data

    def validate(self, ds: Optional[Dataset] = None, tol: float = 1e-12) -> None:
        csr = self.to_csr()
        if np.abs(csr.sum(axis=1).A1 - self.row_sum).max(initial=0.0) > tol:
            raise SmootherError("stored row sums disagree with entries")
        if np.abs(csr.sum(axis=0).A1 - self.col_sum).max(initial=0.0) > tol:
            raise SmootherError("stored column sums disagree with entries")
        if ds is not None:
            rows, cols, _ = self.entries()
            if rows.size and np.any(ds.treatment[rows] == ds.treatment[cols]):
                raise SmootherError("weight entry links units in the same arm")

    def summary(self) -> dict:
        return {
            "n_units": self.n_units,
            "nonzeros": None,
            "row_sum_min": float(self.row_sum.min()),
            "row_sum_max": float(self.row_sum.max()),
            "col_sum_min": float(self.col_sum.min()),
            "col_sum_max": float(self.col_sum.max()),
            "col_sum_mean": float(self.col_sum.mean()),
            "row_abs_sum_max": float(self.row_abs_sum.max()),
            "fallback_count": 0,
        }


def forest_weights(f_control: Forest, f_treated: Forest, ds: Dataset) -> ForestSmoothingMatrix:
    """Matching weights induced by a pair of per-arm honest forests."""
    return ForestSmoothingMatrix(f_control, f_treated, ds)


@dataclass
class LeafDiameterProfile:
    """Leaf geometry diagnostics over query points and trees."""

    tree_mean_diameter: NDArray[np.float64]
    tree_max_diameter: NDArray[np.float64]
    tree_axis_mean_diameter: NDArray[np.float64]  # (n_trees, d)
    tree_min_occupancy: NDArray[np.int64]

    @property
    def mean_diameter(self) -> float:
        return float(self.tree_mean_diameter.mean())

    @property
    def max_diameter(self) -> float:
        return float(self.tree_max_diameter.max())

    @property
    def axis_mean_diameter(self) -> NDArray[np.float64]:
        return self.tree_axis_mean_diameter.mean(axis=0)

    @property
    def mean_inverse_min_occupancy(self) -> float:
        return float(np.mean(1.0 / self.tree_min_occupancy))

    def to_dict(self) -> dict:
        return {
            "mean_diameter": self.mean_diameter,
            "max_diameter": self.max_diameter,
            "axis_mean_diameter": self.axis_mean_diameter.tolist(),
            "mean_inverse_min_occupancy": self.mean_inverse_min_occupancy,
            "tree_mean_diameter": self.tree_mean_diameter.tolist(),
            "tree_min_occupancy": self.tree_min_occupancy.tolist(),
        }


def leaf_diameter_profile(
    forest: Forest, support_sample: NDArray[np.float64], ds: Dataset
) -> LeafDiameterProfile:
    """Empirical leaf diameters at the given query points.

    Diameters are measured on the subsample points each leaf holds: the
    largest pairwise Euclidean distance, and the coordinate range per axis.
    """
    xq = np.atleast_2d(np.asarray(support_sample, dtype=np.float64))
    d = xq.shape[1]
    x_all = ds.covariates
    b = forest.n_trees
    tree_mean = np.empty(b)
    tree_max = np.empty(b)
    tree_axis = np.empty((b, d))
    tree_occ = np.empty(b, dtype=np.int64)
    for t, tree in enumerate(forest.trees):
        leaves = tree.leaf_ids()
        diam = np.zeros(tree.n_nodes)
        axis_range = np.zeros((tree.n_nodes, d))
        for lf in leaves:
            pts = x_all[tree.member_units[tree.member_leaf == lf]]
            if pts.shape[0] >= 2:
                gram = np.einsum("ik,ik->i", pts, pts)
                d2 = gram[:, None] + gram[None, :] - 2.0 * (pts @ pts.T)
                diam[lf] = math.sqrt(max(float(d2.max()), 0.0))
                axis_range[lf] = pts.max(axis=0) - pts.min(axis=0)
        qleaf = tree.query(xq)
        tree_mean[t] = diam[qleaf].mean()
        tree_max[t] = diam[qleaf].max()
        tree_axis[t] = axis_range[qleaf].mean(axis=0)
        tree_occ[t] = int(tree.node_size[leaves].min())
    return LeafDiameterProfile(
        tree_mean_diameter=tree_mean,
        tree_max_diameter=tree_max,
        tree_axis_mean_diameter=tree_axis,
        tree_min_occupancy=tree_occ,
    )


class ForestMatching(Smoother):
    """Honest-forest matching weights behind the common smoother interface.

    Parameters default to B = n trees and subsample ceil(2 sqrt(n)), capped
    at the smaller arm size.
    """

    name = "forest"

    def __init__(
        self,
        n_trees: Optional[int] = None,
        subsample_size: Optional[int] = None,
        min_leaf: int = 8,
        split_balance: float = 0.25,
        axis_balance: float = 0.9,
        seed: int = 0,
    ):
        self.n_trees = n_trees
        self.subsample_size = subsample_size
        self.min_leaf = min_leaf
        self.split_balance = split_balance
        self.axis_balance = axis_balance
        self.seed = seed

    def resolve_config(self, ds: Dataset) -> ForestConfig:
        return ForestConfig.resolve(
            ds,
            n_trees=self.n_trees,
            subsample_size=self.subsample_size,
            min_leaf=self.min_leaf,
            split_balance=self.split_balance,
            axis_balance=self.axis_balance,
            seed=self.seed,
        )

    def weights(self, ds: Dataset) -> ForestSmoothingMatrix:
        cfg = self.resolve_config(ds)
        f0 = build_forest(ds, 0, cfg)
        f1 = build_forest(ds, 1, cfg)
        return forest_weights(f0, f1, ds)

    def crossfit_col_sums(self, ds, in_fold, out_fold):
        """Held-out column sums with the unit inserted into each tree's leaf.

        Per-fold forests are grown on the out-of-fold units only; the held-out
        unit is then treated as an extra member of every tree, which adds one
        to the denominator of the leaf that contains it.
        """
        sub = Dataset(
            ds.covariates[out_fold], ds.treatment[out_fold], ds.outcome[out_fold]
        )
        try:
            cfg = self.resolve_config(sub)
        except ForestBuildError as exc:
            raise SmootherError(f"cross-fit fold too small for the forest: {exc}") from exc
        col = np.zeros(in_fold.size)
        d_all = ds.treatment
        for arm in (0, 1):
            held = in_fold[d_all[in_fold] == arm]
            if held.size == 0:
                continue
            fold_key = (104729, int(out_fold[0]), out_fold.size, arm)
            forest = build_forest(
                sub, arm, cfg, seed_seq=np.random.SeedSequence(cfg.seed, spawn_key=fold_key)
            )
            queries = out_fold[d_all[out_fold] == 1 - arm]
            xq = ds.covariates[queries]
            xh = ds.covariates[held]
            acc = np.zeros(held.size)
            for tree in forest.trees:
                qleaf = tree.query(xq)
                hits = np.bincount(qleaf, minlength=tree.n_nodes).astype(np.float64)
                hleaf = tree.query(xh)
                acc += hits[hleaf] / (tree.node_size[hleaf] + 1.0)
            col[np.searchsorted(in_fold, held)] = acc / forest.n_trees
        return col
