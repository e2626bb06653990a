import numpy as np
import pytest

from impute_ate.data import (
    DataError,
    Permutation,
    canonical_order,
    load_dataset,
    permute,
)

from conftest import make_dataset


def test_minimal_valid_dataset():
    ds = load_dataset([([0.2], 1, 3.0), ([0.7], 0, 1.0)])
    assert (ds.n, ds.d, ds.n_treated, ds.n_control) == (2, 1, 1, 1)


def test_empty_control_arm_rejected():
    with pytest.raises(DataError, match="empty control arm"):
        load_dataset([([0.2], 1, 3.0), ([0.4], 1, 2.0)])


def test_empty_treated_arm_rejected():
    with pytest.raises(DataError, match="empty treated arm"):
        load_dataset([([0.2], 0, 3.0), ([0.4], 0, 2.0)])


def test_dimension_mismatch_names_row():
    with pytest.raises(DataError, match="dimension mismatch at row 2"):
        load_dataset([([0.2, 0.1], 1, 3.0), ([0.7], 0, 1.0)])


def test_non_finite_rejected():
    with pytest.raises(DataError, match="non-finite covariate at row 1"):
        load_dataset([([np.nan], 1, 3.0), ([0.7], 0, 1.0)])
    with pytest.raises(DataError, match="non-finite outcome at row 2"):
        load_dataset([([0.2], 1, 3.0), ([0.7], 0, np.inf)])


def test_too_small_rejected():
    with pytest.raises(DataError, match="at least 2"):
        load_dataset([([0.2], 1, 3.0)])


def test_treatment_values_checked():
    with pytest.raises(DataError, match="treatment must be 0 or 1 at row 2"):
        load_dataset([([0.2], 1, 3.0), ([0.7], 2, 1.0)])


def test_dataset_is_immutable():
    ds = load_dataset([([0.2], 1, 3.0), ([0.7], 0, 1.0)])
    with pytest.raises(ValueError):
        ds.covariates[0, 0] = 9.0
    with pytest.raises(ValueError):
        ds.outcome[0] = 9.0


def test_arm_index_partitions_units(rng):
    ds = make_dataset(rng, n=25)
    idx = ds.arm_index()
    merged = np.sort(np.r_[idx.treated, idx.control])
    assert np.array_equal(merged, np.arange(25))
    assert idx.treated.size == ds.n_treated
    assert np.all(ds.treatment[idx.treated] == 1)


def test_permutation_must_be_bijective():
    with pytest.raises(DataError, match="bijection"):
        Permutation(np.array([0, 0, 2]))


def test_permute_identity():
    ds = load_dataset([([0.2], 1, 3.0), ([0.7], 0, 1.0)])
    out = permute(ds, Permutation.identity(2))
    assert np.array_equal(out.covariates, ds.covariates)
    assert np.array_equal(out.outcome, ds.outcome)


def test_permute_swap():
    ds = load_dataset([([0.2], 1, 3.0), ([0.7], 0, 1.0)])
    out = permute(ds, Permutation(np.array([1, 0])))
    assert out.covariates[0, 0] == 0.7
    assert out.outcome[0] == 1.0
    assert out.treatment.tolist() == [0, 1]


def test_permute_then_inverse_round_trips(rng):
    ds = make_dataset(rng, n=10, d=2)
    p = Permutation.random(10, rng)
    back = permute(permute(ds, p), p.inverse())
    assert np.array_equal(back.covariates, ds.covariates)
    assert np.array_equal(back.treatment, ds.treatment)
    assert np.array_equal(back.outcome, ds.outcome)


def test_permute_preserves_row_multiset(rng):
    ds = make_dataset(rng, n=15, d=3)
    p = Permutation.random(15, rng)
    out = permute(ds, p)
    assert (out.n, out.d, out.n_treated, out.n_control) == (
        ds.n,
        ds.d,
        ds.n_treated,
        ds.n_control,
    )
    assert sorted(map(tuple, ds.rows())) == sorted(map(tuple, out.rows()))


def test_canonical_order_is_relabeling_invariant(rng):
    ds = make_dataset(rng, n=20, d=2)
    p = Permutation.random(20, rng)
    dsp = permute(ds, p)
    a = ds.covariates[canonical_order(ds)]
    b = dsp.covariates[canonical_order(dsp)]
    assert np.array_equal(a, b)
