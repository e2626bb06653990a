import numpy as np
import pytest

from impute_ate.data import Dataset


def make_dataset(rng, n=40, d=2, treated_frac=0.5, effect=1.0):
    """Random continuous dataset with both arms guaranteed nonempty."""
    x = rng.uniform(0.0, 1.0, (n, d))
    treatment = (rng.uniform(size=n) < treated_frac).astype(int)
    if treatment.sum() == 0:
        treatment[0] = 1
    if treatment.sum() == n:
        treatment[0] = 0
    y = x.sum(axis=1) + effect * treatment + rng.standard_normal(n)
    return Dataset(x, treatment, y)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
