"""Regression-adjusted imputation estimators of the average treatment effect.

Missing potential outcomes are imputed by cross-arm linear smoothers
(kernel matching, weighted nearest neighbors, local linear matching,
honest random forests) and bias-corrected with per-arm outcome
regressions. The package provides the exact component decomposition of the
estimator, a plug-in variance, cross-fitting, and a Monte Carlo harness
for verifying double robustness and efficiency on synthetic generators.
"""

__version__ = "0.1.0"

from .api import ImputationAte
from .data import (
    ArmIndex,
    DataError,
    Dataset,
    Permutation,
    canonical_order,
    check_arrays,
    load_dataset,
    permute,
)
from .estimation import (
    AipwComponents,
    AteEstimate,
    ImputedOutcomes,
    InternalConsistencyError,
    aipw_decompose,
    estimate,
    estimate_ate_crossfit,
    estimate_ate_direct,
    impute,
    variance_estimate,
)
from .forest import (
    Forest,
    ForestBuildError,
    ForestConfig,
    ForestMatching,
    HonestTree,
    LeafDiameterProfile,
    build_forest,
    forest_weights,
    leaf_diameter_profile,
)
from .kernels import BandwidthMatrix, KernelSpec, default_bandwidth
from .outcome import (
    OutcomeFitError,
    OutcomeModel,
    PolynomialAdjuster,
    ZeroAdjuster,
    fit_outcome_pair,
    fit_polynomial,
    sup_error,
    zero_adjuster,
)
from .simulation import (
    DGPS,
    CovariateLaw,
    DgpSpec,
    EfficiencyBound,
    McReport,
    benchmark_dgp,
    draw_dataset,
    efficiency_bound,
    run_mc,
    tilted_dgp,
)
from .smoothers import (
    KernelMatching,
    LocalLinearMatching,
    Smoother,
    SmootherError,
    SmoothingMatrix,
    WnnMatching,
    density_ratio,
)
