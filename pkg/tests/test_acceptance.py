"""Acceptance suite.

Each test implements one numbered acceptance criterion at its stated
tolerance, prints a single PASS/FAIL line, and asserts. Monte Carlo checks
run at full scale with fixed seeds, so the suite is deterministic; expect
the whole module to take roughly half an hour.
"""

import math

import numpy as np

from impute_ate.data import Dataset, Permutation, permute
from impute_ate.estimation import (
    aipw_decompose,
    estimate,
    estimate_ate_crossfit,
    estimate_ate_direct,
    random_folds,
)
from impute_ate.forest import ForestConfig, ForestMatching, build_forest, leaf_diameter_profile
from impute_ate.kernels import scaled_kernel
from impute_ate.outcome import PolynomialAdjuster, ZeroAdjuster, fit_outcome_pair, zero_adjuster
from impute_ate.simulation import _draw_with_info, benchmark_dgp, run_mc, tilted_dgp
from impute_ate.smoothers import KernelMatching, LocalLinearMatching, WnnMatching

SEED = 20250808


def report(number, ok, detail):
    line = f"[criterion {number:02d}] {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    assert ok, line


def random_dataset(rng, n, d):
    x = rng.uniform(0.0, 1.0, (n, d))
    treatment = (rng.uniform(size=n) < 0.5).astype(int)
    treatment[:8] = [0, 1] * 4  # both arms at least 4 strong
    y = x.sum(axis=1) + treatment * (1.0 + x[:, 0]) + rng.standard_normal(n)
    return Dataset(x, treatment, y)


def four_smoothers(seed):
    return [
        KernelMatching(),
        WnnMatching(n_neighbors=3),
        LocalLinearMatching(scale=2.0),
        ForestMatching(n_trees=50, min_leaf=2, seed=seed),
    ]


class McRunner:
    def __init__(self, smoother_fn, adjuster):
        self.smoother_fn = smoother_fn
        self.adjuster = adjuster

    def estimate(self, ds):
        return estimate(ds, self.smoother_fn(ds.n), self.adjuster)


def wnn_runner(degree=1):
    return McRunner(
        lambda n: WnnMatching(n_neighbors=int(math.ceil(n ** (2 / 3)))),
        PolynomialAdjuster(degree),
    )


# ----------------------------------------------------------------------


def test_criterion_01_decomposition_identity():
    rng = np.random.default_rng(SEED)
    worst = 0.0
    for trial in range(200):
        n = int(rng.integers(10, 201))
        d = int(rng.integers(1, 4))
        ds = random_dataset(rng, n, d)
        adjusters = (zero_adjuster(), fit_outcome_pair(ds, 1))
        for smoother in four_smoothers(seed=trial):
            sm = smoother.weights(ds)
            for om in adjusters:
                est = estimate_ate_direct(ds, sm, om)
                worst = max(worst, abs(est.components.reassembled() - est.tau_hat))
    report(
        1,
        worst <= 1e-10,
        f"decomposition identity worst gap {worst:.2e} over 200 datasets x 4 smoothers x 2 adjusters",
    )


def test_criterion_02_row_sums_and_bias_term():
    rng = np.random.default_rng(SEED + 20)
    worst_exact = 0.0
    worst_ll = 0.0
    worst_bias = 0.0
    ok = True
    for trial in range(20):
        ds = random_dataset(rng, int(rng.integers(30, 120)), int(rng.integers(1, 3)))
        om = fit_outcome_pair(ds, 1)
        mu_opp_max = max(
            np.abs(om.predict(ds.covariates, 0)).max(),
            np.abs(om.predict(ds.covariates, 1)).max(),
        )
        for smoother in four_smoothers(seed=trial):
            sm = smoother.weights(ds)
            dev = np.abs(sm.row_sum - 1.0).max()
            bias = abs(aipw_decompose(ds, sm, om).unnormalized_bias)
            if smoother.name == "local-linear":
                worst_ll = max(worst_ll, dev)
                ok &= dev <= 1e-8
                # rows sum to one only up to dev, which caps the bias leak
                ok &= bias <= dev * mu_opp_max + 1e-12
            else:
                worst_exact = max(worst_exact, dev)
                worst_bias = max(worst_bias, bias)
                ok &= dev <= 1e-12 and bias <= 1e-10
    report(
        2,
        ok,
        f"row sums: exact-family dev {worst_exact:.2e} (<=1e-12), local-linear dev "
        f"{worst_ll:.2e} (<=1e-8); bias term {worst_bias:.2e} (<=1e-10)",
    )


def test_criterion_03_permutation_equivariance():
    rng = np.random.default_rng(SEED + 30)
    ds = random_dataset(rng, 40, 2)
    smoothers = [
        KernelMatching(),
        WnnMatching(n_neighbors=3),
        LocalLinearMatching(scale=2.0),
        ForestMatching(n_trees=10, subsample_size=12, min_leaf=3, seed=1),
    ]
    bases = {s.name: s.weights(ds).matrix.toarray() for s in smoothers}
    ok = True
    for _ in range(50):
        p = Permutation.random(40, rng)
        moved = permute(ds, p)
        for s in smoothers:
            w = s.weights(moved).matrix.toarray()
            ok &= np.array_equal(w, bases[s.name][np.ix_(p.mapping, p.mapping)])
    report(3, ok, "relabeled weights identical for 50 random permutations x 4 smoothers")


def test_criterion_04_local_linear_reproduces_linear_truths():
    rng = np.random.default_rng(SEED + 40)
    worst = 0.0
    for d in (1, 2):
        n = 160
        x = rng.uniform(0.0, 1.0, (n, d))
        treatment = np.r_[np.ones(n // 2, int), np.zeros(n // 2, int)]
        coef0 = np.arange(1, d + 1) * 1.5
        coef1 = -np.arange(1, d + 1) * 0.5
        y = np.where(treatment == 1, 2.0 + x @ coef1, -1.0 + x @ coef0)
        ds = Dataset(x, treatment, y)
        sm = LocalLinearMatching(scale=1.5).weights(ds)
        imputed = sm.apply(ds.outcome)
        truth = np.where(treatment == 1, -1.0 + x @ coef0, 2.0 + x @ coef1)
        worst = max(worst, np.abs(imputed - truth).max())
    report(4, worst <= 1e-8, f"noiseless linear imputation error {worst:.2e} (<=1e-8)")


def _audit_forest(forest, ds, check_shares=True):
    cfg = forest.config
    x = ds.covariates
    d = ds.d
    for tree in forest.trees:
        sizes = tree.node_size[tree.leaf_ids()]
        assert sizes.min() >= cfg.min_leaf and sizes.max() <= cfg.max_leaf

        def recurse(node, members, counts, depth):
            if tree.feature[node] < 0:
                got = np.sort(np.nonzero(tree.member_leaf == node)[0])
                assert np.array_equal(got, members)
                if check_shares and depth > 0:
                    for axis in range(d):
                        floor = cfg.axis_balance / d - 1.0 / depth
                        assert counts[axis] / depth >= floor - 1e-9
                return
            axis = tree.feature[node]
            go_left = x[tree.member_units[members], axis] <= tree.threshold[node]
            left, right = members[go_left], members[~go_left]
            m = members.size
            assert min(left.size, right.size) >= cfg.split_balance * m - 1e-9
            nxt = counts.copy()
            nxt[axis] += 1
            recurse(tree.left[node], left, nxt, depth + 1)
            recurse(tree.right[node], right, nxt, depth + 1)

        recurse(0, np.arange(tree.member_units.size), np.zeros(d, dtype=int), 0)


def test_criterion_05_forest_audits():
    rng = np.random.default_rng(SEED + 50)
    checked = 0
    for k in range(20):
        d = 1 + k % 3
        n = int(rng.integers(120, 260))
        ds = random_dataset(rng, n, d)
        arm = k % 2
        cfg = ForestConfig(
            n_trees=6,
            subsample_size=min(64, min(ds.n_treated, ds.n_control)),
            min_leaf=4,
            split_balance=0.25,
            axis_balance=0.9,
            seed=k,
        )
        forest = build_forest(ds, arm, cfg)
        _audit_forest(forest, ds)
        shifted = Dataset(ds.covariates, ds.treatment, ds.outcome * 3.0 - 5.0)
        rebuilt = build_forest(shifted, arm, cfg)
        for a, b in zip(forest.trees, rebuilt.trees):
            assert np.array_equal(a.feature, b.feature)
            assert np.array_equal(a.threshold, b.threshold, equal_nan=True)
            assert np.array_equal(a.member_units, b.member_units)
            assert np.array_equal(a.member_leaf, b.member_leaf)
        checked += len(forest.trees)
    report(
        5,
        True,
        f"leaf band, split balance, axis shares, and outcome-invariance verified on "
        f"{checked} trees across 20 seeded forests",
    )


def test_criterion_06_leaf_diameter_decay():
    rng = np.random.default_rng(SEED + 60)
    n_forests = 50
    ok = True
    details = []
    for d in (1, 2):
        arm = 1100
        x = rng.uniform(0, 1, (2 * arm, d))
        treatment = np.r_[np.ones(arm, int), np.zeros(arm, int)]
        ds = Dataset(x, treatment, rng.standard_normal(2 * arm))
        queries = rng.uniform(0, 1, (256, d))
        means = {}
        for s in (64, 256, 1024):
            vals = np.empty(n_forests)
            for f in range(n_forests):
                cfg = ForestConfig(
                    n_trees=8, subsample_size=s, min_leaf=8, seed=SEED + 100 * d + f
                )
                forest = build_forest(ds, 1, cfg)
                vals[f] = leaf_diameter_profile(forest, queries, ds).mean_diameter
            means[s] = (vals.mean(), vals.std(ddof=1) / math.sqrt(n_forests))
        for small, large in ((64, 256), (256, 1024)):
            gap = means[small][0] - means[large][0]
            se = math.hypot(means[small][1], means[large][1])
            ok &= gap > 2.0 * se
            details.append(f"d={d} s{small}->s{large}: gap={gap:.4f} (2se={2*se:.4f})")
    report(6, ok, "mean leaf diameter decreases in s; " + "; ".join(details))


def test_criterion_07_density_ratio_consistency():
    dgp = tilted_dgp()
    reps = 200
    grid = (250, 1000, 4000)
    ok = True
    details = []
    for name, factory in (
        ("kernel", lambda n: KernelMatching()),
        ("wnn", lambda n: WnnMatching(n_neighbors=int(math.ceil(n ** (2 / 3))))),
        ("forest", lambda n: ForestMatching(n_trees=max(250, n // 2), seed=0)),
    ):
        mses = []
        for n in grid:
            total = 0.0
            for r in range(reps):
                ds, _ = _draw_with_info(dgp, n, (SEED + 70, n, r))
                sm = factory(n).weights(ds)
                target = dgp.density_ratio_target(ds)
                total += float(np.mean((sm.col_sum - target) ** 2))
            mses.append(total / reps)
        ok &= mses[0] > mses[1] > mses[2]
        details.append(f"{name}: " + " > ".join(f"{m:.4f}" for m in mses))
    report(7, ok, f"column-sum MSE decreases over n={grid}; " + "; ".join(details))


def test_criterion_08_double_robustness():
    dgp = benchmark_dgp()
    ok = True
    details = []
    branches = (
        ("wrong-adjuster", McRunner(lambda n: KernelMatching(), ZeroAdjuster()), SEED + 1),
        (
            "wrong-smoother",
            McRunner(lambda n: KernelMatching(scale=10.0), PolynomialAdjuster(1)),
            SEED + 2,
        ),
    )
    for label, runner, seed in branches:
        reps = run_mc(dgp, runner, [250, 2000], 1000, seed=seed)
        bias_small, bias_big = reps[250].mean_bias, reps[2000].mean_bias
        limit = 3.0 * reps[2000].mc_se_bias
        ok &= abs(bias_big) <= limit
        ok &= abs(bias_big) < abs(bias_small)
        details.append(
            f"{label}: bias(2000)={bias_big:+.5f} (3se={limit:.5f}), bias(250)={bias_small:+.5f}"
        )
    report(8, ok, "; ".join(details))


def test_criterion_09_semiparametric_efficiency():
    dgp = benchmark_dgp()
    rep = run_mc(dgp, wnn_runner(), [2000], 1000, seed=SEED)[2000]
    ratio = rep.efficiency_ratio
    sig_rel = abs(rep.mean_sigma2 - dgp.sigma2_bound) / dgp.sigma2_bound
    cover = rep.coverage
    ok = 0.85 <= ratio <= 1.15 and sig_rel <= 0.10 and 0.93 <= cover <= 0.97
    report(
        9,
        ok,
        f"efficiency ratio {ratio:.3f} (in [0.85,1.15]), mean variance estimate off by "
        f"{100 * sig_rel:.1f}% (<=10%), coverage {cover:.3f} (in [0.93,0.97])",
    )


def _bruteforce_crossfit(ds, smoother, adjuster, folds):
    n = ds.n
    x, d, y = ds.covariates, ds.treatment, ds.outcome
    terms = np.zeros(n)
    for fold in folds:
        out = np.setdiff1d(np.arange(n), fold)
        om = adjuster.fit(ds, exclude=fold)
        for i in fold:
            queries = out[d[out] == 1 - d[i]]
            pool = out[d[out] == d[i]]
            col = 0.0
            if isinstance(smoother, KernelMatching):
                bw, kern = smoother._resolve(ds)
                for j in queries:
                    num = scaled_kernel((x[j] - x[i])[None, :], bw, kern)[0]
                    den = num + sum(
                        scaled_kernel((x[j] - x[k])[None, :], bw, kern)[0] for k in pool
                    )
                    col += num / den
            else:
                gamma = smoother.resolve_gamma()
                for j in queries:
                    ranked = sorted(
                        [(np.linalg.norm(x[j] - x[k]), k) for k in pool]
                        + [(np.linalg.norm(x[j] - x[i]), i)]
                    )
                    for pos, (_, k) in enumerate(ranked[: gamma.size]):
                        if k == i:
                            col += gamma[pos]
            reg = om.predict(x[i][None, :], 1)[0] - om.predict(x[i][None, :], 0)[0]
            resid = y[i] - om.predict(x[i][None, :], d[i])[0]
            terms[i] = reg + (2 * d[i] - 1) * (1 + col) * resid
    return math.fsum(terms.tolist()) / n


def test_criterion_10_crossfitting():
    # exactness on fixed small datasets
    rng = np.random.default_rng(SEED + 90)
    worst = 0.0
    for n_folds in (2, 5):
        ds = random_dataset(rng, 20, 1)
        for smoother in (KernelMatching(bandwidth=0.4), WnnMatching(n_neighbors=2)):
            est = estimate_ate_crossfit(
                ds, smoother, PolynomialAdjuster(1), n_folds=n_folds, seed=3
            )
            expect = _bruteforce_crossfit(
                ds, smoother, PolynomialAdjuster(1), random_folds(20, n_folds, 3)
            )
            worst = max(worst, abs(est.tau_hat - expect))
    oracle_ok = worst <= 1e-10

    # agreement with the full-sample estimator and interval calibration
    dgp = benchmark_dgp()
    tau = dgp.tau
    m = int(math.ceil(2000 ** (2 / 3)))
    reps = 500
    ok = oracle_ok
    details = [f"fold oracle gap {worst:.2e}"]
    for n_folds in (2, 5):
        diffs = np.empty(reps)
        covered = np.empty(reps, dtype=bool)
        for r in range(reps):
            ds, _ = _draw_with_info(dgp, 2000, (SEED + 12, 2000, r))
            full = estimate(ds, WnnMatching(n_neighbors=m), PolynomialAdjuster(1))
            cf = estimate_ate_crossfit(
                ds,
                WnnMatching(n_neighbors=m),
                PolynomialAdjuster(1),
                n_folds=n_folds,
                seed=SEED + r,
            )
            diffs[r] = cf.tau_hat - full.tau_hat
            covered[r] = cf.covers(tau)
        gap = abs(diffs.mean())
        limit = 3.0 * diffs.std(ddof=1) / math.sqrt(reps)
        cover = covered.mean()
        ok &= gap <= limit and 0.93 <= cover <= 0.97
        details.append(
            f"N={n_folds}: |mean diff|={gap:.5f} (3se={limit:.5f}), coverage={cover:.3f}"
        )
    report(10, ok, "; ".join(details))


def test_criterion_11_root_n_rate():
    dgp = benchmark_dgp()
    grid = [250, 500, 1000, 2000, 4000]
    reps = run_mc(dgp, wnn_runner(), grid, 500, seed=SEED + 3)
    slope = float(np.polyfit(np.log(grid), np.log([reps[n].rmse for n in grid]), 1)[0])
    ok = -0.6 <= slope <= -0.4
    rmses = ", ".join(f"{n}:{reps[n].rmse:.4f}" for n in grid)
    report(11, ok, f"log-RMSE slope {slope:.3f} (in [-0.6,-0.4]); rmse {rmses}")
