"""Synthetic data generators and the Monte Carlo harness.

Each generator knows its own truth: the treatment effect, the propensity,
the per-arm means and noise scales, and the variance bound that an
efficient estimator's asymptotic variance should attain. Experiments that
misspecify a nuisance are plain configuration (a zero adjuster, an
oversized bandwidth), never separate code paths.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import integrate
from scipy.special import ndtr, ndtri
from scipy.stats import qmc

from .data import Dataset


class IntegrationError(RuntimeError):
    """Quadrature failed to reach the requested relative tolerance."""


class SimulationError(RuntimeError):
    """A replication could not produce a usable dataset."""


@dataclass(frozen=True)
class CovariateLaw:
    """Covariate distribution on a compact box support.

    kind "uniform" is uniform on [low, high]^d (per-axis bounds); kind
    "truncated-gaussian" is an independent gaussian per axis truncated to
    the box.
    """

    kind: str
    low: NDArray[np.float64]
    high: NDArray[np.float64]
    mean: Optional[NDArray[np.float64]] = None
    sd: Optional[NDArray[np.float64]] = None

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "truncated-gaussian"):
            raise ValueError("covariate law must be 'uniform' or 'truncated-gaussian'")
        low = np.atleast_1d(np.asarray(self.low, dtype=np.float64))
        high = np.atleast_1d(np.asarray(self.high, dtype=np.float64))
        if low.shape != high.shape or (low >= high).any():
            raise ValueError("need low < high per axis")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        if self.kind == "truncated-gaussian":
            mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
            sd = np.atleast_1d(np.asarray(self.sd, dtype=np.float64))
            if mean.shape != low.shape or sd.shape != low.shape or (sd <= 0).any():
                raise ValueError("truncated gaussian needs per-axis mean and positive sd")
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "sd", sd)

    @property
    def dim(self) -> int:
        return self.low.size

    def sample(self, n: int, rng: np.random.Generator) -> NDArray[np.float64]:
        u = rng.uniform(size=(n, self.dim))
        return self.from_uniform(u)

    def from_uniform(self, u: NDArray[np.float64]) -> NDArray[np.float64]:
        """Map uniform [0,1)^d points onto the law (used for sampling and QMC)."""
        if self.kind == "uniform":
            return self.low + u * (self.high - self.low)
        a = ndtr((self.low - self.mean) / self.sd)
        b = ndtr((self.high - self.mean) / self.sd)
        return self.mean + self.sd * ndtri(a + u * (b - a))

    def density1d(self, x: NDArray[np.float64]) -> NDArray[np.float64]:
        """Marginal density for d = 1 quadrature."""
        if self.dim != 1:
            raise ValueError("density1d is only defined for d = 1")
        x = np.asarray(x, dtype=np.float64)
        inside = (x >= self.low[0]) & (x <= self.high[0])
        if self.kind == "uniform":
            return np.where(inside, 1.0 / (self.high[0] - self.low[0]), 0.0)
        m, s = self.mean[0], self.sd[0]
        z = (x - m) / s
        norm = ndtr((self.high[0] - m) / s) - ndtr((self.low[0] - m) / s)
        dens = np.exp(-0.5 * z * z) / (s * math.sqrt(2.0 * math.pi) * norm)
        return np.where(inside, dens, 0.0)


@dataclass(frozen=True)
class EfficiencyBound:
    """Variance lower bound with the integration error actually achieved."""

    sigma2: float
    abs_error: float
    tau: float
    tau_abs_error: float
    method: str

    def to_dict(self) -> dict:
        return {
            "sigma2": self.sigma2,
            "abs_error": self.abs_error,
            "tau": self.tau,
            "tau_abs_error": self.tau_abs_error,
            "method": self.method,
        }


@dataclass
class DgpSpec:
    """Synthetic data-generating process with known nuisances.

    ``propensity``, ``mu0``, ``mu1``, ``sd0``, ``sd1`` take an (n, d) array
    and return length-n values. ``eta`` is the overlap margin: the
    propensity must stay inside [eta, 1 - eta] on the support (checked on a
    probe grid at construction).
    """

    name: str
    covariate_law: CovariateLaw
    propensity: Callable[[NDArray], NDArray]
    mu0: Callable[[NDArray], NDArray]
    mu1: Callable[[NDArray], NDArray]
    sd0: Callable[[NDArray], NDArray]
    sd1: Callable[[NDArray], NDArray]
    eta: float = 0.05
    _bound: Optional[EfficiencyBound] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if not 0.0 < self.eta < 0.5:
            raise ValueError("eta must lie in (0, 0.5)")
        probe = self.covariate_law.from_uniform(
            qmc.Sobol(self.covariate_law.dim, scramble=False, rng=0).random(256)
        )
        e = np.asarray(self.propensity(probe), dtype=np.float64)
        if ((e < self.eta - 1e-12) | (e > 1.0 - self.eta + 1e-12)).any():
            raise ValueError(f"propensity leaves [{self.eta}, {1 - self.eta}] on the support")
        for fn, label in ((self.sd0, "sd0"), (self.sd1, "sd1")):
            s = np.asarray(fn(probe), dtype=np.float64)
            if (s <= 0).any() or not np.isfinite(s).all():
                raise ValueError(f"{label} must be positive and finite on the support")

    @property
    def dim(self) -> int:
        return self.covariate_law.dim

    def effect(self, x: NDArray) -> NDArray:
        return np.asarray(self.mu1(x)) - np.asarray(self.mu0(x))

    @property
    def tau(self) -> float:
        return self.bound().tau

    @property
    def sigma2_bound(self) -> float:
        return self.bound().sigma2

    def bound(self) -> EfficiencyBound:
        if self._bound is None:
            self._bound = efficiency_bound(self)
        return self._bound

    def density_ratio_target(self, ds: Dataset) -> NDArray[np.float64]:
        """Column-sum target per unit: (1-e)/e if treated, e/(1-e) if control."""
        e = np.asarray(self.propensity(ds.covariates), dtype=np.float64)
        return np.where(ds.treatment == 1, (1.0 - e) / e, e / (1.0 - e))


_QMC_BATCHES = 8
_QMC_EXPONENT = 17  # 8 * 2^17 > 1e6 nodes


def efficiency_bound(dgp: DgpSpec, rel_tol: float = 1e-6) -> EfficiencyBound:
    """Variance lower bound for regular estimators of the effect.

    Computes ``E[(mu1 - mu0 - tau)^2] + E[sd1^2/e + sd0^2/(1-e)]`` by
    adaptive quadrature in one dimension and scrambled-Sobol quasi Monte
    Carlo above it.
    """

    def noise_term(x: NDArray) -> NDArray:
        e = np.asarray(dgp.propensity(x), dtype=np.float64)
        return np.asarray(dgp.sd1(x)) ** 2 / e + np.asarray(dgp.sd0(x)) ** 2 / (1.0 - e)

    if dgp.dim == 1:
        lo, hi = float(dgp.covariate_law.low[0]), float(dgp.covariate_law.high[0])

        def as_point(fn):
            return lambda t: float(fn(np.array([[t]]))[0] * dgp.covariate_law.density1d(np.array([t]))[0])

        tau, tau_err = integrate.quad(as_point(dgp.effect), lo, hi, epsabs=1e-12, epsrel=1e-9)
        var_part, err1 = integrate.quad(
            as_point(lambda x: (dgp.effect(x) - tau) ** 2), lo, hi, epsabs=1e-12, epsrel=1e-9
        )
        noise_part, err2 = integrate.quad(as_point(noise_term), lo, hi, epsabs=1e-12, epsrel=1e-9)
        sigma2 = var_part + noise_part
        abs_err = err1 + err2
        if abs_err > rel_tol * max(abs(sigma2), 1.0):
            raise IntegrationError(
                f"quadrature error {abs_err:.2e} exceeds relative tolerance {rel_tol:.0e}"
            )
        return EfficiencyBound(
            sigma2=sigma2, abs_error=abs_err, tau=tau, tau_abs_error=tau_err, method="quad"
        )

    tau_batches = np.empty(_QMC_BATCHES)
    sig_batches = np.empty(_QMC_BATCHES)
    effects = []
    for b in range(_QMC_BATCHES):
        sob = qmc.Sobol(dgp.dim, scramble=True, rng=b)
        x = dgp.covariate_law.from_uniform(sob.random_base2(_QMC_EXPONENT))
        eff = np.asarray(dgp.effect(x), dtype=np.float64)
        tau_batches[b] = eff.mean()
        effects.append(eff)
        sig_batches[b] = np.mean(noise_term(x))
    tau = float(tau_batches.mean())
    for b in range(_QMC_BATCHES):
        sig_batches[b] += np.mean((effects[b] - tau) ** 2)
    sigma2 = float(sig_batches.mean())
    return EfficiencyBound(
        sigma2=sigma2,
        abs_error=float(sig_batches.std(ddof=1) / math.sqrt(_QMC_BATCHES)),
        tau=tau,
        tau_abs_error=float(tau_batches.std(ddof=1) / math.sqrt(_QMC_BATCHES)),
        method=f"qmc-sobol-{_QMC_BATCHES}x2^{_QMC_EXPONENT}",
    )


_MAX_REDRAWS = 100


def _draw_with_info(dgp: DgpSpec, n: int, seed_key: tuple) -> tuple[Dataset, int]:
    for attempt in range(_MAX_REDRAWS + 1):
        rng = np.random.default_rng(np.random.SeedSequence(seed_key[0], spawn_key=seed_key[1:] + (attempt,)))
        x = dgp.covariate_law.sample(n, rng)
        e = np.asarray(dgp.propensity(x), dtype=np.float64)
        d = (rng.uniform(size=n) < e).astype(np.int64)
        if 0 < d.sum() < n:
            mu = np.where(d == 1, dgp.mu1(x), dgp.mu0(x))
            sd = np.where(d == 1, dgp.sd1(x), dgp.sd0(x))
            y = mu + sd * rng.standard_normal(n)
            return Dataset(x, d, y), attempt
    raise SimulationError(f"no replication with both arms after {_MAX_REDRAWS} redraws")


def draw_dataset(dgp: DgpSpec, n: int, seed: int) -> Dataset:
    """Draw one dataset; an empty-arm draw is retried with a derived sub-seed."""
    if n < 2:
        raise ValueError("n must be at least 2")
    ds, _ = _draw_with_info(dgp, n, (seed,))
    return ds


@dataclass
class McReport:
    """Per-n Monte Carlo summary with plug-in uncertainty on the summaries."""

    n: int
    replications: int
    tau_true: float
    sigma2_bound: float
    tau_hats: NDArray[np.float64]
    sigma2_hats: NDArray[np.float64]
    covered: NDArray[np.bool_]
    redraws: NDArray[np.int64]
    failures: list[tuple[int, str]] = field(default_factory=list)

    @property
    def n_ok(self) -> int:
        return self.tau_hats.size

    @property
    def mean_bias(self) -> float:
        return float(self.tau_hats.mean() - self.tau_true)

    @property
    def sd(self) -> float:
        return float(self.tau_hats.std(ddof=0))

    @property
    def rmse(self) -> float:
        return math.hypot(self.mean_bias, self.sd)

    @property
    def mean_sigma2(self) -> float:
        return float(self.sigma2_hats.mean())

    @property
    def coverage(self) -> float:
        return float(self.covered.mean())

    @property
    def efficiency_ratio(self) -> float:
        if self.sigma2_bound <= 0:
            return math.nan
        return self.n * self.sd**2 / self.sigma2_bound

    @property
    def mc_se_bias(self) -> float:
        return self.sd / math.sqrt(self.n_ok)

    @property
    def mc_se_coverage(self) -> float:
        p = self.coverage
        return math.sqrt(max(p * (1.0 - p), 0.0) / self.n_ok)

    @property
    def mc_se_efficiency_ratio(self) -> float:
        return self.efficiency_ratio * math.sqrt(2.0 / max(self.n_ok - 1, 1))

    def summary(self) -> dict:
        return {
            "n": self.n,
            "replications": self.replications,
            "completed": self.n_ok,
            "tau_true": self.tau_true,
            "sigma2_bound": self.sigma2_bound,
            "mean_tau_hat": float(self.tau_hats.mean()),
            "mean_bias": self.mean_bias,
            "mc_se_bias": self.mc_se_bias,
            "sd": self.sd,
            "rmse": self.rmse,
            "mean_sigma2_hat": self.mean_sigma2,
            "coverage": self.coverage,
            "mc_se_coverage": self.mc_se_coverage,
            "efficiency_ratio": self.efficiency_ratio,
            "mc_se_efficiency_ratio": self.mc_se_efficiency_ratio,
            "total_redraws": int(self.redraws.sum()),
            "failures": len(self.failures),
        }

    def rows(self) -> list[dict]:
        return [
            {
                "n": self.n,
                "replication": r,
                "tau_hat": float(self.tau_hats[r]),
                "sigma2_hat": float(self.sigma2_hats[r]),
                "covered": int(self.covered[r]),
                "redraws": int(self.redraws[r]),
            }
            for r in range(self.n_ok)
        ]


def _max_workers() -> int:
    value = os.environ.get("IMPUTE_ATE_THREADS", "1")
    try:
        return max(1, int(value))
    except ValueError:
        return 1


def run_mc(
    dgp: DgpSpec,
    estimator,
    n_grid: Sequence[int],
    replications: int,
    seed: int = 0,
) -> dict[int, McReport]:
    """Seeded Monte Carlo study of an estimator over a grid of sample sizes.

    ``estimator`` exposes ``estimate(ds) -> AteEstimate``. Replication r of
    sample size n draws from an independent stream keyed by (seed, n, r),
    so reruns reproduce every number and the worker count
    (``IMPUTE_ATE_THREADS``) cannot change results.
    """
    tau_true = dgp.tau
    sigma2_bound = dgp.sigma2_bound
    reports: dict[int, McReport] = {}

    def one(n: int, r: int):
        ds, redraws = _draw_with_info(dgp, n, (seed, n, r))
        est = estimator.estimate(ds)
        return est.tau_hat, est.sigma2_hat, est.covers(tau_true), redraws

    for n in n_grid:
        results: list = [None] * replications
        failures: list[tuple[int, str]] = []
        workers = _max_workers()
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = {r: pool.submit(one, n, r) for r in range(replications)}
            for r in range(replications):
                try:
                    results[r] = futures[r].result()
                except Exception as exc:  # noqa: BLE001 - recorded per replication
                    failures.append((r, str(exc)))
        else:
            for r in range(replications):
                try:
                    results[r] = one(n, r)
                except Exception as exc:  # noqa: BLE001 - recorded per replication
                    failures.append((r, str(exc)))
        ok = [res for res in results if res is not None]
        reports[n] = McReport(
            n=n,
            replications=replications,
            tau_true=tau_true,
            sigma2_bound=sigma2_bound,
            tau_hats=np.array([t for t, _, _, _ in ok]),
            sigma2_hats=np.array([s for _, s, _, _ in ok]),
            covered=np.array([c for _, _, c, _ in ok], dtype=bool),
            redraws=np.array([rd for _, _, _, rd in ok], dtype=np.int64),
            failures=failures,
        )
    return reports


def benchmark_dgp() -> DgpSpec:
    """Uniform covariate, even arms, linear effect; the bound is 49/12."""
    return DgpSpec(
        name="benchmark",
        covariate_law=CovariateLaw("uniform", np.array([0.0]), np.array([1.0])),
        propensity=lambda x: np.full(x.shape[0], 0.5),
        mu0=lambda x: np.zeros(x.shape[0]),
        mu1=lambda x: x[:, 0],
        sd0=lambda x: np.ones(x.shape[0]),
        sd1=lambda x: np.ones(x.shape[0]),
        eta=0.49,
    )


def tilted_dgp() -> DgpSpec:
    """Sloped propensity 0.3 + 0.4 x with curved arm means; bound via quadrature."""
    return DgpSpec(
        name="tilted",
        covariate_law=CovariateLaw("uniform", np.array([0.0]), np.array([1.0])),
        propensity=lambda x: 0.3 + 0.4 * x[:, 0],
        mu0=lambda x: x[:, 0] ** 2,
        mu1=lambda x: 1.0 + 2.0 * x[:, 0] - x[:, 0] ** 2,
        sd0=lambda x: np.ones(x.shape[0]),
        sd1=lambda x: np.ones(x.shape[0]),
        eta=0.3,
    )


DGPS: dict[str, Callable[[], DgpSpec]] = {
    "benchmark": benchmark_dgp,
    "tilted": tilted_dgp,
}
