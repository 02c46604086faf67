"""
Likelihood ratio testing of variance components.

The reference distribution of the LRT comes from a parametric bootstrap whose
generating parameter is the null estimate with small untested entries of
Lambda shrunk to zero. The 50:50 mixture of a point mass at zero and chi2(1)
is available for the single-variance case.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import stats

from core.estimate import FitOptions, FitResult, fit_pair
from core.exceptions import ConfigurationError, EstimationError, VCTestError
from core.likelihood import QuadratureConfig, simulate_like
from core.model import Dataset, ModelSpec, TestSpec, Theta
from core.parallel_processor import ParallelProcessor, TaskFailure

logger = logging.getLogger(__name__)

SHRINK_SCOPES = ("lambda1_only", "lambda1_and_offdiag")
SEED_SOURCES = ("null", "full")
FAILURE_BUDGET = 0.05

Seed = Union[int, Sequence[int]]


def default_shrink(n: int) -> float:
    """c(N) = 0.5 * N^(-0.2)."""
    if n < 1:
        raise ConfigurationError(f"number of individuals must be >= 1, got {n}")
    return 0.5 * float(n) ** -0.2


@dataclass(frozen=True)
class ShrinkPolicy:
    """
    How the bootstrap-generating parameter is built.

    ``c_n`` of None means the default rule applied to the number of individuals.
    """

    c_n: Optional[float] = None
    scope: str = "lambda1_and_offdiag"
    seed_from: str = "null"
    shrink_psi: bool = False

    def __post_init__(self):
        if self.c_n is not None and not self.c_n >= 0:
            raise ConfigurationError(f"c_N must be >= 0, got {self.c_n}")
        if self.scope not in SHRINK_SCOPES:
            raise ConfigurationError(f"scope must be one of {SHRINK_SCOPES}, got {self.scope!r}")
        if self.seed_from not in SEED_SOURCES:
            raise ConfigurationError(f"seed_from must be one of {SEED_SOURCES}, got {self.seed_from!r}")

    @classmethod
    def from_config(cls, section: Optional[Dict[str, Any]] = None, **overrides) -> "ShrinkPolicy":
        section = dict(section or {})
        c_n = section.get("c_n", "auto")
        values = {
            "c_n": None if c_n in (None, "auto") else float(c_n),
            "scope": section.get("scope", "lambda1_and_offdiag"),
            "seed_from": section.get("seed_from") or "null",
            "shrink_psi": bool(section.get("shrink_psi", False)),
        }
        values.update(overrides)
        return cls(**values)

    def threshold(self, n: int) -> float:
        return default_shrink(n) if self.c_n is None else float(self.c_n)

    def with_threshold(self, c_n: Optional[float]) -> "ShrinkPolicy":
        return ShrinkPolicy(c_n=c_n, scope=self.scope, seed_from=self.seed_from, shrink_psi=self.shrink_psi)


@dataclass(frozen=True)
class BootstrapResult:
    """Observed LRT, its bootstrap replicates and the derived p-value."""

    lrt_obs: float
    lrt_star: np.ndarray
    p_boot: float
    theta_star: Theta
    b_failed: int
    B: int
    c_n: float
    tested_rows: Tuple[int, ...] = ()
    fit_full: Optional[FitResult] = field(default=None, compare=False)
    fit_null: Optional[FitResult] = field(default=None, compare=False)
    failure_budget: float = FAILURE_BUDGET

    @property
    def b_effective(self) -> int:
        return int(self.lrt_star.shape[0])

    @property
    def unreliable(self) -> bool:
        return self.b_failed > self.failure_budget * self.B

    def rejects(self, alpha: float) -> bool:
        """Reject H0 at level alpha when p_boot < alpha."""
        return self.p_boot < alpha

    def to_report(self) -> Dict[str, Any]:
        """Flat key/value view for the text report."""
        report: Dict[str, Any] = {
            "tested_rows": ",".join(str(r) for r in self.tested_rows),
            "lrt_obs": self.lrt_obs,
            "B": self.B,
            "b_failed": self.b_failed,
            "p_boot": self.p_boot,
            "c_N": self.c_n,
            "unreliable": self.unreliable,
        }
        if self.fit_full is not None and self.fit_null is not None:
            report["loglik_full"] = self.fit_full.loglik
            report["loglik_null"] = self.fit_null.loglik
        for key, value in self.theta_star.as_dict().items():
            report[f"theta_star.{key}"] = value
        return report


def lrt_statistic(fit_full: FitResult, fit_null: FitResult) -> float:
    """max(0, 2 (l_full - l_null))."""
    return max(0.0, 2.0 * (fit_full.loglik - fit_null.loglik))


def shrink_parameter(
    theta_hat: Theta, spec: TestSpec, policy: ShrinkPolicy, c_n: Optional[float] = None
) -> Theta:
    """
    Zero the tested rows of Lambda and threshold the untested block.

    Diagonal entries are kept when value > c; off-diagonal entries when
    |value| > c (only with scope lambda1_and_offdiag, otherwise they are kept
    as they are). With shrink_psi the fixed effects are thresholded on |value|.
    """
    spec.validate(theta_hat.p)
    c = policy.c_n if c_n is None else c_n
    if c is None:
        raise ConfigurationError("auto threshold needs the number of individuals; pass c_n")
    lam = np.array(theta_hat.lam, dtype=float)
    tested = list(spec.zero_based())
    lam[tested, :] = 0.0
    untested = spec.untested(theta_hat.p)
    for i in untested:
        for j in untested:
            if j > i:
                continue
            value = lam[i, j]
            if i == j:
                if not value > c:
                    lam[i, j] = 0.0
            elif policy.scope == "lambda1_and_offdiag":
                if abs(value) > c:
                    if value < 0:
                        logger.warning(
                            "keeping negative off-diagonal Lambda[%d,%d]=%.6g (|value| > c_N=%.6g)",
                            i + 1,
                            j + 1,
                            value,
                            c,
                        )
                else:
                    lam[i, j] = 0.0
    beta = np.array(theta_hat.beta, dtype=float)
    if policy.shrink_psi:
        beta = np.where(np.abs(beta) > c, beta, 0.0)
    return Theta(beta=beta, lam=lam, sigma2=theta_hat.sigma2)


def bootstrap_pvalue(lrt_obs: float, lrt_star: Sequence[float]) -> float:
    """Fraction of replicates strictly above the observed statistic."""
    star = np.asarray(lrt_star, dtype=float)
    if star.size == 0:
        raise EstimationError("no bootstrap replicate available for the p-value")
    return float(np.count_nonzero(star > lrt_obs)) / star.size


def asymptotic_pvalue_single(lrt_obs: float, r: int = 1) -> float:
    """
    p-value under 0.5 * delta_0 + 0.5 * chi2(1).

    Valid only for one tested variance with no other variance on the boundary.
    """
    if r != 1:
        raise ConfigurationError(
            f"the 50:50 chi2(1) mixture only applies to one tested variance, got r={r}; "
            "use the bootstrap"
        )
    if lrt_obs < 0:
        raise ConfigurationError(f"LRT must be >= 0, got {lrt_obs}")
    if lrt_obs == 0:
        return 1.0
    return float(0.5 * stats.chi2.sf(lrt_obs, df=1))


def replicate_rng(seed: Seed, index: int) -> np.random.Generator:
    """Stream for replicate ``index``; depends only on (seed, index)."""
    entropy = [int(seed)] if np.isscalar(seed) else [int(s) for s in seed]
    return np.random.default_rng(entropy + [int(index)])


def _replicate_lrt(
    model: ModelSpec,
    dataset: Dataset,
    spec: TestSpec,
    theta_star: Theta,
    quad: Optional[QuadratureConfig],
    opts: Optional[FitOptions],
    seed: Seed,
    index: int,
) -> float:
    simulated = simulate_like(model, theta_star, dataset, replicate_rng(seed, index))
    full, null = fit_pair(model, simulated, spec, quad, opts)
    return lrt_statistic(full, null)


def simulate_lrt_star(
    model: ModelSpec,
    dataset: Dataset,
    spec: TestSpec,
    theta_star: Theta,
    B: int,
    seed: Seed,
    quad: Optional[QuadratureConfig] = None,
    opts: Optional[FitOptions] = None,
    workers: Optional[int] = None,
    progress=None,
) -> Tuple[np.ndarray, int]:
    """
    Bootstrap LRT draws generated from ``theta_star`` on the observed design.

    Returns the successful draws in replicate order and the failure count.
    """
    if B < 1:
        raise ConfigurationError(f"B must be >= 1, got {B}")
    processor = ParallelProcessor(workers)
    results = processor.map(
        lambda b: _replicate_lrt(model, dataset, spec, theta_star, quad, opts, seed, b),
        range(1, B + 1),
        on_done=progress.callback if progress is not None else None,
    )
    stats = processor.get_stats()
    logger.debug("%d bootstrap replicates in %.1fs", stats["total_tasks"], stats["total_time"])
    values: List[float] = []
    failed = 0
    for result in results:
        if isinstance(result, TaskFailure):
            if not isinstance(result.error, (VCTestError, ArithmeticError, np.linalg.LinAlgError)):
                raise result.error
            logger.warning("bootstrap replicate %d failed: %s", result.index + 1, result.error)
            failed += 1
        else:
            values.append(result)
    if not values:
        raise EstimationError(f"all {B} bootstrap replicates failed")
    return np.asarray(values, dtype=float), failed


def generating_parameter(
    fits: Tuple[FitResult, FitResult], spec: TestSpec, policy: ShrinkPolicy, n: int
) -> Tuple[Theta, float]:
    """theta* and the threshold used, from the observed (full, null) fits."""
    full, null = fits
    source = null if policy.seed_from == "null" else full
    c = policy.threshold(n)
    return shrink_parameter(source.theta_hat, spec, policy, c_n=c), c


def run_bootstrap(
    model: ModelSpec,
    dataset: Dataset,
    spec: TestSpec,
    fits: Tuple[FitResult, FitResult],
    policy: ShrinkPolicy,
    B: int,
    seed: Seed = 0,
    quad: Optional[QuadratureConfig] = None,
    opts: Optional[FitOptions] = None,
    workers: Optional[int] = None,
    failure_budget: float = FAILURE_BUDGET,
    progress=None,
) -> BootstrapResult:
    """Bootstrap steps after the observed fits; several policies may share one pair of fits."""
    full, null = fits
    lrt_obs = lrt_statistic(full, null)
    theta_star, c = generating_parameter(fits, spec, policy, dataset.n_individuals)
    lrt_star, failed = simulate_lrt_star(
        model, dataset, spec, theta_star, B, seed, quad, opts, workers, progress
    )
    result = BootstrapResult(
        lrt_obs=lrt_obs,
        lrt_star=lrt_star,
        p_boot=bootstrap_pvalue(lrt_obs, lrt_star),
        theta_star=theta_star,
        b_failed=failed,
        B=B,
        c_n=c,
        tested_rows=spec.tested_rows,
        fit_full=full,
        fit_null=null,
        failure_budget=failure_budget,
    )
    if result.unreliable:
        logger.warning("%d of %d bootstrap replicates failed; result flagged unreliable", failed, B)
    return result


def bootstrap_test(
    model: ModelSpec,
    dataset: Dataset,
    spec: TestSpec,
    quad: Optional[QuadratureConfig] = None,
    opts: Optional[FitOptions] = None,
    policy: Optional[ShrinkPolicy] = None,
    B: int = 200,
    seed: Seed = 0,
    workers: Optional[int] = None,
    failure_budget: float = FAILURE_BUDGET,
    progress=None,
) -> BootstrapResult:
    """Shrinked parametric bootstrap test of H0: tested rows of Lambda are zero."""
    if B < 1:
        raise ConfigurationError(f"B must be >= 1, got {B}")
    spec.validate(model.p)
    fits = fit_pair(model, dataset, spec, quad, opts)
    logger.info(
        "observed fits: loglik full=%.6f null=%.6f", fits[0].loglik, fits[1].loglik
    )
    return run_bootstrap(
        model,
        dataset,
        spec,
        fits,
        policy or ShrinkPolicy(),
        B,
        seed,
        quad,
        opts,
        workers,
        failure_budget,
        progress,
    )


def sequential_plan(
    model: ModelSpec,
    dataset: Dataset,
    rows: Tuple[int, int] = (2, 3),
    quad: Optional[QuadratureConfig] = None,
    opts: Optional[FitOptions] = None,
    policy: Optional[ShrinkPolicy] = None,
    B: int = 200,
    seed: Seed = 0,
    workers: Optional[int] = None,
) -> Dict[str, BootstrapResult]:
    """
    Joint test on both rows, then each row alone, each with and without shrinkage.

    Keys: T1, T2, T3 (shrinkage threshold from ``policy``) and the same with a
    ``_no_shrink`` suffix (threshold 0). T2 tests the second row, T3 the first.
    """
    first, second = rows
    policy = policy or ShrinkPolicy()
    plans = (("T1", TestSpec((first, second))), ("T2", TestSpec((second,))), ("T3", TestSpec((first,))))
    results: Dict[str, BootstrapResult] = {}
    for name, spec in plans:
        spec.validate(model.p)
        fits = fit_pair(model, dataset, spec, quad, opts)
        for suffix, arm in (("", policy), ("_no_shrink", policy.with_threshold(0.0))):
            results[name + suffix] = run_bootstrap(
                model, dataset, spec, fits, arm, B, seed, quad, opts, workers
            )
            logger.info(
                "%s%s rows=%s: LRT=%.4f p_boot=%.4f",
                name,
                suffix,
                spec.tested_rows,
                results[name + suffix].lrt_obs,
                results[name + suffix].p_boot,
            )
    return results
