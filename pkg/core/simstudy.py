"""
Monte Carlo studies of the testing procedures.

Scenarios m1 to m4 cover linear models with one to eight random effects and a
logistic growth model; ``coucal`` generates a synthetic nestling growth
dataset. Every replicate k draws from ``default_rng([seed, k])`` and all
procedure arms of a replicate share its observed fits.
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.config_manager import get_config
from core.estimate import FitOptions, fit_pair
from core.exceptions import ConfigurationError, VCTestError
from core.likelihood import QuadratureConfig, simulate_dataset
from core.mean_functions import M4_DESIGN, builtin_model, model_m1, model_m2, model_m3, model_m4
from core.model import Dataset, ModelSpec, TestSpec, Theta, gamma_of, theta_from_gamma
from core.parallel_processor import ParallelProcessor, TaskFailure
from core.testing import (
    ShrinkPolicy,
    asymptotic_pvalue_single,
    bootstrap_pvalue,
    generating_parameter,
    lrt_statistic,
    simulate_lrt_star,
)
from utils.text import format_percent

logger = logging.getLogger(__name__)

MODEL_IDS = ("m1", "m2", "m3", "m4", "coucal", "custom")
PROCEDURES = ("bootstrap", "asymptotic")
RESULT_COLUMNS = ["procedure", "alpha", "c_n", "s", "rate", "stderr", "k_effective"]
POWER_COLUMNS = RESULT_COLUMNS + ["tested_variance", "rho"]

# Synthetic nestling data: Lambda is the full-model estimate reported for the
# real nestlings; fixed effects, residual variance and ages are stand-ins.
COUCAL_LAMBDA = (np.sqrt(212.34), np.sqrt(0.89), np.sqrt(0.02))
COUCAL_BETA = (110.0, 7.0, 2.5)
COUCAL_SIGMA2 = 9.0
COUCAL_N = 292
COUCAL_AGES = np.arange(0.0, 16.0)

DesignSampler = Callable[[np.random.Generator], List[np.ndarray]]


@dataclass(frozen=True)
class ScenarioConfig:
    """Everything needed to run a level, power or nuisance study."""

    model_id: str
    model: ModelSpec
    N: int
    K: int
    B: int
    alpha_levels: Tuple[float, ...]
    theta0: Theta
    spec: TestSpec
    policies: Tuple[ShrinkPolicy, ...]
    seed: int
    procedures: Tuple[str, ...] = PROCEDURES
    design: Optional[Tuple[np.ndarray, ...]] = field(default=None, compare=False)
    design_sampler: Optional[DesignSampler] = field(default=None, compare=False)
    s: int = 0
    quad: QuadratureConfig = field(default_factory=QuadratureConfig)
    opts: FitOptions = field(default_factory=FitOptions)

    def __post_init__(self):
        if self.K < 1:
            raise ConfigurationError(f"K must be >= 1, got {self.K}")
        if self.B < 1:
            raise ConfigurationError(f"B must be >= 1, got {self.B}")
        if self.N < 1:
            raise ConfigurationError(f"N must be >= 1, got {self.N}")
        for alpha in self.alpha_levels:
            if not 0 < alpha < 1:
                raise ConfigurationError(f"alpha levels must lie in (0, 1), got {alpha}")
        unknown = set(self.procedures) - set(PROCEDURES)
        if unknown:
            raise ConfigurationError(f"unknown procedures {sorted(unknown)}")
        if "asymptotic" in self.procedures and self.spec.r != 1:
            raise ConfigurationError(
                f"the asymptotic procedure needs exactly one tested row, got {self.spec.tested_rows}"
            )
        if self.design is None and self.design_sampler is None:
            raise ConfigurationError("a scenario needs a design or a design sampler")
        self.spec.validate(self.model.p)
        self.model.check_theta(self.theta0)

    def draw_design(self, rng: np.random.Generator) -> List[np.ndarray]:
        if self.design_sampler is not None:
            return self.design_sampler(rng)
        return list(self.design)

    def summary(self) -> Dict[str, Any]:
        return {
            "model_id": self.model_id,
            "N": self.N,
            "K": self.K,
            "B": self.B,
            "alpha_levels": list(self.alpha_levels),
            "tested_rows": list(self.spec.tested_rows),
            "c_values": [p.c_n if p.c_n is not None else "auto" for p in self.policies],
            "procedures": list(self.procedures),
            "s": self.s,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ScenarioRow:
    procedure: str
    alpha: float
    c_n: float
    s: int
    rate: float
    stderr: float
    k_effective: int
    tested_variance: Optional[float] = None
    rho: Optional[float] = None


@dataclass
class ScenarioResult:
    """Empirical rejection rates, one row per (procedure, threshold, alpha, cell)."""

    rows: List[ScenarioRow] = field(default_factory=list)
    k_requested: int = 0

    def extend(self, other: "ScenarioResult") -> None:
        self.rows.extend(other.rows)
        self.k_requested = max(self.k_requested, other.k_requested)

    def to_frame(self) -> pd.DataFrame:
        has_power = any(row.tested_variance is not None for row in self.rows)
        columns = POWER_COLUMNS if has_power else RESULT_COLUMNS
        return pd.DataFrame([asdict(row) for row in self.rows], columns=POWER_COLUMNS)[columns]

    def to_table(self) -> str:
        frame = self.to_frame().copy()
        frame["rate"] = frame["rate"].map(format_percent)
        frame["stderr"] = frame["stderr"].map(format_percent)
        return frame.to_string(index=False)

    def rate(self, procedure: str, alpha: float, c_n: Optional[float] = None, **cell) -> float:
        """Look up one rate; ``cell`` may pin s, tested_variance or rho."""
        for row in self.rows:
            if row.procedure != procedure or not np.isclose(row.alpha, alpha):
                continue
            if c_n is not None and not np.isclose(row.c_n, c_n):
                continue
            if all(np.isclose(getattr(row, key), value) for key, value in cell.items()):
                return row.rate
        raise KeyError(f"no row for {procedure} alpha={alpha} c_n={c_n} {cell}")


def _same_design(design: Sequence[float], n: int) -> Tuple[np.ndarray, ...]:
    x = np.asarray(design, dtype=float).reshape(-1, 1)
    return tuple(x for _ in range(n))


def _m3_sampler(n: int, j: int, p: int) -> DesignSampler:
    def sample(rng: np.random.Generator) -> List[np.ndarray]:
        return [rng.normal(2.0, 0.5, size=(j, p)) for _ in range(n)]

    return sample


def nuisance_theta(theta: Theta, spec: TestSpec, s: int) -> Theta:
    """Zero the first ``s`` untested rows of Lambda (nuisance variances)."""
    untested = spec.untested(theta.p)
    if s < 0 or s > len(untested):
        raise ConfigurationError(f"s must be in [0, {len(untested)}], got {s}")
    lam = np.array(theta.lam)
    for row in untested[:s]:
        lam[row, :] = 0.0
    return theta.replace(lam=lam)


def coucal_theta() -> Theta:
    return Theta(beta=np.array(COUCAL_BETA), lam=np.diag(COUCAL_LAMBDA), sigma2=COUCAL_SIGMA2)


def coucal_design(rng: np.random.Generator, n: int = COUCAL_N) -> List[np.ndarray]:
    """Each nestling is weighed on 4 to 10 distinct days between ages 0 and 15."""
    design = []
    for _ in range(n):
        size = int(rng.integers(4, 11))
        ages = np.sort(rng.choice(COUCAL_AGES, size=size, replace=False))
        design.append(ages.reshape(-1, 1))
    return design


def synthetic_coucal(rng: np.random.Generator, n: int = COUCAL_N) -> Dataset:
    """A nestling growth dataset drawn from the logistic model."""
    model = builtin_model("coucal")
    design = coucal_design(rng, n)
    return simulate_dataset(model, coucal_theta(), design, rng, ids=[f"n{i + 1:03d}" for i in range(n)])


def _policies(c_values: Optional[Sequence[Any]], base: ShrinkPolicy) -> Tuple[ShrinkPolicy, ...]:
    if c_values is None:
        return (base,)
    out = []
    for c in c_values:
        out.append(base.with_threshold(None if c in (None, "auto") else float(c)))
    return tuple(out)


def build_scenario(model_id: str, overrides: Optional[Dict[str, Any]] = None) -> ScenarioConfig:
    """
    Built-in scenario with user overrides applied last.

    Recognised overrides: N, K, B, alpha_levels, seed, s, c_values,
    procedures, tested_rows, quad, opts, policy.
    """
    if model_id not in MODEL_IDS or model_id == "custom":
        raise ConfigurationError(f"unknown scenario {model_id!r}; choose from m1, m2, m3, m4, coucal")
    overrides = dict(overrides or {})
    sim = get_config().get_simulation_config()
    base_policy = overrides.pop("policy", None) or ShrinkPolicy.from_config(
        get_config().get_bootstrap_config()
    )
    quad = overrides.pop("quad", None) or QuadratureConfig.from_config(get_config().get_quadrature_config())
    opts = overrides.pop("opts", None) or FitOptions.from_config(get_config().get_estimation_config())
    s = int(overrides.pop("s", 0))
    c_values = overrides.pop("c_values", None)

    if model_id == "m1":
        model, n = model_m1(), 20
        theta0 = Theta(beta=[0.0, 7.0], lam=np.diag([np.sqrt(1.3), 0.0]), sigma2=1.5**2)
        spec, k_default = TestSpec((2,)), int(sim.get("K", 500))
    elif model_id == "m2":
        model, n = model_m2(), 40
        theta0 = Theta(beta=[0.0, 7.0, 3.0], lam=np.diag([np.sqrt(1.3), 0.0, 0.0]), sigma2=1.5**2)
        spec, k_default = TestSpec((3,)), int(sim.get("K", 500))
    elif model_id == "m3":
        model, n = model_m3(8), 30
        theta0 = Theta(beta=[], lam=np.diag([0.0] + [1.0] * 7), sigma2=2.0)
        spec, k_default = TestSpec((1,)), int(sim.get("K", 500))
        if c_values is None:
            c_values = [0.0, 0.24, 0.9]
    elif model_id == "m4":
        model, n = model_m4(), 40
        theta0 = Theta(beta=[200.0, 500.0, 150.0], lam=np.diag([10.0, 10.0, 0.0]), sigma2=25.0)
        spec, k_default = TestSpec((3,)), 200
    else:
        model = builtin_model("coucal")
        n, theta0 = COUCAL_N, coucal_theta()
        spec, k_default = TestSpec((2, 3)), int(sim.get("K", 500))

    if "tested_rows" in overrides:
        spec = TestSpec(tuple(overrides.pop("tested_rows")))
    n = int(overrides.pop("N", n))
    if model_id == "m3":
        theta0 = nuisance_theta(theta0, spec, s)
        design, sampler = None, _m3_sampler(n, 9, 8)
    elif model_id == "m4":
        design, sampler = _same_design(M4_DESIGN, n), None
    elif model_id == "coucal":
        design, sampler = None, (lambda rng: coucal_design(rng, n))
    else:
        design, sampler = _same_design(np.arange(1.0, 6.0), n), None

    alpha_levels = overrides.pop("alpha_levels", sim.get("alpha_levels", (0.01, 0.05, 0.10)))
    procedures = tuple(overrides.pop("procedures", PROCEDURES if spec.r == 1 else ("bootstrap",)))
    config = ScenarioConfig(
        model_id=model_id,
        model=model,
        N=n,
        K=int(overrides.pop("K", k_default)),
        B=int(overrides.pop("B", sim.get("B", 200))),
        alpha_levels=tuple(float(a) for a in alpha_levels),
        theta0=theta0,
        spec=spec,
        policies=_policies(c_values, base_policy),
        seed=int(overrides.pop("seed", sim.get("seed", 2024))),
        procedures=procedures,
        design=design,
        design_sampler=sampler,
        s=s,
        quad=quad,
        opts=opts,
    )
    if overrides:
        raise ConfigurationError(f"unknown scenario overrides: {sorted(overrides)}")
    return config


def _replicate(
    config: ScenarioConfig, theta: Theta, model: ModelSpec, k: int
) -> Dict[Tuple[str, float], float]:
    """p-values of every arm on replicate k, keyed by (procedure, threshold)."""
    rng = np.random.default_rng([config.seed, k])
    data = simulate_dataset(model, theta, config.draw_design(rng), rng)
    fits = fit_pair(model, data, config.spec, config.quad, config.opts)
    lrt_obs = lrt_statistic(*fits)
    pvalues: Dict[Tuple[str, float], float] = {}
    if "bootstrap" in config.procedures:
        cache: List[Tuple[Theta, np.ndarray]] = []
        for policy in config.policies:
            theta_star, c = generating_parameter(fits, config.spec, policy, data.n_individuals)
            lrt_star = next((star for cached, star in cache if cached == theta_star), None)
            if lrt_star is None:
                lrt_star, _ = simulate_lrt_star(
                    model,
                    data,
                    config.spec,
                    theta_star,
                    config.B,
                    (config.seed, k),
                    config.quad,
                    config.opts,
                    workers=1,
                )
                cache.append((theta_star, lrt_star))
            pvalues[("bootstrap", c)] = bootstrap_pvalue(lrt_obs, lrt_star)
    if "asymptotic" in config.procedures:
        pvalues[("asymptotic", float("nan"))] = asymptotic_pvalue_single(lrt_obs, config.spec.r)
    return pvalues


def _rejection_rates(
    config: ScenarioConfig,
    theta: Theta,
    model: ModelSpec,
    workers: Optional[int],
    progress=None,
    **cell,
) -> ScenarioResult:
    processor = ParallelProcessor(workers)
    if progress is not None:
        progress.start(config.K, f"{config.model_id} s={config.s}")
    try:
        outcomes = processor.map(
            lambda k: _replicate(config, theta, model, k),
            range(1, config.K + 1),
            on_done=progress.callback if progress is not None else None,
        )
    finally:
        if progress is not None:
            progress.finish()

    successes = []
    for outcome in outcomes:
        if isinstance(outcome, TaskFailure):
            if not isinstance(outcome.error, (VCTestError, ArithmeticError, np.linalg.LinAlgError)):
                raise outcome.error
            logger.warning("replicate %d excluded: %s", outcome.index + 1, outcome.error)
        else:
            successes.append(outcome)

    result = ScenarioResult(k_requested=config.K)
    k_eff = len(successes)
    if not k_eff:
        logger.error("no replicate of scenario %s succeeded", config.model_id)
        return result
    for key in successes[0]:
        procedure, c = key
        pvalues = np.array([outcome[key] for outcome in successes])
        for alpha in config.alpha_levels:
            rate = float(np.mean(pvalues < alpha))
            result.rows.append(
                ScenarioRow(
                    procedure=procedure,
                    alpha=alpha,
                    c_n=c,
                    s=config.s,
                    rate=rate,
                    stderr=float(np.sqrt(rate * (1.0 - rate) / k_eff)),
                    k_effective=k_eff,
                    **cell,
                )
            )
    return result


def empirical_level(config: ScenarioConfig, workers: Optional[int] = None, progress=None) -> ScenarioResult:
    """Rejection rates under theta0, which must satisfy the null hypothesis."""
    if not config.spec.contains(config.theta0):
        raise ConfigurationError(
            f"theta0 is not in the null space of rows {config.spec.tested_rows}; "
            "the level is only defined under H0"
        )
    return _rejection_rates(config, config.theta0, config.model, workers, progress)


def alternative_theta(theta0: Theta, spec: TestSpec, variance: float, rho: float) -> Theta:
    """
    theta0 with the tested variance set to ``variance`` and correlation ``rho``
    between the tested effect and the first untested one.
    """
    if variance < 0:
        raise ConfigurationError(f"tested variance must be >= 0, got {variance}")
    if not -1.0 <= rho <= 1.0:
        raise ConfigurationError(f"correlation must lie in [-1, 1], got {rho}")
    gamma = gamma_of(theta0)
    untested = spec.untested(theta0.p)
    anchor = untested[0] if untested else None
    for t in spec.zero_based():
        gamma[t, :] = 0.0
        gamma[:, t] = 0.0
        gamma[t, t] = variance
        if anchor is not None and rho != 0.0:
            cov = rho * np.sqrt(variance * gamma[anchor, anchor])
            gamma[t, anchor] = gamma[anchor, t] = cov
    try:
        return theta_from_gamma(theta0.beta, gamma, theta0.sigma2)
    except ConfigurationError as e:
        raise ConfigurationError(
            f"grid point (variance={variance}, rho={rho}) gives an invalid covariance: {e}"
        ) from e


def empirical_power(
    config: ScenarioConfig,
    grid: Sequence[Tuple[float, float]],
    workers: Optional[int] = None,
    progress=None,
) -> ScenarioResult:
    """Rejection rates at each (tested variance, correlation) grid point."""
    alternatives = [(v, rho, alternative_theta(config.theta0, config.spec, v, rho)) for v, rho in grid]
    result = ScenarioResult(k_requested=config.K)
    for variance, rho, theta in alternatives:
        model = config.model.with_structure("full") if rho != 0.0 else config.model
        logger.info("power grid point variance=%g rho=%g", variance, rho)
        result.extend(
            _rejection_rates(config, theta, model, workers, progress, tested_variance=variance, rho=rho)
        )
    return result


def nuisance_sweep(
    config: ScenarioConfig,
    s_values: Sequence[int],
    c_values: Sequence[float],
    alpha: float = 0.05,
    workers: Optional[int] = None,
    progress=None,
) -> ScenarioResult:
    """Level at ``alpha`` for every (number of zero untested variances, threshold) cell."""
    if config.s != 0:
        raise ConfigurationError("nuisance_sweep starts from a scenario built with s=0")
    base = config.theta0
    policies = _policies(list(c_values), config.policies[0])
    result = ScenarioResult(k_requested=config.K)
    for s in s_values:
        cell = replace(
            config,
            theta0=nuisance_theta(base, config.spec, int(s)),
            s=int(s),
            policies=policies,
            alpha_levels=(alpha,),
            procedures=("bootstrap",),
        )
        result.extend(empirical_level(cell, workers, progress))
    return result


@dataclass(frozen=True)
class RatioCriterionReport:
    """Outcome of the numeric growth-ratio check; evidence, not proof."""

    supported: bool
    radius: Optional[float]
    epsilon: float
    sup_by_radius: Dict[float, float]
    tail_sup: Dict[float, float]
    note: str

    def to_report(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "supported": self.supported,
            "radius": self.radius,
            "epsilon": self.epsilon,
            "note": self.note,
        }
        for r, value in self.sup_by_radius.items():
            out[f"sup_ratio[{r:g}]"] = value
        return out


def _sample_thetas(theta_box: Tuple[Theta, Theta], n: int, rng: np.random.Generator) -> List[Theta]:
    low, high = theta_box
    if low.p != high.p or low.b != high.b:
        raise ConfigurationError("theta box corners have different dimensions")
    thetas = []
    for _ in range(n):
        beta = rng.uniform(low.beta, high.beta) if low.b else np.zeros(0)
        lam = np.tril(rng.uniform(low.lam, high.lam))
        np.fill_diagonal(lam, np.abs(np.diag(lam)))
        sigma2 = float(rng.uniform(low.sigma2, high.sigma2))
        thetas.append(Theta(beta=beta, lam=lam, sigma2=sigma2))
    return thetas


def ratio_criterion_check(
    model: ModelSpec,
    theta_box: Tuple[Theta, Theta],
    epsilon: float,
    radius_grid: Sequence[float],
    n_directions: int,
    rng: np.random.Generator,
    x: Optional[np.ndarray] = None,
    n_theta: int = 20,
) -> RatioCriterionReport:
    """
    Sample sup |g(x, beta, Lambda xi)| / |xi| outside balls of growing radius.

    Directions are uniform on the unit sphere; theta is sampled uniformly in
    the box. The reported radius is the smallest grid radius beyond which every
    sampled ratio is <= epsilon.
    """
    if epsilon <= 0:
        raise ConfigurationError(f"epsilon must be > 0, got {epsilon}")
    radii = sorted(float(r) for r in radius_grid)
    if not radii or radii[0] < 0:
        raise ConfigurationError("radius grid must be nonempty and nonnegative")
    x = np.asarray(x if x is not None else np.ones((1, model.n_covariates)), dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    directions = rng.standard_normal((n_directions, model.p))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    thetas = _sample_thetas(theta_box, n_theta, rng)

    sup_by_radius: Dict[float, float] = {}
    for radius in radii:
        if radius == 0.0:
            sup_by_radius[radius] = 0.0
            continue
        xi = radius * directions
        worst = 0.0
        for theta in thetas:
            g = model.evaluate(x, theta.beta, xi @ theta.lam.T)
            worst = max(worst, float(np.max(np.abs(g))) / radius)
        sup_by_radius[radius] = worst

    tail_sup: Dict[float, float] = {}
    running = 0.0
    for radius in reversed(radii):
        running = max(running, sup_by_radius[radius])
        tail_sup[radius] = running
    tail_sup = dict(sorted(tail_sup.items()))

    found = next((r for r in radii if tail_sup[r] <= epsilon), None)
    if found is None:
        note = "criterion not numerically supported on this grid"
    else:
        note = f"sampled ratios stay <= {epsilon:g} beyond radius {found:g} (numeric evidence only)"
    return RatioCriterionReport(
        supported=found is not None,
        radius=found,
        epsilon=epsilon,
        sup_by_radius=sup_by_radius,
        tail_sup=tail_sup,
        note=note,
    )
