"""
Constrained maximum likelihood over the full space and the null space.

The optimiser works on the raw parameters (beta, free entries of Lambda,
sigma2) with box bounds; diagonal entries of Lambda have lower bound 0 so the
estimate can sit exactly on the boundary. Null fits run in canonical
coordinates (tested rows last) with the tested rows removed from the search.
"""

import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize

from core.exceptions import EstimationError, VCTestError
from core.likelihood import MarginalLikelihood, QuadratureConfig
from core.model import (
    SIGMA2_FLOOR,
    Dataset,
    ModelSpec,
    TestSpec,
    Theta,
    permute_theta,
    project_to_null,
    unpermute_theta,
)

logger = logging.getLogger(__name__)

BAD_OBJECTIVE = 1e300
NESTING_TOL = 1e-8


@dataclass(frozen=True)
class FitOptions:
    """Optimiser settings shared by full and null fits."""

    max_evals: int = 4000
    x_tol: float = 1e-6
    f_tol: float = 1e-8
    n_starts: int = 3
    start_jitter: float = 0.1
    seed: int = 0
    method: str = "Nelder-Mead"
    snap_tol: float = 1e-8
    boundary_trial: float = 1e-3
    boundary_tol: float = 1e-6
    beta_bound: float = 1e6
    lambda_bound: float = 1e6
    sigma2_max: float = 1e6
    sigma2_floor: float = SIGMA2_FLOOR

    def __post_init__(self):
        if self.x_tol <= 0 or self.f_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        if self.start_jitter < 0:
            raise ValueError("start_jitter must be >= 0")
        if not SIGMA2_FLOOR <= self.sigma2_floor < self.sigma2_max:
            raise ValueError(
                f"sigma2_floor must lie in [{SIGMA2_FLOOR:g}, sigma2_max), got {self.sigma2_floor}"
            )

    @classmethod
    def from_config(cls, section: Optional[Dict[str, Any]] = None, **overrides) -> "FitOptions":
        """Build from the ``estimation`` section of config.yaml."""
        section = dict(section or {})
        bounds = section.pop("bounds", {}) or {}
        values = {k: v for k, v in section.items() if k in cls.__dataclass_fields__}
        for key, field_name in (
            ("beta", "beta_bound"),
            ("lambda", "lambda_bound"),
            ("sigma2_max", "sigma2_max"),
            ("sigma2_floor", "sigma2_floor"),
        ):
            if key in bounds:
                values[field_name] = bounds[key]
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class FitResult:
    """Outcome of one constrained maximisation."""

    theta_hat: Theta
    loglik: float
    converged: bool
    n_evals: int
    restarts_used: int

    def summary(self) -> Dict[str, Any]:
        out: Dict[str, Any] = dict(self.theta_hat.as_dict())
        out.update(
            loglik=self.loglik,
            converged=self.converged,
            n_evals=self.n_evals,
            restarts_used=self.restarts_used,
        )
        return out


class _Packer:
    """Maps Theta (canonical coordinates) to the optimiser vector and back."""

    def __init__(self, model: ModelSpec, free_rows: int, opts: FitOptions):
        self.p = model.p
        self.b = model.b
        if model.lambda_structure == "diagonal":
            self.entries = [(i, i) for i in range(free_rows)]
        else:
            self.entries = [(i, j) for i in range(free_rows) for j in range(i + 1)]
        bounds = [(-opts.beta_bound, opts.beta_bound)] * self.b
        for i, j in self.entries:
            low = 0.0 if i == j else -opts.lambda_bound
            bounds.append((low, opts.lambda_bound))
        bounds.append((opts.sigma2_floor, opts.sigma2_max))
        self.bounds = bounds
        self.lower = np.array([b[0] for b in bounds])
        self.upper = np.array([b[1] for b in bounds])

    @property
    def size(self) -> int:
        return len(self.bounds)

    def pack(self, theta: Theta) -> np.ndarray:
        lam_part = [theta.lam[i, j] for i, j in self.entries]
        vec = np.concatenate([theta.beta, lam_part, [theta.sigma2]])
        return np.clip(vec, self.lower, self.upper)

    def unpack(self, vec: np.ndarray) -> Theta:
        vec = np.clip(np.asarray(vec, dtype=float), self.lower, self.upper)
        lam = np.zeros((self.p, self.p))
        for value, (i, j) in zip(vec[self.b : self.b + len(self.entries)], self.entries):
            lam[i, j] = value
        return Theta(beta=vec[: self.b], lam=lam, sigma2=float(vec[-1]))

    def diagonal_positions(self) -> List[int]:
        return [self.b + k for k, (i, j) in enumerate(self.entries) if i == j]

    def lambda_positions(self) -> List[int]:
        return [self.b + k for k in range(len(self.entries))]


def starting_values(model: ModelSpec, dataset: Dataset, free_rows: Optional[int] = None) -> Theta:
    """
    Heuristic start: fixed-effects least squares for beta, within-individual
    residual variance for sigma2, and between-individual residual spread
    divided across the random effects by their sensitivity for Lambda.
    """
    free_rows = model.p if free_rows is None else free_rows
    xs = [ind.x for ind in dataset.individuals]
    ys = [ind.y for ind in dataset.individuals]
    zero_s = np.zeros(model.p)

    def residuals(beta: np.ndarray) -> np.ndarray:
        parts = []
        for x, y in zip(xs, ys):
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                mu = np.asarray(model.mean_fn(x, beta, zero_s), dtype=float)
            parts.append(np.where(np.isfinite(mu), y - mu, 1e6))
        return np.concatenate(parts)

    beta0 = np.array(model.beta_start, dtype=float) if model.beta_start else np.zeros(model.b)
    if model.b:
        try:
            method = "lm" if len(residuals(beta0)) >= model.b else "trf"
            beta = optimize.least_squares(residuals, beta0, method=method).x
        except (ValueError, FloatingPointError):
            beta = beta0
    else:
        beta = beta0

    resid = [y - np.asarray(model.mean_fn(x, beta, zero_s), dtype=float) for x, y in zip(xs, ys)]
    within = [np.var(r, ddof=1) for r in resid if r.shape[0] > 1]
    total_var = float(np.var(np.concatenate(resid))) if resid else 1.0
    sigma2 = float(np.mean(within)) if within else 0.5 * total_var
    sigma2 = max(sigma2, SIGMA2_FLOOR * 10, 1e-3 * total_var)

    means = np.array([np.mean(r) for r in resid])
    j_bar = float(np.mean([r.shape[0] for r in resid]))
    between = float(np.var(means)) if means.shape[0] > 1 else total_var
    between = max(between - sigma2 / j_bar, 0.05 * max(between, total_var, 1e-6))

    lam = np.zeros((model.p, model.p))
    step = 1e-3
    for k in range(free_rows):
        e = np.zeros(model.p)
        e[k] = step
        sens = []
        for x in xs:
            with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
                diff = (
                    np.asarray(model.mean_fn(x, beta, e), dtype=float)
                    - np.asarray(model.mean_fn(x, beta, zero_s), dtype=float)
                ) / step
            sens.append(diff[np.isfinite(diff)])
        rms = float(np.sqrt(np.mean(np.concatenate(sens) ** 2))) if sens else 0.0
        lam[k, k] = np.sqrt(between / max(free_rows, 1)) / rms if rms > 1e-12 else 0.1
    if not np.all(np.isfinite(beta)):
        beta = beta0
    return Theta(beta=beta, lam=lam, sigma2=sigma2)


def _jitter(vec: np.ndarray, packer: _Packer, scale: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(vec.shape[0])
    out = vec + scale * (np.abs(vec) + 0.1) * noise
    return np.clip(out, packer.lower, packer.upper)


def _minimize(fun, x0: np.ndarray, packer: _Packer, opts: FitOptions) -> optimize.OptimizeResult:
    method = opts.method
    if method == "Nelder-Mead":
        options = {"maxfev": opts.max_evals, "xatol": opts.x_tol, "fatol": opts.f_tol, "adaptive": True}
    elif method == "Powell":
        options = {"maxfev": opts.max_evals, "xtol": opts.x_tol, "ftol": opts.f_tol}
    else:
        options = {"maxfun": opts.max_evals, "ftol": opts.f_tol}
    return optimize.minimize(fun, x0, method=method, bounds=packer.bounds, options=options)


def _fit(
    model: ModelSpec,
    dataset: Dataset,
    quad: Optional[QuadratureConfig],
    opts: FitOptions,
    spec: Optional[TestSpec],
    initial: Sequence[Theta],
) -> FitResult:
    quad = quad or QuadratureConfig()
    if spec is not None:
        spec.validate(model.p)
        order = spec.canonical_order(model.p)
        free_rows = model.p - spec.r
    else:
        order = tuple(range(model.p))
        free_rows = model.p
    model_c = model.permuted(order)
    objective_ll = MarginalLikelihood(model_c, dataset, quad)
    packer = _Packer(model_c, free_rows, opts)
    n_evals = 0

    def fun(vec: np.ndarray) -> float:
        nonlocal n_evals
        n_evals += 1
        try:
            value = objective_ll(packer.unpack(vec))
        except (VCTestError, FloatingPointError, np.linalg.LinAlgError):
            return BAD_OBJECTIVE
        return -value if np.isfinite(value) else BAD_OBJECTIVE

    starts: List[np.ndarray] = []
    for theta in initial:
        theta_c = permute_theta(theta, order)
        starts.append(packer.pack(theta_c))
    base = packer.pack(starting_values(model_c, dataset, free_rows))
    for s in range(opts.n_starts):
        if s == 0:
            starts.append(base)
        else:
            rng = np.random.default_rng([opts.seed, s])
            starts.append(_jitter(base, packer, opts.start_jitter, rng))

    best: Optional[optimize.OptimizeResult] = None
    converged = False
    for x0 in starts:
        try:
            result = _minimize(fun, x0, packer, opts)
        except (ValueError, FloatingPointError) as exc:
            logger.debug("start failed: %s", exc)
            continue
        converged = converged or bool(result.success)
        if best is None or result.fun < best.fun:
            best = result
    if best is None or best.fun >= BAD_OBJECTIVE:
        raise EstimationError(
            f"no start produced a finite likelihood for model {model.name!r} "
            f"({len(starts)} starts, {n_evals} evaluations)"
        )

    polished = _minimize(fun, best.x, packer, opts)
    if polished.fun < best.fun:
        best = polished
        converged = converged or bool(polished.success)

    vec = np.clip(best.x, packer.lower, packer.upper)
    lam_pos = packer.lambda_positions()
    vec[lam_pos] = np.where(np.abs(vec[lam_pos]) < opts.snap_tol, 0.0, vec[lam_pos])
    current = fun(vec)
    for pos in packer.diagonal_positions():
        if 0.0 < vec[pos] < opts.boundary_trial:
            trial = vec.copy()
            trial[pos] = 0.0
            value = fun(trial)
            if value <= current + opts.boundary_tol:
                vec, current = trial, value

    theta = unpermute_theta(packer.unpack(vec), order)
    if spec is not None:
        theta = project_to_null(theta, spec)
    final_ll = MarginalLikelihood(model, dataset, quad)(theta)
    logger.debug(
        "fit %s (%s): loglik=%.6f evals=%d converged=%s",
        model.name,
        "null" if spec is not None else "full",
        final_ll,
        n_evals,
        converged,
    )
    return FitResult(
        theta_hat=theta,
        loglik=final_ll,
        converged=converged,
        n_evals=n_evals,
        restarts_used=len(starts),
    )


def mle_full(
    model: ModelSpec,
    dataset: Dataset,
    quad: Optional[QuadratureConfig] = None,
    opts: Optional[FitOptions] = None,
    initial: Sequence[Theta] = (),
) -> FitResult:
    """Maximum likelihood over the full parameter space."""
    return _fit(model, dataset, quad, opts or FitOptions(), None, initial)


def mle_null(
    model: ModelSpec,
    dataset: Dataset,
    spec: TestSpec,
    quad: Optional[QuadratureConfig] = None,
    opts: Optional[FitOptions] = None,
    initial: Sequence[Theta] = (),
) -> FitResult:
    """Maximum likelihood with the tested rows of Lambda fixed at zero."""
    initial = [project_to_null(theta, spec) for theta in initial]
    return _fit(model, dataset, quad, opts or FitOptions(), spec, initial)


def fit_pair(
    model: ModelSpec,
    dataset: Dataset,
    spec: TestSpec,
    quad: Optional[QuadratureConfig] = None,
    opts: Optional[FitOptions] = None,
) -> Tuple[FitResult, FitResult]:
    """
    Full and null fits with nesting enforced.

    When the full fit ends below the null fit, it is re-run from the null
    solution; if that still fails, the null solution (which lies in the full
    space too) is adopted as the full estimate.
    """
    opts = opts or FitOptions()
    null = mle_null(model, dataset, spec, quad, opts)
    full = mle_full(model, dataset, quad, opts)
    if full.loglik < null.loglik - NESTING_TOL:
        logger.warning(
            "nesting violated (full %.8f < null %.8f); refitting from the null solution",
            full.loglik,
            null.loglik,
        )
        retry = mle_full(
            model, dataset, quad, replace(opts, n_starts=1), initial=[null.theta_hat]
        )
        if retry.loglik > full.loglik:
            full = FitResult(
                theta_hat=retry.theta_hat,
                loglik=retry.loglik,
                converged=retry.converged,
                n_evals=full.n_evals + retry.n_evals,
                restarts_used=full.restarts_used + retry.restarts_used,
            )
        if full.loglik < null.loglik:
            full = FitResult(
                theta_hat=null.theta_hat,
                loglik=null.loglik,
                converged=False,
                n_evals=full.n_evals,
                restarts_used=full.restarts_used,
            )
    return full, null
