"""
Marginal likelihood of the mixed-effects model and data simulation.

Linear models use the closed-form Gaussian marginal density
N(a + X beta, Z Gamma Z^T + sigma2 I). Nonlinear models integrate the random
effect out with (adaptive) Gauss-Hermite quadrature, or plain Monte Carlo with
common random numbers when the tensor grid would be too large.

Individuals sharing the same covariate matrix are evaluated as one batch, and
per-individual terms are always summed in dataset order so the result does not
depend on how callers schedule work.
"""

import itertools
import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import linalg
from scipy.special import logsumexp

from core.exceptions import ConfigurationError, EvaluationError, QuadratureError
from core.model import Dataset, Individual, ModelSpec, Theta

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
FD_STEP = 1e-3
INTEGRATION_METHODS = ("quadrature", "monte_carlo")


@dataclass(frozen=True)
class QuadratureConfig:
    """Numerical integration settings for nonlinear models."""

    n_nodes: int = 9
    adaptive: bool = True
    mode_tol: float = 1e-6
    mode_max_iter: int = 50
    mode_bound: float = 12.0
    max_tensor_dim: int = 5
    force_tensor: bool = False
    method: str = "quadrature"
    mc_draws: int = 2000
    mc_seed: int = 0
    use_closed_form: bool = True

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ConfigurationError("n_nodes must be >= 1")
        if self.mode_tol <= 0:
            raise ConfigurationError("mode_tol must be > 0")
        if self.method not in INTEGRATION_METHODS:
            raise ConfigurationError(
                f"integration method must be one of {INTEGRATION_METHODS}, got {self.method!r}"
            )
        if self.mc_draws < 1:
            raise ConfigurationError("mc_draws must be >= 1")

    @classmethod
    def from_config(cls, section: Optional[Dict[str, Any]] = None, **overrides) -> "QuadratureConfig":
        """Build from the ``quadrature`` section of config.yaml."""
        section = dict(section or {})
        known = {f for f in cls.__dataclass_fields__}
        values = {k: v for k, v in section.items() if k in known}
        values.update(overrides)
        return cls(**values)

    def with_nodes(self, n_nodes: int) -> "QuadratureConfig":
        return replace(self, n_nodes=n_nodes)


def effective_factor(lam: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rows of Lambda carrying randomness and a factor over the needed dimensions.

    Returns (rows, factor) with s[rows] = factor @ eta, eta ~ N(0, I_d). Zero
    rows are integrated out analytically; zero columns are dropped, and when
    more columns than rows remain the factor is reduced by a QR step.
    """
    rows = np.flatnonzero(np.any(lam != 0.0, axis=1))
    if rows.size == 0:
        return rows, np.zeros((0, 0))
    sub = lam[rows]
    cols = np.flatnonzero(np.any(sub != 0.0, axis=0))
    factor = sub[:, cols]
    if cols.size > rows.size:
        _, r = np.linalg.qr(factor.T, mode="reduced")
        signs = np.where(np.diag(r) < 0.0, -1.0, 1.0)
        factor = (signs[:, None] * r).T
    return rows, factor


class _Hermite:
    """Tensor Gauss-Hermite grid cache keyed by (n_nodes, dim)."""

    def __init__(self):
        self._cache: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray]] = {}

    def grid(self, n_nodes: int, dim: int) -> Tuple[np.ndarray, np.ndarray]:
        key = (n_nodes, dim)
        if key not in self._cache:
            nodes, weights = hermgauss(n_nodes)
            z = np.array(list(itertools.product(nodes, repeat=dim)))
            logw = np.array(
                [np.sum(np.log(w)) for w in itertools.product(weights, repeat=dim)]
            )
            self._cache[key] = (z, logw)
        return self._cache[key]


_HERMITE = _Hermite()


def _fd_offsets(dim: int, step: float) -> np.ndarray:
    """Stencil: center, +-e_k, and the four corners for every pair (k, l)."""
    offsets = [np.zeros(dim)]
    for k in range(dim):
        for sign in (1.0, -1.0):
            e = np.zeros(dim)
            e[k] = sign * step
            offsets.append(e)
    for k in range(dim):
        for l in range(k + 1, dim):
            for sk, sl in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                e = np.zeros(dim)
                e[k] = sk * step
                e[l] = sl * step
                offsets.append(e)
    return np.array(offsets)


def _fd_derivatives(values: np.ndarray, dim: int, step: float) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient and Hessian from stencil values of shape (n, n_offsets)."""
    n = values.shape[0]
    center = values[:, 0]
    grad = np.empty((n, dim))
    hess = np.empty((n, dim, dim))
    for k in range(dim):
        plus = values[:, 1 + 2 * k]
        minus = values[:, 2 + 2 * k]
        grad[:, k] = (plus - minus) / (2.0 * step)
        hess[:, k, k] = (plus - 2.0 * center + minus) / step**2
    pos = 1 + 2 * dim
    for k in range(dim):
        for l in range(k + 1, dim):
            pp, pm, mp, mm = (values[:, pos + q] for q in range(4))
            pos += 4
            hess[:, k, l] = hess[:, l, k] = (pp - pm - mp + mm) / (4.0 * step**2)
    return grad, hess


class MarginalLikelihood:
    """
    Log-likelihood l(theta) = sum_i log f_i(y_i; theta) bound to one dataset.

    Design-dependent quantities (affine decomposition of linear models, batch
    groups, Monte Carlo draws) are computed once at construction.
    """

    def __init__(
        self,
        model: ModelSpec,
        dataset: Dataset,
        quad: Optional[QuadratureConfig] = None,
    ):
        self.model = model
        self.dataset = dataset
        self.quad = quad or QuadratureConfig()
        if dataset.n_covariates != model.n_covariates:
            raise ConfigurationError(
                f"dataset has {dataset.n_covariates} covariates, model {model.name!r} "
                f"expects {model.n_covariates}"
            )
        self.closed_form = model.linear and self.quad.use_closed_form
        self._groups = []
        for x, members in dataset.design_groups():
            y = np.stack([dataset.individuals[i].y for i in members])
            ids = [dataset.individuals[i].id for i in members]
            self._groups.append({"x": x, "members": np.array(members), "y": y, "ids": ids})
        if self.closed_form:
            for group in self._groups:
                group.update(self._affine_parts(group["x"]))
        self._mc_draws: Optional[np.ndarray] = None
        if self.quad.method == "monte_carlo" and not self.closed_form:
            rng = np.random.default_rng(self.quad.mc_seed)
            self._mc_draws = rng.standard_normal((self.quad.mc_draws, max(model.p, 1)))

    # ------------------------------------------------------------------ linear

    def _affine_parts(self, x: np.ndarray) -> Dict[str, np.ndarray]:
        """Split an affine g into offset a, fixed design X and random design Z."""
        model = self.model
        zero_b = np.zeros(model.b)
        zero_s = np.zeros(model.p)
        a = model.evaluate(x, zero_b, zero_s)
        X = np.column_stack(
            [model.evaluate(x, np.eye(model.b)[k], zero_s) - a for k in range(model.b)]
        ) if model.b else np.zeros((x.shape[0], 0))
        Z = np.column_stack(
            [model.evaluate(x, zero_b, np.eye(model.p)[k]) - a for k in range(model.p)]
        )
        trial_b = np.linspace(0.5, 1.5, model.b)
        trial_s = np.linspace(-0.7, 0.9, model.p)
        expected = a + X @ trial_b + Z @ trial_s
        actual = model.evaluate(x, trial_b, trial_s)
        if not np.allclose(actual, expected, rtol=1e-8, atol=1e-8):
            raise ConfigurationError(
                f"model {model.name!r} is flagged linear but its mean function is not affine"
            )
        return {"a": a, "X": X, "Z": Z}

    def _closed_form_group(self, group: Dict[str, Any], theta: Theta, gamma: np.ndarray) -> np.ndarray:
        mean = group["a"] + group["X"] @ theta.beta
        Z = group["Z"]
        J = Z.shape[0]
        V = Z @ gamma @ Z.T + theta.sigma2 * np.eye(J)
        try:
            chol = linalg.cholesky(V, lower=True)
        except linalg.LinAlgError:
            raise QuadratureError(
                f"marginal covariance not positive definite for individual {group['ids'][0]}"
            ) from None
        resid = group["y"] - mean
        white = linalg.solve_triangular(chol, resid.T, lower=True)
        quad_form = np.sum(white**2, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(chol)))
        return -0.5 * (J * LOG_2PI + logdet + quad_form)

    # --------------------------------------------------------------- nonlinear

    def _scaled(self, eta: np.ndarray, rows: np.ndarray, factor: np.ndarray) -> np.ndarray:
        s = np.zeros(eta.shape[:-1] + (self.model.p,))
        if rows.size:
            s[..., rows] = eta @ factor.T
        return s

    def _conditional(
        self,
        group: Dict[str, Any],
        theta: Theta,
        eta: np.ndarray,
        rows: np.ndarray,
        factor: np.ndarray,
        strict: bool,
    ) -> np.ndarray:
        """log f(y | eta) for eta of shape (n, m, d); returns (n, m)."""
        s = self._scaled(eta, rows, factor)
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            mu = np.asarray(self.model.mean_fn(group["x"], theta.beta, s), dtype=float)
        finite = np.all(np.isfinite(mu), axis=-1)
        if strict and not np.all(finite):
            bad = int(np.flatnonzero(~np.all(finite, axis=-1))[0])
            raise EvaluationError(
                f"mean function {self.model.name!r} returned a non-finite value "
                f"for individual {group['ids'][bad]}",
                x=group["x"],
                beta=theta.beta,
                s=s[bad],
                individual_id=group["ids"][bad],
            )
        y = group["y"][:, None, :]
        J = y.shape[-1]
        with np.errstate(invalid="ignore", over="ignore"):
            sq = np.sum((y - mu) ** 2, axis=-1)
        out = -0.5 * (sq / theta.sigma2 + J * (LOG_2PI + np.log(theta.sigma2)))
        return np.where(finite, out, -np.inf)

    def _joint(self, group, theta, eta, rows, factor, strict=False) -> np.ndarray:
        prior = -0.5 * np.sum(eta**2, axis=-1) - 0.5 * eta.shape[-1] * LOG_2PI
        return self._conditional(group, theta, eta, rows, factor, strict) + prior

    def _find_modes(self, group, theta, rows, factor) -> Tuple[np.ndarray, np.ndarray]:
        """Batched damped Newton search for the conditional modes and Hessians."""
        n = group["y"].shape[0]
        d = factor.shape[1]
        quad = self.quad
        offsets = _fd_offsets(d, FD_STEP)
        alphas = np.array([1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.0])
        eta = np.zeros((n, d))
        hess = -np.tile(np.eye(d), (n, 1, 1))
        for _ in range(quad.mode_max_iter):
            values = self._joint(group, theta, eta[:, None, :] + offsets[None], rows, factor)
            if not np.all(np.isfinite(values)):
                break
            grad, hess = _fd_derivatives(values, d, FD_STEP)
            w, q = np.linalg.eigh(hess)
            w = -np.maximum(np.abs(w), 1e-6)
            step = -np.einsum("nij,nj,nkj,nk->ni", q, 1.0 / w, q, grad)
            trial = eta[:, None, :] + alphas[None, :, None] * step[:, None, :]
            trial = np.clip(trial, -quad.mode_bound, quad.mode_bound)
            scores = self._joint(group, theta, trial, rows, factor)
            best = np.argmax(np.where(np.isfinite(scores), scores, -np.inf), axis=1)
            moved = trial[np.arange(n), best] - eta
            eta = trial[np.arange(n), best]
            if np.max(np.abs(moved)) < quad.mode_tol:
                break
        values = self._joint(group, theta, eta[:, None, :] + offsets[None], rows, factor)
        if np.all(np.isfinite(values)):
            _, hess = _fd_derivatives(values, d, FD_STEP)
        return eta, hess

    def _quadrature_group(self, group, theta, rows, factor) -> np.ndarray:
        n = group["y"].shape[0]
        d = factor.shape[1]
        quad = self.quad
        if d > quad.max_tensor_dim and not quad.force_tensor:
            raise QuadratureError(
                f"tensor quadrature over {d} dimensions refused "
                f"({quad.n_nodes}^{d} nodes); use method=monte_carlo or force_tensor"
            )
        z, logw = _HERMITE.grid(quad.n_nodes, d)
        centers = np.zeros((n, d))
        chols = np.tile(np.eye(d), (n, 1, 1))
        if quad.adaptive:
            modes, hess = self._find_modes(group, theta, rows, factor)
            for i in range(n):
                precision = -0.5 * (hess[i] + hess[i].T)
                try:
                    cov_chol = np.linalg.cholesky(np.linalg.inv(precision))
                except np.linalg.LinAlgError:
                    logger.debug("non-concave mode for %s; plain quadrature", group["ids"][i])
                    continue
                if not np.all(np.isfinite(cov_chol)):
                    continue
                centers[i] = modes[i]
                chols[i] = cov_chol
        nodes = centers[:, None, :] + np.sqrt(2.0) * np.einsum("nij,mj->nmi", chols, z)
        joint = self._joint(group, theta, nodes, rows, factor, strict=True)
        log_jac = 0.5 * d * np.log(2.0) + np.sum(
            np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1
        )
        terms = logw[None, :] + joint + np.sum(z**2, axis=1)[None, :]
        values = log_jac + logsumexp(terms, axis=1)
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise QuadratureError(
                f"integrated density underflowed to zero for individual {group['ids'][bad]} "
                f"(max log term {np.max(terms[bad]):.3g})",
                individual_id=group["ids"][bad],
            )
        return values

    def _monte_carlo_group(self, group, theta, rows, factor) -> np.ndarray:
        d = factor.shape[1]
        draws = self._mc_draws[:, :d]
        n = group["y"].shape[0]
        eta = np.broadcast_to(draws[None], (n,) + draws.shape)
        cond = self._conditional(group, theta, eta, rows, factor, strict=True)
        values = logsumexp(cond, axis=1) - np.log(draws.shape[0])
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise QuadratureError(
                f"Monte Carlo density underflowed for individual {group['ids'][bad]}",
                individual_id=group["ids"][bad],
            )
        return values

    def _no_random_group(self, group, theta) -> np.ndarray:
        eta = np.zeros((group["y"].shape[0], 1, 0))
        return self._conditional(group, theta, eta, np.array([], dtype=int), np.zeros((0, 0)), True)[:, 0]

    # ------------------------------------------------------------------ public

    def individual_values(self, theta: Theta) -> np.ndarray:
        """log f_i(y_i; theta) for every individual, in dataset order."""
        self.model.check_theta(theta)
        if theta.sigma2 <= 0.0:
            raise ConfigurationError("sigma2 must be > 0 to evaluate the likelihood")
        out = np.empty(self.dataset.n_individuals)
        if self.closed_form:
            gamma = theta.lam @ theta.lam.T
            for group in self._groups:
                out[group["members"]] = self._closed_form_group(group, theta, gamma)
            return out
        rows, factor = effective_factor(theta.lam)
        for group in self._groups:
            if factor.shape[1] == 0:
                values = self._no_random_group(group, theta)
            elif self.quad.method == "monte_carlo":
                values = self._monte_carlo_group(group, theta, rows, factor)
            else:
                values = self._quadrature_group(group, theta, rows, factor)
            out[group["members"]] = values
        return out

    def __call__(self, theta: Theta) -> float:
        values = self.individual_values(theta)
        total = 0.0
        for v in values:  # fixed order keeps the sum bit-stable
            total += float(v)
        return total


def individual_loglik(
    model: ModelSpec,
    individual: Individual,
    theta: Theta,
    quad: Optional[QuadratureConfig] = None,
) -> float:
    """log f_i(y_i; theta) for a single individual."""
    return MarginalLikelihood(model, Dataset((individual,)), quad)(theta)


def loglik(
    model: ModelSpec,
    dataset: Dataset,
    theta: Theta,
    quad: Optional[QuadratureConfig] = None,
) -> float:
    """Marginal log-likelihood summed over individuals."""
    return MarginalLikelihood(model, dataset, quad)(theta)


def monte_carlo_loglik(
    model: ModelSpec,
    individual: Individual,
    theta: Theta,
    n_draws: int,
    rng: np.random.Generator,
    chunk: int = 100_000,
) -> Tuple[float, float]:
    """
    Plain Monte Carlo estimate of log f_i and its delta-method standard error.

    Draws xi ~ N(0, I_p) directly; used as an independent check of quadrature.
    """
    model.check_theta(theta)
    log_dens: List[np.ndarray] = []
    remaining = n_draws
    while remaining > 0:
        size = min(chunk, remaining)
        xi = rng.standard_normal((size, model.p))
        mu = model.evaluate(individual.x, theta.beta, xi @ theta.lam.T, individual.id)
        sq = np.sum((individual.y[None, :] - mu) ** 2, axis=1)
        J = individual.n_obs
        log_dens.append(-0.5 * (sq / theta.sigma2 + J * (LOG_2PI + np.log(theta.sigma2))))
        remaining -= size
    logf = np.concatenate(log_dens)
    shift = np.max(logf)
    f = np.exp(logf - shift)
    mean = float(np.mean(f))
    se = float(np.std(f, ddof=1) / np.sqrt(n_draws)) if n_draws > 1 else float("inf")
    return float(shift + np.log(mean)), se / mean


def simulate_dataset(
    model: ModelSpec,
    theta: Theta,
    design: Sequence[np.ndarray],
    rng: np.random.Generator,
    ids: Optional[Sequence[str]] = None,
) -> Dataset:
    """
    Draw y_ij = g(x_ij, beta, Lambda xi_i) + eps_ij for every individual.

    For each individual in order, xi_i ~ N(0, I_p) is drawn first, then the
    J_i residuals, so a seeded generator reproduces the dataset exactly.
    """
    model.check_theta(theta)
    sigma = np.sqrt(theta.sigma2)
    ids = list(ids) if ids is not None else [str(i + 1) for i in range(len(design))]
    individuals = []
    for ind_id, x in zip(ids, design):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        xi = rng.standard_normal(model.p)
        mu = model.evaluate(x, theta.beta, theta.lam @ xi, ind_id)
        eps = rng.standard_normal(x.shape[0])
        individuals.append(Individual(ind_id, mu + sigma * eps, x))
    return Dataset(tuple(individuals))


def simulate_like(
    model: ModelSpec, theta: Theta, dataset: Dataset, rng: np.random.Generator
) -> Dataset:
    """Simulate new responses on the covariates and ids of an existing dataset."""
    return simulate_dataset(
        model,
        theta,
        dataset.covariate_design(),
        rng,
        ids=[ind.id for ind in dataset.individuals],
    )
