"""
Mixed-effects model representation.

Holds the parameter type (fixed effects, lower-triangular scaling factor of the
random effects, residual variance), the model specification built around a
mean function g, the longitudinal dataset structures and the null-space
description used by variance component tests.

Mean function contract
----------------------
``mean_fn(x, beta, s)`` receives the covariate matrix of one individual
``x`` with shape ``(J, k)``, the fixed effects ``beta`` with shape ``(b,)`` and
scaled random effects ``s`` with shape ``(..., p)``; it returns the predicted
means with shape ``(..., J)``. It must be pure and reentrant: likelihood
evaluations call it from several threads at once.
"""

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.exceptions import ConfigurationError, EvaluationError, SchemaError

MeanFunction = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

SIGMA2_FLOOR = 1e-6
LAMBDA_STRUCTURES = ("diagonal", "full")


def _frozen(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    if arr.ndim != ndim:
        arr = arr.reshape((-1,) if ndim == 1 else arr.shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Theta:
    """Full parameter (beta, Lambda, sigma2); immutable once built."""

    beta: np.ndarray
    lam: np.ndarray
    sigma2: float

    def __post_init__(self):
        beta = _frozen(np.atleast_1d(self.beta) if np.size(self.beta) else [], 1)
        lam = np.array(self.lam, dtype=float, copy=True)
        if lam.ndim == 0:
            lam = lam.reshape(1, 1)
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
            raise ConfigurationError(f"lambda must be a square matrix, got {lam.shape}")
        if not np.all(np.isfinite(lam)) or not np.all(np.isfinite(beta)):
            raise ConfigurationError("theta contains non-finite entries")
        if np.any(np.triu(lam, k=1) != 0.0):
            raise ConfigurationError("lambda must be lower triangular")
        if np.any(np.diag(lam) < 0.0):
            raise ConfigurationError(
                f"lambda diagonal must be nonnegative, got {np.diag(lam).tolist()}"
            )
        sigma2 = float(self.sigma2)
        if not np.isfinite(sigma2) or sigma2 < SIGMA2_FLOOR:
            raise ConfigurationError(f"sigma2 must be finite and >= {SIGMA2_FLOOR:g}, got {sigma2}")
        lam.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def p(self) -> int:
        return self.lam.shape[0]

    @property
    def b(self) -> int:
        return self.beta.shape[0]

    @property
    def gamma(self) -> np.ndarray:
        return gamma_of(self)

    def replace(self, beta=None, lam=None, sigma2=None) -> "Theta":
        """Copy with some components swapped."""
        return Theta(
            beta=self.beta if beta is None else beta,
            lam=self.lam if lam is None else lam,
            sigma2=self.sigma2 if sigma2 is None else sigma2,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, Theta):
            return NotImplemented
        return (
            np.array_equal(self.beta, other.beta)
            and np.array_equal(self.lam, other.lam)
            and self.sigma2 == other.sigma2
        )

    __hash__ = None  # type: ignore[assignment]

    def as_dict(self) -> Dict[str, float]:
        """Flat, ordered name -> value view used by reports."""
        out: Dict[str, float] = {}
        for k, v in enumerate(self.beta, start=1):
            out[f"beta{k}"] = float(v)
        for i in range(self.p):
            for j in range(i + 1):
                out[f"lambda{i + 1}{j + 1}"] = float(self.lam[i, j])
        out["sigma2"] = self.sigma2
        return out


def gamma_of(theta: Theta) -> np.ndarray:
    """Covariance of the scaled random effect, Gamma = Lambda Lambda^T."""
    lam = theta.lam
    gamma = lam @ lam.T
    return 0.5 * (gamma + gamma.T)


def psd_factor(gamma: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """
    Lower-triangular factor with nonnegative diagonal of a PSD matrix.

    Zero pivots produce zero columns, so singular matrices (variances exactly
    zero) are factorised without perturbation.

    Raises:
        ConfigurationError: if ``gamma`` is not positive semi-definite.
    """
    g = np.asarray(gamma, dtype=float)
    p = g.shape[0]
    scale = max(1.0, float(np.max(np.abs(np.diag(g))))) if p else 1.0
    lam = np.zeros_like(g)
    for j in range(p):
        d = g[j, j] - np.dot(lam[j, :j], lam[j, :j])
        if d < -tol * scale * 1e3:
            raise ConfigurationError(
                f"covariance matrix is not positive semi-definite (pivot {j + 1} = {d:.3g})"
            )
        if d <= tol * scale:
            for i in range(j + 1, p):
                resid = g[i, j] - np.dot(lam[i, :j], lam[j, :j])
                if abs(resid) > 1e3 * tol * scale + 1e-9 * scale:
                    raise ConfigurationError(
                        "covariance matrix is not positive semi-definite "
                        f"(zero variance {j + 1} with nonzero covariance to {i + 1})"
                    )
            continue
        lam[j, j] = np.sqrt(d)
        for i in range(j + 1, p):
            lam[i, j] = (g[i, j] - np.dot(lam[i, :j], lam[j, :j])) / lam[j, j]
    return lam


def theta_from_gamma(beta, gamma: np.ndarray, sigma2: float) -> Theta:
    """Build a Theta whose Lambda factorises ``gamma``."""
    return Theta(beta=beta, lam=psd_factor(gamma), sigma2=sigma2)


@dataclass(frozen=True)
class TestSpec:
    """Which rows of Lambda (1-based) carry the tested variance components."""

    __test__ = False  # not a pytest class

    tested_rows: Tuple[int, ...]

    def __post_init__(self):
        rows = tuple(int(r) for r in self.tested_rows)
        if not rows:
            raise ConfigurationError("tested_rows must not be empty")
        if len(set(rows)) != len(rows):
            raise ConfigurationError(f"tested_rows must be distinct, got {rows}")
        if min(rows) < 1:
            raise ConfigurationError(f"tested_rows are 1-based, got {rows}")
        object.__setattr__(self, "tested_rows", rows)

    @property
    def r(self) -> int:
        return len(self.tested_rows)

    def validate(self, p: int) -> None:
        bad = [row for row in self.tested_rows if row > p]
        if bad:
            raise ConfigurationError(
                f"tested rows {bad} out of range for a model with p={p} random effects"
            )

    def zero_based(self) -> Tuple[int, ...]:
        return tuple(r - 1 for r in self.tested_rows)

    def untested(self, p: int) -> Tuple[int, ...]:
        self.validate(p)
        tested = set(self.zero_based())
        return tuple(k for k in range(p) if k not in tested)

    def canonical_order(self, p: int) -> Tuple[int, ...]:
        """Untested rows first (in order), tested rows last (ascending)."""
        return self.untested(p) + tuple(sorted(self.zero_based()))

    def contains(self, theta: Theta) -> bool:
        """True when theta lies in the null space."""
        self.validate(theta.p)
        return not np.any(theta.lam[list(self.zero_based()), :] != 0.0)


def project_to_null(theta: Theta, spec: TestSpec) -> Theta:
    """Zero every entry of the tested rows of Lambda."""
    spec.validate(theta.p)
    lam = np.array(theta.lam)
    lam[list(spec.zero_based()), :] = 0.0
    return theta.replace(lam=lam)


def _permuted_mean(
    fn: MeanFunction, inverse: np.ndarray, x: np.ndarray, beta: np.ndarray, s: np.ndarray
) -> np.ndarray:
    return fn(x, beta, np.asarray(s)[..., inverse])


@dataclass(frozen=True)
class ModelSpec:
    """A mixed-effects model y_ij = g(x_ij, beta, Lambda xi_i) + eps_ij."""

    name: str
    p: int
    b: int
    mean_fn: MeanFunction
    linear: bool = False
    n_covariates: int = 1
    lambda_structure: str = "diagonal"
    beta_start: Optional[Tuple[float, ...]] = None
    covariate_names: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.p < 0 or self.b < 0:
            raise ConfigurationError("p and b must be nonnegative")
        if self.lambda_structure not in LAMBDA_STRUCTURES:
            raise ConfigurationError(
                f"lambda_structure must be one of {LAMBDA_STRUCTURES}, "
                f"got {self.lambda_structure!r}"
            )
        if self.beta_start is not None and len(self.beta_start) != self.b:
            raise ConfigurationError("beta_start length must equal b")
        if not self.covariate_names:
            names = tuple(f"x{k + 1}" for k in range(self.n_covariates))
            object.__setattr__(self, "covariate_names", names)

    def evaluate(
        self,
        x: np.ndarray,
        beta: np.ndarray,
        s: np.ndarray,
        individual_id: Optional[str] = None,
    ) -> np.ndarray:
        """Vectorised g with the finiteness contract enforced."""
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            out = np.asarray(self.mean_fn(x, beta, s), dtype=float)
        if not np.all(np.isfinite(out)):
            raise EvaluationError(
                f"mean function {self.name!r} returned a non-finite value"
                + (f" for individual {individual_id}" if individual_id else ""),
                x=x,
                beta=beta,
                s=s,
                individual_id=individual_id,
            )
        return out

    def permuted(self, order: Sequence[int]) -> "ModelSpec":
        """Same model with random effects reordered: new effect j is old effect order[j]."""
        order = np.asarray(order, dtype=int)
        if sorted(order.tolist()) != list(range(self.p)):
            raise ConfigurationError(f"invalid random-effect permutation {order.tolist()}")
        if np.array_equal(order, np.arange(self.p)):
            return self
        inverse = np.argsort(order)
        return ModelSpec(
            name=self.name,
            p=self.p,
            b=self.b,
            mean_fn=partial(_permuted_mean, self.mean_fn, inverse),
            linear=self.linear,
            n_covariates=self.n_covariates,
            lambda_structure=self.lambda_structure,
            beta_start=self.beta_start,
            covariate_names=self.covariate_names,
        )

    def with_structure(self, structure: str) -> "ModelSpec":
        return ModelSpec(
            name=self.name,
            p=self.p,
            b=self.b,
            mean_fn=self.mean_fn,
            linear=self.linear,
            n_covariates=self.n_covariates,
            lambda_structure=structure,
            beta_start=self.beta_start,
            covariate_names=self.covariate_names,
        )

    def check_theta(self, theta: Theta) -> None:
        if theta.p != self.p or theta.b != self.b:
            raise ConfigurationError(
                f"theta has p={theta.p}, b={theta.b}; model {self.name!r} "
                f"expects p={self.p}, b={self.b}"
            )


def mean_eval(model: ModelSpec, x, beta, s) -> float:
    """Evaluate g at a single covariate vector."""
    x_row = np.atleast_2d(np.asarray(x, dtype=float))
    beta = np.asarray(beta, dtype=float).reshape(-1)
    s = np.asarray(s, dtype=float).reshape(-1)
    if s.shape[0] != model.p or beta.shape[0] != model.b:
        raise ConfigurationError(
            f"mean_eval dimensions do not match model {model.name!r}: "
            f"len(beta)={beta.shape[0]}, len(s)={s.shape[0]}"
        )
    return float(model.evaluate(x_row, beta, s)[0])


def permute_theta(theta: Theta, order: Sequence[int]) -> Theta:
    """Express theta in the coordinates of ``ModelSpec.permuted(order)``."""
    idx = np.asarray(order, dtype=int)
    lam = theta.lam[np.ix_(idx, idx)]
    if np.any(np.triu(lam, k=1) != 0.0):
        lam = psd_factor(gamma_of(theta)[np.ix_(idx, idx)])
    return theta.replace(lam=lam)


def unpermute_theta(theta: Theta, order: Sequence[int]) -> Theta:
    """Inverse of permute_theta."""
    return permute_theta(theta, np.argsort(np.asarray(order, dtype=int)))


@dataclass(frozen=True, eq=False)
class Individual:
    """One subject: responses y (J,) and covariates x (J, k)."""

    id: str
    y: np.ndarray
    x: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float, copy=True).reshape(-1)
        x = np.array(self.x, dtype=float, copy=True)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.shape[0] < 1:
            raise SchemaError(f"individual {self.id} has no observations")
        if x.shape[0] != y.shape[0]:
            raise SchemaError(
                f"individual {self.id}: {x.shape[0]} covariate rows for {y.shape[0]} responses"
            )
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
            raise SchemaError(f"individual {self.id} has non-finite values")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n_obs(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True, eq=False)
class Dataset:
    """N individuals with J_i observations each."""

    individuals: Tuple[Individual, ...]
    j_max: Optional[int] = None
    _groups: List[Tuple[np.ndarray, Tuple[int, ...]]] = field(
        default_factory=list, init=False, repr=False
    )

    def __post_init__(self):
        individuals = tuple(self.individuals)
        if not individuals:
            raise SchemaError("dataset must contain at least one individual")
        widths = {ind.x.shape[1] for ind in individuals}
        if len(widths) != 1:
            raise SchemaError(f"inconsistent covariate counts across individuals: {sorted(widths)}")
        if self.j_max is not None:
            too_long = [ind.id for ind in individuals if ind.n_obs > self.j_max]
            if too_long:
                raise SchemaError(f"individuals exceed J_max={self.j_max}: {too_long[:5]}")
        object.__setattr__(self, "individuals", individuals)
        object.__setattr__(self, "_groups", self._build_groups(individuals))

    @staticmethod
    def _build_groups(individuals) -> List[Tuple[np.ndarray, Tuple[int, ...]]]:
        keyed: Dict[Tuple, List[int]] = {}
        designs: Dict[Tuple, np.ndarray] = {}
        for i, ind in enumerate(individuals):
            key = (ind.x.shape, ind.x.tobytes())
            keyed.setdefault(key, []).append(i)
            designs.setdefault(key, ind.x)
        return [(designs[k], tuple(v)) for k, v in keyed.items()]

    def __len__(self) -> int:
        return len(self.individuals)

    def __iter__(self) -> Iterator[Individual]:
        return iter(self.individuals)

    @property
    def n_individuals(self) -> int:
        return len(self.individuals)

    @property
    def n_obs(self) -> int:
        return sum(ind.n_obs for ind in self.individuals)

    @property
    def n_covariates(self) -> int:
        return self.individuals[0].x.shape[1]

    def design_groups(self) -> List[Tuple[np.ndarray, Tuple[int, ...]]]:
        """(shared covariate matrix, member indices) in first-appearance order."""
        return self._groups

    def covariate_design(self) -> List[np.ndarray]:
        return [ind.x for ind in self.individuals]

    def with_responses(self, responses: Sequence[np.ndarray]) -> "Dataset":
        """Same ids and covariates, new y."""
        return Dataset(
            tuple(
                Individual(ind.id, y, ind.x)
                for ind, y in zip(self.individuals, responses)
            ),
            j_max=self.j_max,
        )

    def duplicated(self, times: int = 2) -> "Dataset":
        inds = []
        for t in range(times):
            for ind in self.individuals:
                inds.append(Individual(f"{ind.id}#{t}", ind.y, ind.x))
        return Dataset(tuple(inds), j_max=self.j_max)

    def to_frame(self, covariate_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
        """Long format: id, y, x1..xk."""
        names = list(covariate_names or [f"x{k + 1}" for k in range(self.n_covariates)])
        frames = []
        for ind in self.individuals:
            frame = pd.DataFrame(ind.x, columns=names)
            frame.insert(0, "y", ind.y)
            frame.insert(0, "id", ind.id)
            frames.append(frame)
        return pd.concat(frames, ignore_index=True)
