"""
Built-in mean functions and the model library.

Two families are provided, both vectorised over the leading axes of the scaled
random effect ``s``:

* linear-in-covariates: g = sum_k T_k(x) (beta_k + s_k), where each term T_k
  is the intercept, a covariate column or a power of one;
* logistic growth: g = (beta1 + s1) / (1 + exp(-(t - (beta2 + s2)) / (beta3 + s3))).
"""

from dataclasses import replace
from functools import partial
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from core.exceptions import ConfigurationError
from core.model import ModelSpec
from utils.text import parse_term

Term = Tuple[int, int]  # (column index or -1 for the intercept, power)

M4_DESIGN = (50.0, 287.5, 525.0, 762.0, 1000.0, 1100.0, 1200.0, 1300.0, 1400.0, 1500.0)


def term_matrix(x: np.ndarray, terms: Sequence[Term]) -> np.ndarray:
    """Evaluate the design terms on a covariate matrix, shape (J, len(terms))."""
    cols = []
    for col, power in terms:
        if col < 0:
            cols.append(np.ones(x.shape[0]))
        else:
            cols.append(x[:, col] ** power)
    return np.column_stack(cols) if cols else np.zeros((x.shape[0], 0))


def _linear_mean(
    terms: Tuple[Term, ...],
    fixed_idx: Tuple[int, ...],
    random_idx: Tuple[int, ...],
    x: np.ndarray,
    beta: np.ndarray,
    s: np.ndarray,
) -> np.ndarray:
    t = term_matrix(x, terms)
    fixed = t[:, list(fixed_idx)] @ np.asarray(beta) if fixed_idx else np.zeros(x.shape[0])
    random = np.asarray(s) @ t[:, list(random_idx)].T
    return fixed + random


def _logistic_mean(col: int, x: np.ndarray, beta: np.ndarray, s: np.ndarray) -> np.ndarray:
    s = np.asarray(s)
    t = x[:, col]
    asym = beta[0] + s[..., 0:1]
    mid = beta[1] + s[..., 1:2]
    scale = beta[2] + s[..., 2:3]
    return asym / (1.0 + np.exp(-(t - mid) / scale))


def linear_model(
    terms: Sequence[str],
    covariate_names: Sequence[str],
    fixed: Optional[Sequence[bool]] = None,
    random: Optional[Sequence[bool]] = None,
    name: str = "linear",
    lambda_structure: str = "diagonal",
) -> ModelSpec:
    """
    Linear mixed model with one coefficient per term.

    Args:
        terms: term names, e.g. ["intercept", "x1", "x1^2"]
        covariate_names: covariate column names, in dataset order
        fixed: per-term flag for a fixed effect (default: all)
        random: per-term flag for a random effect (default: all)
        name: model name used in messages
        lambda_structure: "diagonal" or "full"
    """
    names = list(covariate_names)
    parsed = []
    for term in terms:
        column, power = parse_term(term)
        if column is None:
            parsed.append((-1, 1))
        elif column not in names:
            raise ConfigurationError(f"term {term!r} uses unknown covariate {column!r}")
        else:
            parsed.append((names.index(column), power))
    fixed = list(fixed) if fixed is not None else [True] * len(parsed)
    random = list(random) if random is not None else [True] * len(parsed)
    if len(fixed) != len(parsed) or len(random) != len(parsed):
        raise ConfigurationError("fixed/random flags must match the number of terms")
    fixed_idx = tuple(k for k, flag in enumerate(fixed) if flag)
    random_idx = tuple(k for k, flag in enumerate(random) if flag)
    if not random_idx:
        raise ConfigurationError("a mixed model needs at least one random term")
    return ModelSpec(
        name=name,
        p=len(random_idx),
        b=len(fixed_idx),
        mean_fn=partial(_linear_mean, tuple(parsed), fixed_idx, random_idx),
        linear=True,
        n_covariates=len(names),
        lambda_structure=lambda_structure,
        covariate_names=tuple(names),
    )


def logistic_model(
    covariate: str = "x1",
    covariate_names: Sequence[str] = ("x1",),
    name: str = "logistic",
    beta_start: Optional[Sequence[float]] = None,
    lambda_structure: str = "diagonal",
) -> ModelSpec:
    """Logistic growth model with random asymptote, inflexion point and scale."""
    names = list(covariate_names)
    if covariate not in names:
        raise ConfigurationError(f"logistic covariate {covariate!r} not in {names}")
    return ModelSpec(
        name=name,
        p=3,
        b=3,
        mean_fn=partial(_logistic_mean, names.index(covariate)),
        linear=False,
        n_covariates=len(names),
        lambda_structure=lambda_structure,
        beta_start=tuple(beta_start) if beta_start is not None else None,
        covariate_names=tuple(names),
    )


def model_m1() -> ModelSpec:
    return linear_model(["intercept", "x1"], ["x1"], name="m1")


def model_m2() -> ModelSpec:
    return linear_model(["intercept", "x1", "x1^2"], ["x1"], name="m2")


def model_m3(p: int = 8) -> ModelSpec:
    names = [f"x{k + 1}" for k in range(p)]
    return linear_model(names, names, fixed=[False] * p, name="m3")


def model_m4(beta_start: Sequence[float] = (200.0, 500.0, 150.0)) -> ModelSpec:
    return logistic_model(name="m4", beta_start=beta_start)


def zero_model(p: int = 1) -> ModelSpec:
    """g identically zero; a degenerate reference model for regularity checks."""
    return ModelSpec(
        name="zero",
        p=p,
        b=0,
        mean_fn=lambda x, beta, s: np.zeros(np.shape(s)[:-1] + (x.shape[0],)),
        linear=True,
    )


BUILTIN_MODELS = ("m1", "m2", "m3", "m4", "coucal")


def builtin_model(name: str) -> ModelSpec:
    if name == "m1":
        return model_m1()
    if name == "m2":
        return model_m2()
    if name == "m3":
        return model_m3()
    if name == "m4":
        return model_m4()
    if name == "coucal":
        return logistic_model(
            covariate="age", covariate_names=("age",), name="coucal", beta_start=(110.0, 7.0, 2.5)
        )
    raise ConfigurationError(f"unknown built-in model {name!r}; choose from {', '.join(BUILTIN_MODELS)}")


def model_from_config(section: Dict[str, Any], covariate_names: Sequence[str]) -> ModelSpec:
    """
    Model from a YAML mapping.

    ``mean: linear`` takes ``terms`` plus optional ``fixed``/``random`` flags;
    ``mean: logistic`` takes ``covariate``. Both accept ``structure`` and
    ``beta_start``.
    """
    mean = section.get("mean")
    structure = section.get("structure", "diagonal")
    name = section.get("name", mean or "model")
    if mean == "linear":
        if not section.get("terms"):
            raise ConfigurationError("linear model config needs a 'terms' list")
        model = linear_model(
            section["terms"],
            covariate_names,
            fixed=section.get("fixed"),
            random=section.get("random"),
            name=name,
            lambda_structure=structure,
        )
        if section.get("beta_start") is not None:
            model = replace(model, beta_start=tuple(float(v) for v in section["beta_start"]))
        return model
    if mean == "logistic":
        return logistic_model(
            covariate=section.get("covariate", covariate_names[0] if covariate_names else "x1"),
            covariate_names=covariate_names,
            name=name,
            beta_start=section.get("beta_start"),
            lambda_structure=structure,
        )
    raise ConfigurationError(f"model 'mean' must be linear or logistic, got {mean!r}")
