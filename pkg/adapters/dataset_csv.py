"""
Long-format dataset CSV: columns ``id, y, x1, ..., xk``, one row per observation.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from core.exceptions import SchemaError
from core.model import Dataset, Individual
from utils.text import normalize_column_name

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("id", "y")


def _covariate_columns(columns: Sequence[str]) -> List[str]:
    return [c for c in columns if c not in REQUIRED_COLUMNS]


def frame_to_dataset(
    frame: pd.DataFrame, covariates: Optional[Sequence[str]] = None
) -> Tuple[Dataset, List[str]]:
    """
    Build a Dataset from a long frame; individuals keep first-appearance order.

    Raises:
        SchemaError: missing or non-numeric columns, empty data
    """
    frame = frame.rename(columns=normalize_column_name)
    for column in REQUIRED_COLUMNS:
        if column not in frame.columns:
            raise SchemaError(f"missing required column {column!r}", column=column)
    if covariates:
        names = [normalize_column_name(c) for c in covariates]
    else:
        names = _covariate_columns(frame.columns)
    if not names:
        raise SchemaError("no covariate columns (expected x1, ..., xk)", column="x1")
    for column in names:
        if column not in frame.columns:
            raise SchemaError(f"missing covariate column {column!r}", column=column)
    if frame.empty:
        raise SchemaError("dataset has no rows")

    for column in ["y"] + names:
        values = pd.to_numeric(frame[column], errors="coerce")
        bad = ~np.isfinite(values.to_numpy(dtype=float))
        if bad.any():
            row = int(np.flatnonzero(bad)[0]) + 2
            raise SchemaError(
                f"column {column!r} has a missing or non-numeric value on line {row}", column=column
            )
        frame[column] = values.astype(float)

    frame["id"] = frame["id"].astype(str)
    individuals = []
    for ind_id, group in frame.groupby("id", sort=False):
        individuals.append(
            Individual(ind_id, group["y"].to_numpy(), group[names].to_numpy())
        )
    return Dataset(tuple(individuals)), names


def load_dataset(
    path: Union[str, Path], covariates: Optional[Sequence[str]] = None
) -> Tuple[Dataset, List[str]]:
    """Read a dataset CSV; returns the dataset and its covariate column names."""
    path = Path(path)
    if not path.exists():
        raise SchemaError(f"dataset file not found: {path}")
    try:
        # All columns as text: ids keep leading zeros, numbers are checked per column below
        frame = pd.read_csv(path, encoding="utf-8", dtype=str, keep_default_na=False, na_values=[""])
    except (pd.errors.EmptyDataError, pd.errors.ParserError, UnicodeDecodeError) as e:
        raise SchemaError(f"cannot parse {path}: {e}") from e
    dataset, names = frame_to_dataset(frame, covariates)
    logger.info(
        "loaded %d individuals (%d observations) from %s", dataset.n_individuals, dataset.n_obs, path
    )
    return dataset, names


def save_dataset(
    dataset: Dataset, path: Union[str, Path], covariates: Optional[Sequence[str]] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dataset.to_frame(covariates).to_csv(path, index=False, float_format="%.10g")
    return path
