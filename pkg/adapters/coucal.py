"""
Converter from a nestling growth table (one row per weighing) to the long
dataset CSV. The source column names come from the ``coucal.columns`` config
map (target -> source), since the published package is fetched by hand.
"""

import logging
from pathlib import Path
from typing import Dict, Optional, Union

import pandas as pd

from core.config_manager import get_config
from core.exceptions import SchemaError

logger = logging.getLogger(__name__)


def convert_growth_table(
    source: Union[str, Path],
    target: Union[str, Path],
    column_map: Optional[Dict[str, str]] = None,
) -> pd.DataFrame:
    """
    Rename the mapped columns to id/y/x1..., drop incomplete rows, sort by
    individual and age, and write the result.
    """
    column_map = dict(column_map or get_config().get("coucal.columns", {}))
    if "id" not in column_map or "y" not in column_map:
        raise SchemaError("column map must name the id and y source columns")
    frame = pd.read_csv(source)
    missing = [src for src in column_map.values() if src not in frame.columns]
    if missing:
        raise SchemaError(f"source table lacks column {missing[0]!r}", column=missing[0])

    out = frame[list(column_map.values())].rename(columns={v: k for k, v in column_map.items()})
    covariates = [k for k in column_map if k not in ("id", "y")]
    before = len(out)
    out = out.dropna()
    if len(out) < before:
        logger.warning("dropped %d incomplete rows from %s", before - len(out), source)
    out = out.sort_values(["id"] + covariates[:1], kind="stable")
    out = out[["id", "y"] + covariates]
    Path(target).parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(target, index=False)
    logger.info("converted %d rows (%d individuals) to %s", len(out), out["id"].nunique(), target)
    return out
