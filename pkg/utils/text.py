"""
Text utilities for parsing command-line lists, model terms and sizes, and for
formatting numbers in reports.
"""

import re
from typing import List, Optional, Tuple, Union

SIZE_UNITS = {"B": 1, "KB": 1024, "MB": 1024**2, "GB": 1024**3}
INTERCEPT_NAMES = {"intercept", "1", "const", "(intercept)"}


def clean_whitespace(text: str) -> str:
    """
    Clean and normalize whitespace in text.

    Args:
        text: Input text

    Returns:
        Text with normalized whitespace
    """
    if not text:
        return text

    text = re.sub(r"\s+", " ", text)
    return text.strip()


def normalize_column_name(name: str) -> str:
    """Lower-case, trimmed CSV header with inner spaces turned into underscores."""
    return clean_whitespace(str(name)).lower().replace(" ", "_")


def parse_index_list(text: Union[str, int, List[int]]) -> List[int]:
    """
    Parse "2,3" or "2 3" into [2, 3].

    Raises:
        ValueError: on empty input or non-integer items
    """
    if isinstance(text, int):
        return [text]
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    items = [item for item in re.split(r"[,\s]+", str(text).strip()) if item]
    if not items:
        raise ValueError("empty index list")
    try:
        return [int(item) for item in items]
    except ValueError:
        raise ValueError(f"not a list of integers: {text!r}") from None


def parse_float_list(text: Union[str, float, List[float]]) -> List[float]:
    """Parse "0,0.24,0.9" into floats."""
    if isinstance(text, (int, float)):
        return [float(text)]
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    items = [item for item in re.split(r"[,\s]+", str(text).strip()) if item]
    if not items:
        raise ValueError("empty number list")
    try:
        return [float(item) for item in items]
    except ValueError:
        raise ValueError(f"not a list of numbers: {text!r}") from None


def parse_grid(text: str) -> List[Tuple[float, float]]:
    """Parse a power grid "0:0,0.05:0,0.1:0.5" into (variance, rho) pairs."""
    pairs = []
    for item in re.split(r"[,\s]+", str(text).strip()):
        if not item:
            continue
        variance, _, rho = item.partition(":")
        pairs.append((float(variance), float(rho) if rho else 0.0))
    if not pairs:
        raise ValueError("empty grid")
    return pairs


def parse_term(term: str) -> Tuple[Optional[str], int]:
    """
    Split a model term into (column, power).

    "intercept" -> (None, 1); "x1" -> ("x1", 1); "x1^2" -> ("x1", 2).
    """
    term = clean_whitespace(str(term))
    if term.lower() in INTERCEPT_NAMES:
        return None, 1
    match = re.fullmatch(r"([A-Za-z_][\w.]*)\s*(?:\^\s*(\d+))?", term)
    if not match:
        raise ValueError(f"cannot parse model term {term!r}")
    power = int(match.group(2)) if match.group(2) else 1
    if power < 1:
        raise ValueError(f"term power must be >= 1 in {term!r}")
    return match.group(1), power


def parse_size(text: Union[str, int]) -> int:
    """Parse "10MB" style sizes into bytes."""
    if isinstance(text, int):
        return text
    match = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([KMG]?B)?\s*", str(text).upper())
    if not match:
        raise ValueError(f"cannot parse size {text!r}")
    return int(float(match.group(1)) * SIZE_UNITS[match.group(2) or "B"])


def format_float(value: float, digits: int = 6) -> str:
    """Compact, stable float rendering for reports."""
    if value is None:
        return "NA"
    if value != value:  # NaN
        return "nan"
    return f"{value:.{digits}g}"


def format_percent(value: float, digits: int = 2) -> str:
    """0.0522 -> '5.22%'."""
    return f"{100.0 * value:.{digits}f}%"
