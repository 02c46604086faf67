"""
Report writers: key/value text reports, CSV tables, Excel workbooks and run
manifests.
"""

import hashlib
import logging
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import numpy as np
import pandas as pd
import yaml

from core import __version__
from utils.text import format_float

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def sha256_of(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class RunManifest:
    """What produced a set of outputs."""

    command: str
    seed: Optional[int] = None
    config_path: Optional[str] = None
    input_path: Optional[str] = None
    input_sha256: Optional[str] = None
    version: str = __version__
    timestamp: str = field(default_factory=lambda: datetime.now().isoformat(timespec="seconds"))
    extra: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def for_input(cls, command: str, input_path: Optional[PathLike] = None, **kwargs) -> "RunManifest":
        digest = sha256_of(input_path) if input_path else None
        return cls(
            command=command,
            input_path=str(input_path) if input_path else None,
            input_sha256=digest,
            **kwargs,
        )


class ReportExporter:
    """Writes command outputs below one directory."""

    def __init__(self, output_dir: PathLike = "results", float_format: str = "%.6g"):
        self.output_dir = Path(output_dir)
        self.float_format = float_format

    def _target(self, name: PathLike) -> Path:
        path = Path(name)
        if not path.is_absolute():
            path = self.output_dir / path
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def write_report(self, values: Dict[str, Any], name: PathLike = "report.txt") -> Path:
        """One ``key: value`` line per entry."""
        path = self._target(name)
        lines = []
        for key, value in values.items():
            if isinstance(value, (float, np.floating)):
                value = format_float(float(value), 10)
            lines.append(f"{key}: {value}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        logger.info("report written to %s", path)
        return path

    def write_lrt_star(self, lrt_star: Sequence[float], name: PathLike = "lrt_star.csv") -> Path:
        path = self._target(name)
        frame = pd.DataFrame({"replicate": np.arange(1, len(lrt_star) + 1), "lrt_star": np.asarray(lrt_star)})
        frame.to_csv(path, index=False, float_format=self.float_format)
        return path

    def write_frame(self, frame: pd.DataFrame, name: PathLike) -> Path:
        path = self._target(name)
        frame.to_csv(path, index=False, float_format=self.float_format)
        logger.info("%d rows written to %s", len(frame), path)
        return path

    def write_excel(
        self,
        sheets: Dict[str, pd.DataFrame],
        name: PathLike = "results.xlsx",
        freeze_headers: bool = True,
        add_filters: bool = True,
    ) -> Path:
        """Workbook with one sheet per frame, bold headers and sized columns."""
        path = self._target(name)
        with pd.ExcelWriter(path, engine="xlsxwriter") as writer:
            workbook = writer.book
            header_format = workbook.add_format(
                {"bold": True, "font_color": "white", "bg_color": "#366092", "border": 1}
            )
            for sheet_name, frame in sheets.items():
                sheet_name = sheet_name[:31]
                frame.to_excel(writer, sheet_name=sheet_name, index=False)
                worksheet = writer.sheets[sheet_name]
                for col_num, column in enumerate(frame.columns):
                    worksheet.write(0, col_num, column, header_format)
                    width = max(len(str(column)), int(frame[column].astype(str).str.len().max() or 0))
                    worksheet.set_column(col_num, col_num, min(width + 2, 40))
                if freeze_headers:
                    worksheet.freeze_panes(1, 0)
                if add_filters and len(frame.columns):
                    worksheet.autofilter(0, 0, len(frame), len(frame.columns) - 1)
        logger.info("Excel workbook written to %s", path)
        return path

    def write_manifest(self, manifest: RunManifest, name: PathLike = "manifest.yaml") -> Path:
        path = self._target(name)
        with open(path, "w", encoding="utf-8") as handle:
            yaml.safe_dump(asdict(manifest), handle, default_flow_style=False, sort_keys=False)
        return path
