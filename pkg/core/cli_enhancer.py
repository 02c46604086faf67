#!/usr/bin/env python3
"""
CLI Enhancer for vctest.
Formatted console output: headers, sections, status lines and tables.
"""

import shutil
import sys
from typing import Any, Dict, List, Optional, TextIO

from utils.text import format_float


class CLIEnhancer:
    """Console formatting with colour only when writing to a terminal."""

    def __init__(self, stream: Optional[TextIO] = None):
        self.stream = stream or sys.stdout
        self.terminal_width = min(shutil.get_terminal_size((80, 20)).columns, 100)

        self.colors = {
            "reset": "\033[0m",
            "bold": "\033[1m",
            "dim": "\033[2m",
            "red": "\033[31m",
            "green": "\033[32m",
            "yellow": "\033[33m",
            "blue": "\033[34m",
            "cyan": "\033[36m",
        }

    def _print(self, text: str = "") -> None:
        print(text, file=self.stream)

    def _colorize(self, text: str, color: str) -> str:
        """Apply color to text."""
        if not getattr(self.stream, "isatty", lambda: False)():
            return text
        return f"{self.colors.get(color, '')}{text}{self.colors['reset']}"

    def print_header(self, title: str, subtitle: Optional[str] = None) -> None:
        """Print a formatted header."""
        border = "=" * self.terminal_width
        self._print()
        self._print(self._colorize(border, "cyan"))
        self._print(self._colorize(title.center(self.terminal_width), "bold"))
        if subtitle:
            self._print(self._colorize(subtitle.center(self.terminal_width), "dim"))
        self._print(self._colorize(border, "cyan"))

    def print_section(self, title: str) -> None:
        """Print a section header."""
        self._print()
        self._print(self._colorize(f"📋 {title}", "bold"))
        self._print(self._colorize("-" * (len(title) + 4), "dim"))

    def print_success(self, message: str) -> None:
        self._print(self._colorize(f"✅ {message}", "green"))

    def print_warning(self, message: str) -> None:
        self._print(self._colorize(f"⚠️  {message}", "yellow"))

    def print_error(self, message: str) -> None:
        self._print(self._colorize(f"❌ {message}", "red"))

    def print_key_values(self, values: Dict[str, Any], title: Optional[str] = None) -> None:
        """Aligned ``key : value`` lines; floats in compact form."""
        if title:
            self.print_section(title)
        if not values:
            return
        width = max(len(str(k)) for k in values)
        for key, value in values.items():
            shown = format_float(value) if isinstance(value, float) else value
            self._print(f"  {str(key).ljust(width)} : {shown}")

    def print_table(self, headers: List[str], rows: List[List[Any]], title: Optional[str] = None) -> None:
        """Print a formatted table."""
        if not rows:
            return
        if title:
            self._print()
            self._print(self._colorize(title, "bold"))

        cells = [[format_float(c) if isinstance(c, float) else str(c) for c in row] for row in rows]
        col_widths = [len(h) for h in headers]
        for row in cells:
            for i, cell in enumerate(row[: len(col_widths)]):
                col_widths[i] = max(col_widths[i], len(cell))

        header_row = " | ".join(h.ljust(col_widths[i]) for i, h in enumerate(headers))
        self._print(self._colorize(header_row, "bold"))
        self._print(self._colorize("-" * len(header_row), "dim"))
        for row in cells:
            padded = [cell.ljust(col_widths[i]) for i, cell in enumerate(row[: len(col_widths)])]
            self._print(" | ".join(padded))

    def show_export_summary(self, paths: Dict[str, str]) -> None:
        """List the files written by a command."""
        self.print_section("Outputs")
        for label, path in paths.items():
            self._print(f"  {label}: {path}")

