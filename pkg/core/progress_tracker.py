#!/usr/bin/env python3
"""
Progress Tracker for vctest.
Console progress bar with elapsed time and ETA for long replicate loops.
"""

import shutil
import sys
import threading
import time
from typing import Optional

from core.config_manager import get_config


def format_duration(seconds: float) -> str:
    """Format time in a human-readable format."""
    if seconds < 60:
        return f"{seconds:.1f}s"
    if seconds < 3600:
        return f"{seconds / 60:.1f}m"
    return f"{seconds / 3600:.1f}h"


class ProgressTracker:
    """Tracks completed/failed tasks and redraws a bar from a background thread."""

    BAR_LENGTH = 30

    def __init__(self, enabled: Optional[bool] = None, stream=None):
        progress_config = get_config().get("performance.progress", {}) or {}
        self.stream = stream or sys.stderr
        if enabled is None:
            enabled = progress_config.get("enabled", True) and self.stream.isatty()
        self.enabled = enabled
        self.update_interval = float(progress_config.get("update_interval", 1))
        self.show_eta = progress_config.get("show_eta", True)

        self.label = ""
        self.total_tasks = 0
        self.completed_tasks = 0
        self.failed_tasks = 0
        self.start_time: Optional[float] = None

        self._lock = threading.Lock()
        self._stop_event = threading.Event()
        self._update_thread: Optional[threading.Thread] = None

    def _calculate_eta(self) -> Optional[float]:
        done = self.completed_tasks + self.failed_tasks
        if not self.start_time or done == 0:
            return None
        rate = done / (time.time() - self.start_time)
        return (self.total_tasks - done) / rate if rate > 0 else None

    def render(self) -> str:
        """The current progress line."""
        with self._lock:
            done = self.completed_tasks + self.failed_tasks
            fraction = done / self.total_tasks if self.total_tasks else 0.0
            filled = int(self.BAR_LENGTH * fraction)
            bar = "#" * filled + "-" * (self.BAR_LENGTH - filled)
            text = f"{self.label} [{bar}] {done}/{self.total_tasks} ({100 * fraction:.1f}%)"
            if self.failed_tasks:
                text += f" | failed: {self.failed_tasks}"
            if self.start_time:
                text += f" | elapsed: {format_duration(time.time() - self.start_time)}"
                eta = self._calculate_eta() if self.show_eta else None
                if eta:
                    text += f" | ETA: {format_duration(eta)}"
        width = shutil.get_terminal_size((80, 20)).columns - 2
        return text[:width]

    def _update_loop(self) -> None:
        while not self._stop_event.wait(self.update_interval):
            self.stream.write("\r" + self.render())
            self.stream.flush()

    def start(self, total_tasks: int, label: str = "Working") -> None:
        """Reset counters and start the refresh thread."""
        with self._lock:
            self.label = label
            self.total_tasks = total_tasks
            self.completed_tasks = 0
            self.failed_tasks = 0
            self.start_time = time.time()
        if not self.enabled:
            return
        self._stop_event.clear()
        self._update_thread = threading.Thread(target=self._update_loop, daemon=True)
        self._update_thread.start()

    def complete_task(self, success: bool = True) -> None:
        with self._lock:
            if success:
                self.completed_tasks += 1
            else:
                self.failed_tasks += 1

    def callback(self, index: int, success: bool) -> None:
        """Adapter for ParallelProcessor.map's on_done hook."""
        self.complete_task(success)

    def finish(self) -> None:
        """Stop the refresh thread and print the final line."""
        self._stop_event.set()
        if self._update_thread and self._update_thread.is_alive():
            self._update_thread.join(timeout=1)
        if self.enabled:
            self.stream.write("\r" + self.render() + "\n")
            self.stream.flush()
