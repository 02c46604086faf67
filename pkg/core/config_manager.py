#!/usr/bin/env python3
"""
Configuration Manager for vctest.
Handles loading and managing settings from YAML files and configures logging.
"""

import copy
import logging
import logging.handlers
import os
from typing import Any, Dict, List, Optional

import yaml

from utils.text import parse_size

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

DEFAULT_CONFIG: Dict[str, Any] = {
    "quadrature": {
        "n_nodes": 9,
        "adaptive": True,
        "mode_tol": 1e-6,
        "mode_max_iter": 50,
        "max_tensor_dim": 5,
        "force_tensor": False,
        "method": "quadrature",
        "mc_draws": 2000,
        "mc_seed": 0,
    },
    "estimation": {
        "method": "Nelder-Mead",
        "max_evals": 4000,
        "x_tol": 1e-6,
        "f_tol": 1e-8,
        "n_starts": 3,
        "start_jitter": 0.1,
        "seed": 0,
        "snap_tol": 1e-8,
        "boundary_trial": 1e-3,
        "bounds": {"beta": 1e6, "lambda": 1e6, "sigma2_max": 1e6, "sigma2_floor": 1e-6},
    },
    "bootstrap": {
        "B": 200,
        "c_n": "auto",
        "scope": "lambda1_and_offdiag",
        "seed_from": "null",
        "shrink_psi": False,
        "failure_budget": 0.05,
        "seed": 0,
    },
    "simulation": {
        "K": 500,
        "B": 200,
        "alpha_levels": [0.01, 0.05, 0.10],
        "seed": 2024,
    },
    "performance": {
        "parallel": {"enabled": True, "max_workers": 1, "backend": "processes", "batch_size": "auto"},
        "progress": {"enabled": True, "update_interval": 1, "show_eta": True},
    },
    "export": {
        "output_dir": "results",
        "float_format": "%.6g",
        "lrt_star_csv": True,
        "excel": {"enabled": False, "freeze_headers": True, "add_filters": True},
    },
    "coucal": {
        "columns": {"id": "nestling", "y": "mass", "age": "age"},
    },
    "logging": {
        "level": "INFO",
        "format": LOG_FORMAT,
        "console": {"enabled": True},
        "file": {
            "enabled": False,
            "filename": "vctest.log",
            "max_size": "10MB",
            "backup_count": 5,
        },
    },
}

REQUIRED_SECTIONS = ("quadrature", "estimation", "bootstrap", "simulation", "logging")


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


class ConfigManager:
    """Manages configuration settings; missing keys fall back to the defaults."""

    def __init__(self, config_path: str = "config.yaml"):
        """
        Initialize the configuration manager.

        Args:
            config_path: Path to the configuration file
        """
        self.config_path = config_path
        self.config: Dict[str, Any] = {}
        self._load_config()

    def _load_config(self) -> None:
        """Load configuration from YAML file."""
        if not os.path.exists(self.config_path):
            logger.warning("configuration file %s not found, using defaults", self.config_path)
            self.config = copy.deepcopy(DEFAULT_CONFIG)
            return
        try:
            with open(self.config_path, "r", encoding="utf-8") as file:
                loaded = yaml.safe_load(file) or {}
        except yaml.YAMLError as e:
            logger.error("error parsing %s: %s; using defaults", self.config_path, e)
            loaded = {}
        if not isinstance(loaded, dict):
            logger.error("%s is not a mapping; using defaults", self.config_path)
            loaded = {}
        self.config = _merge(DEFAULT_CONFIG, loaded)
        logger.debug("configuration loaded from %s", self.config_path)

    def get(self, key_path: str, default: Any = None) -> Any:
        """
        Get a configuration value using dot notation.

        Args:
            key_path: Dot-separated path (e.g. 'estimation.bounds.beta')
            default: Value returned if the key is missing
        """
        value: Any = self.config
        try:
            for key in key_path.split("."):
                value = value[key]
            return value
        except (KeyError, TypeError):
            return default

    def section(self, name: str) -> Dict[str, Any]:
        """A copy of one top-level section, safe to mutate."""
        return copy.deepcopy(self.get(name, {}) or {})

    def get_quadrature_config(self) -> Dict[str, Any]:
        return self.section("quadrature")

    def get_estimation_config(self) -> Dict[str, Any]:
        return self.section("estimation")

    def get_bootstrap_config(self) -> Dict[str, Any]:
        return self.section("bootstrap")

    def get_simulation_config(self) -> Dict[str, Any]:
        return self.section("simulation")

    def get_export_config(self) -> Dict[str, Any]:
        return self.section("export")

    def get_logging_config(self) -> Dict[str, Any]:
        return self.section("logging")

    def reload(self) -> None:
        """Reload configuration from file."""
        self._load_config()

    def save(self, output_path: Optional[str] = None) -> None:
        """Write the current configuration to YAML."""
        save_path = output_path or self.config_path
        with open(save_path, "w", encoding="utf-8") as file:
            yaml.safe_dump(self.config, file, default_flow_style=False, indent=2, sort_keys=False)
        logger.info("configuration saved to %s", save_path)

    def update(self, key_path: str, value: Any) -> None:
        """Set a value using dot notation, creating parents as needed."""
        keys = key_path.split(".")
        node = self.config
        for key in keys[:-1]:
            node = node.setdefault(key, {})
        node[keys[-1]] = value

    def errors(self) -> List[str]:
        """Human-readable problems with the current configuration (empty when valid)."""
        problems = []
        for section in REQUIRED_SECTIONS:
            if not isinstance(self.config.get(section), dict):
                problems.append(f"missing section: {section}")
        if problems:
            return problems

        if int(self.get("quadrature.n_nodes", 0)) < 1:
            problems.append("quadrature.n_nodes must be >= 1")
        if self.get("quadrature.method") not in ("quadrature", "monte_carlo"):
            problems.append("quadrature.method must be quadrature or monte_carlo")
        if int(self.get("estimation.n_starts", 0)) < 1:
            problems.append("estimation.n_starts must be >= 1")
        if int(self.get("bootstrap.B", 0)) < 1:
            problems.append("bootstrap.B must be >= 1")
        c_n = self.get("bootstrap.c_n")
        if c_n != "auto":
            try:
                if float(c_n) < 0:
                    problems.append("bootstrap.c_n must be 'auto' or >= 0")
            except (TypeError, ValueError):
                problems.append("bootstrap.c_n must be 'auto' or a number")
        if self.get("bootstrap.scope") not in ("lambda1_only", "lambda1_and_offdiag"):
            problems.append("bootstrap.scope must be lambda1_only or lambda1_and_offdiag")
        if self.get("bootstrap.seed_from") not in ("null", "full", None):
            problems.append("bootstrap.seed_from must be null or full")
        if self.get("performance.parallel.backend", "processes") not in ("processes", "threads"):
            problems.append("performance.parallel.backend must be processes or threads")
        for alpha in self.get("simulation.alpha_levels", []) or []:
            if not 0 < float(alpha) < 1:
                problems.append(f"simulation.alpha_levels entry out of (0, 1): {alpha}")
        return problems

    def validate(self) -> bool:
        """True if the configuration is usable; problems are logged."""
        problems = self.errors()
        for problem in problems:
            logger.error("configuration: %s", problem)
        return not problems


def setup_logging(config: Optional[ConfigManager] = None, verbose: bool = False) -> None:
    """Configure the root logger from the ``logging`` section."""
    settings = (config or get_config()).get_logging_config()
    level_name = "DEBUG" if verbose else str(settings.get("level", "INFO")).upper()
    fmt = settings.get("format", LOG_FORMAT)
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.setLevel(getattr(logging, level_name, logging.INFO))

    if settings.get("console", {}).get("enabled", True):
        console = logging.StreamHandler()
        console.setFormatter(logging.Formatter(fmt))
        root.addHandler(console)

    file_settings = settings.get("file", {}) or {}
    if file_settings.get("enabled", False):
        handler = logging.handlers.RotatingFileHandler(
            file_settings.get("filename", "vctest.log"),
            maxBytes=parse_size(file_settings.get("max_size", "10MB")),
            backupCount=int(file_settings.get("backup_count", 5)),
            encoding="utf-8",
        )
        handler.setFormatter(logging.Formatter(fmt))
        root.addHandler(handler)


# Global configuration instance
config = ConfigManager()


def get_config() -> ConfigManager:
    """Get the global configuration instance."""
    return config


def set_config_path(config_path: str) -> ConfigManager:
    """Replace the global configuration with one loaded from ``config_path``."""
    global config
    config = ConfigManager(config_path)
    return config
