"""
Tests for configuration, logging setup and the replicate runners.
"""

import logging
import logging.handlers

import numpy as np
import pytest
import yaml

from core.config_manager import DEFAULT_CONFIG, ConfigManager, setup_logging
from core.estimate import FitOptions
from core.likelihood import QuadratureConfig
from core.parallel_processor import BACKENDS, ParallelProcessor, TaskFailure
from core.progress_tracker import ProgressTracker, format_duration
from core.testing import ShrinkPolicy


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(
        yaml.safe_dump({"bootstrap": {"B": 50, "c_n": 0.2}, "estimation": {"bounds": {"beta": 10.0}}}),
        encoding="utf-8",
    )
    return path


@pytest.fixture
def restore_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield root
    for handler in list(root.handlers):
        root.removeHandler(handler)
        if handler not in handlers:
            handler.close()
    for handler in handlers:
        root.addHandler(handler)
    root.setLevel(level)


class TestConfigManager:
    """Test loading, lookup and validation."""

    def test_merge_with_defaults(self, config_file):
        """Test file values override defaults key by key."""
        manager = ConfigManager(str(config_file))
        assert manager.get("bootstrap.B") == 50
        assert manager.get("bootstrap.c_n") == 0.2
        assert manager.get("bootstrap.scope") == "lambda1_and_offdiag"
        assert manager.get("estimation.bounds.beta") == 10.0
        assert manager.get("estimation.bounds.lambda") == 1e6
        assert manager.validate()

    def test_missing_file(self, tmp_path):
        """Test a missing file falls back to the defaults."""
        manager = ConfigManager(str(tmp_path / "absent.yaml"))
        assert manager.config == DEFAULT_CONFIG
        assert manager.config is not DEFAULT_CONFIG

    def test_unparsable_file(self, tmp_path):
        """Test broken YAML and non-mappings fall back to the defaults."""
        broken = tmp_path / "broken.yaml"
        broken.write_text("bootstrap: [unclosed\n", encoding="utf-8")
        assert ConfigManager(str(broken)).get("bootstrap.B") == 200

        scalar = tmp_path / "scalar.yaml"
        scalar.write_text("42\n", encoding="utf-8")
        assert ConfigManager(str(scalar)).get("bootstrap.B") == 200

    def test_get_and_update(self, config_file):
        """Test dot-path access."""
        manager = ConfigManager(str(config_file))
        assert manager.get("bootstrap.missing", "fallback") == "fallback"
        assert manager.get("bootstrap.B.deeper") is None
        manager.update("simulation.K", 10)
        manager.update("new.nested.key", True)
        assert manager.get("simulation.K") == 10
        assert manager.get("new.nested.key") is True

    def test_section_is_a_copy(self, config_file):
        """Test callers cannot mutate the stored configuration."""
        manager = ConfigManager(str(config_file))
        section = manager.get_estimation_config()
        section["bounds"]["beta"] = -1.0
        assert manager.get("estimation.bounds.beta") == 10.0

    def test_save_and_reload(self, config_file, tmp_path):
        """Test a saved configuration loads back unchanged."""
        manager = ConfigManager(str(config_file))
        manager.update("simulation.K", 7)
        target = tmp_path / "saved.yaml"
        manager.save(str(target))
        assert ConfigManager(str(target)).config == manager.config

        manager.update("simulation.K", 8)
        manager.reload()
        assert manager.get("simulation.K") == 500

    @pytest.mark.parametrize(
        "key, value, message",
        [
            ("bootstrap.B", 0, "bootstrap.B"),
            ("bootstrap.c_n", "big", "bootstrap.c_n"),
            ("bootstrap.c_n", -0.1, "bootstrap.c_n"),
            ("bootstrap.scope", "all", "bootstrap.scope"),
            ("bootstrap.seed_from", "mle", "bootstrap.seed_from"),
            ("quadrature.n_nodes", 0, "quadrature.n_nodes"),
            ("quadrature.method", "laplace", "quadrature.method"),
            ("estimation.n_starts", 0, "estimation.n_starts"),
            ("simulation.alpha_levels", [0.05, 1.5], "alpha_levels"),
            ("performance.parallel.backend", "mpi", "parallel.backend"),
        ],
    )
    def test_errors(self, config_file, key, value, message):
        """Test each invalid setting is reported."""
        manager = ConfigManager(str(config_file))
        manager.update(key, value)
        problems = manager.errors()
        assert len(problems) == 1
        assert message in problems[0]
        assert not manager.validate()

    def test_missing_section(self, config_file):
        """Test a required section replaced by a scalar is reported."""
        manager = ConfigManager(str(config_file))
        manager.config["quadrature"] = None
        assert manager.errors() == ["missing section: quadrature"]

    def test_null_seed_source_accepted(self, config_file):
        """Test an unquoted YAML null for seed_from is accepted."""
        manager = ConfigManager(str(config_file))
        manager.update("bootstrap.seed_from", None)
        assert manager.validate()
        assert ShrinkPolicy.from_config(manager.get_bootstrap_config()).seed_from == "null"


class TestSettingsFromConfig:
    """Test typed settings built from config sections."""

    def test_fit_options(self, config_file):
        """Test bounds are flattened and overrides win."""
        manager = ConfigManager(str(config_file))
        opts = FitOptions.from_config(manager.get_estimation_config(), n_starts=1)
        assert opts.beta_bound == 10.0
        assert opts.lambda_bound == 1e6
        assert opts.n_starts == 1
        assert opts.method == "Nelder-Mead"

    def test_quadrature_config(self):
        """Test the default section builds the default settings."""
        quad = QuadratureConfig.from_config(DEFAULT_CONFIG["quadrature"])
        assert quad == QuadratureConfig()

    def test_shrink_policy(self, config_file):
        """Test c_n and the auto rule."""
        manager = ConfigManager(str(config_file))
        policy = ShrinkPolicy.from_config(manager.get_bootstrap_config())
        assert policy.c_n == 0.2
        assert policy.threshold(1000) == 0.2
        assert ShrinkPolicy.from_config(DEFAULT_CONFIG["bootstrap"]).c_n is None


class TestLogging:
    """Test logging setup."""

    def test_console_handler(self, config_file, restore_root_logger):
        """Test the configured level and a single console handler."""
        manager = ConfigManager(str(config_file))
        manager.update("logging.level", "warning")
        setup_logging(manager)
        assert restore_root_logger.level == logging.WARNING
        assert len(restore_root_logger.handlers) == 1
        assert isinstance(restore_root_logger.handlers[0], logging.StreamHandler)

    def test_verbose_and_file(self, config_file, tmp_path, restore_root_logger):
        """Test --verbose forces DEBUG and the rotating file handler."""
        manager = ConfigManager(str(config_file))
        manager.update("logging.console.enabled", False)
        log_file = {"enabled": True, "filename": str(tmp_path / "run.log"), "max_size": "1KB"}
        manager.update("logging.file", log_file)
        setup_logging(manager, verbose=True)
        assert restore_root_logger.level == logging.DEBUG
        (handler,) = restore_root_logger.handlers
        assert isinstance(handler, logging.handlers.RotatingFileHandler)
        assert handler.maxBytes == 1024

        logging.getLogger("vctest.test").info("hello")
        handler.flush()
        assert "hello" in (tmp_path / "run.log").read_text(encoding="utf-8")


class TestParallelProcessor:
    """Test the ordered process and thread pool maps."""

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_order_preserved(self, backend):
        """Test results follow input order for any worker count."""
        items = list(range(20))
        sequential = ParallelProcessor(max_workers=1, backend=backend).map(lambda v: v * v, items)
        pooled = ParallelProcessor(max_workers=3, backend=backend).map(lambda v: v * v, items)
        assert sequential == pooled == [v * v for v in items]

    def test_seeded_streams_match_across_backends(self):
        """Test per-task streams give the same draws in processes and threads."""

        def draw(k):
            return float(np.random.default_rng([5, k]).normal())

        expected = [draw(k) for k in range(8)]
        assert ParallelProcessor(max_workers=2, backend="processes").map(draw, range(8)) == expected
        assert ParallelProcessor(max_workers=2, backend="threads").map(draw, range(8)) == expected

    @pytest.mark.parametrize("backend", BACKENDS)
    def test_failures_become_placeholders(self, backend):
        """Test a raising task yields a falsy TaskFailure at its index."""

        def task(v):
            if v == 2:
                raise ArithmeticError("bad replicate")
            return v

        done = []
        processor = ParallelProcessor(max_workers=2, backend=backend)
        results = processor.map(task, range(4), on_done=lambda i, ok: done.append((i, ok)))
        assert results[:2] == [0, 1]
        assert results[3] == 3
        assert isinstance(results[2], TaskFailure)
        assert not results[2]
        assert results[2].index == 2
        assert isinstance(results[2].error, ArithmeticError)
        assert done == [(0, True), (1, True), (2, False), (3, True)]

        stats = processor.get_stats()
        assert stats["total_tasks"] == 4
        assert stats["completed_tasks"] == 3
        assert stats["failed_tasks"] == 1
        assert stats["total_time"] >= 0.0

    def test_invalid_settings(self):
        """Test zero workers and unknown backends are refused."""
        with pytest.raises(ValueError):
            ParallelProcessor(max_workers=0)
        with pytest.raises(ValueError):
            ParallelProcessor(max_workers=2, backend="mpi")

    def test_backend_from_config(self, isolated_config):
        """Test the configured backend is used when none is passed."""
        isolated_config.update("performance.parallel.backend", "threads")
        assert ParallelProcessor(max_workers=2).backend == "threads"
        isolated_config.update("performance.parallel.backend", "processes")
        assert ParallelProcessor(max_workers=2).backend == "processes"


class TestProgressTracker:
    """Test progress counting and rendering."""

    def test_counts(self):
        """Test successes and failures are tallied."""
        tracker = ProgressTracker(enabled=False)
        tracker.start(4, label="Bootstrap")
        tracker.complete_task()
        tracker.callback(1, True)
        tracker.complete_task(success=False)
        tracker.finish()
        assert tracker.completed_tasks == 2
        assert tracker.failed_tasks == 1
        line = tracker.render()
        assert line.startswith("Bootstrap")
        assert "3/4" in line
        assert "failed: 1" in line

    def test_format_duration(self):
        """Test seconds, minutes and hours."""
        assert format_duration(5) == "5.0s"
        assert format_duration(90) == "1.5m"
        assert format_duration(5400) == "1.5h"
