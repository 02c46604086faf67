#!/usr/bin/env python3
"""
vctest: fit mixed-effects models and test variance components.

Usage:
    vctest fit --data DATA.csv --model MODEL [--tested-rows ROWS]
    vctest test --data DATA.csv --model MODEL --tested-rows ROWS [--B 200] [--c-n auto]
    vctest test --data DATA.csv --model coucal --tested-rows 2,3 --plan sequential
    vctest simulate {m1,m2,m3,m4,coucal} [--N N] [--K K] [--B B] [--s 0,4,7] [--c 0,0.24]
    vctest convert --source TABLE.csv --output DATA.csv

MODEL is a built-in name (m1, m2, m3, m4, coucal) or a YAML model file.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from adapters.coucal import convert_growth_table
from adapters.dataset_csv import load_dataset, save_dataset
from core import __version__
from core.cli_enhancer import CLIEnhancer
from core.config_manager import ConfigManager, get_config, set_config_path, setup_logging
from core.estimate import FitOptions, mle_full, mle_null
from core.exceptions import ConfigurationError, EstimationError, EvaluationError, SchemaError
from core.exporter import ReportExporter, RunManifest
from core.likelihood import QuadratureConfig
from core.mean_functions import BUILTIN_MODELS, builtin_model, model_from_config
from core.model import ModelSpec, TestSpec
from core.progress_tracker import ProgressTracker
from core.simstudy import (
    build_scenario,
    empirical_level,
    empirical_power,
    nuisance_sweep,
    synthetic_coucal,
)
from core.testing import (
    ShrinkPolicy,
    asymptotic_pvalue_single,
    bootstrap_test,
    lrt_statistic,
    sequential_plan,
)
from utils.text import parse_float_list, parse_grid, parse_index_list

logger = logging.getLogger("vctest")

SCENARIOS = ("m1", "m2", "m3", "m4", "coucal")


class VCTestArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    """Parse command line arguments."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML configuration file (default: config.yaml)")
    common.add_argument("--output", "-o", help="output directory (file for convert / simulate coucal)")
    common.add_argument(
        "--excel", action="store_true", help="also write an Excel workbook (simulate, sequential plan)"
    )
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--workers", type=int, help="parallel workers for replicates")

    parser = VCTestArgumentParser(
        prog="vctest",
        description="Variance component testing in mixed-effects models",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__.split("Usage:")[1],
    )
    parser.add_argument("--version", action="version", version=f"vctest {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=VCTestArgumentParser)

    fit = sub.add_parser("fit", parents=[common], help="maximum likelihood fit")
    fit.add_argument("--data", required=True, help="long-format CSV (id, y, x1, ...)")
    fit.add_argument("--model", required=True, help="built-in model name or YAML model file")
    fit.add_argument("--tested-rows", help="also fit the null model with these rows of Lambda zero")

    test = sub.add_parser("test", parents=[common], help="bootstrap test of variance components")
    test.add_argument("--data", required=True, help="long-format CSV (id, y, x1, ...)")
    test.add_argument("--model", required=True, help="built-in model name or YAML model file")
    test.add_argument("--tested-rows", required=True, help="1-based rows of Lambda, e.g. 2,3")
    test.add_argument("--B", type=int, help="bootstrap replicates")
    test.add_argument("--c-n", help="shrinkage threshold: 'auto' or a number >= 0")
    test.add_argument("--shrink-psi", action="store_true", help="also threshold the fixed effects")
    test.add_argument("--alpha", type=float, default=0.05, help="level for the decision (default 0.05)")
    test.add_argument("--plan", choices=("single", "sequential"), default="single")
    test.add_argument("--asymptotic", action="store_true", help="add the 50:50 chi2(1) p-value")

    sim = sub.add_parser("simulate", parents=[common], help="simulation study or synthetic data")
    sim.add_argument("scenario", choices=SCENARIOS)
    sim.add_argument("--scenario-file", help="YAML map of scenario overrides")
    sim.add_argument("--N", type=int, help="individuals per dataset")
    sim.add_argument("--K", type=int, help="Monte Carlo replicates")
    sim.add_argument("--B", type=int, help="bootstrap replicates")
    sim.add_argument("--alpha", help="nominal levels, e.g. 0.01,0.05,0.1")
    sim.add_argument("--s", help="numbers of nuisance variances (m3), e.g. 0,4,7")
    sim.add_argument("--c", help="shrinkage thresholds, e.g. 0,0.24,0.9")
    sim.add_argument("--grid", help="power grid variance:rho pairs, e.g. 0:0,0.05:0,0.1:0.5")

    conv = sub.add_parser("convert", parents=[common], help="growth table to long CSV")
    conv.add_argument("--source", required=True, help="nestling growth table CSV")
    return parser


def resolve_model(name_or_path: str, covariate_names: List[str]) -> ModelSpec:
    if name_or_path in BUILTIN_MODELS:
        return builtin_model(name_or_path)
    path = Path(name_or_path)
    if not path.exists():
        raise ConfigurationError(
            f"model {name_or_path!r} is neither built-in ({', '.join(BUILTIN_MODELS)}) nor a file"
        )
    with open(path, "r", encoding="utf-8") as handle:
        section = yaml.safe_load(handle) or {}
    if not isinstance(section, dict):
        raise ConfigurationError(f"model file {path} must hold a mapping")
    return model_from_config(section, covariate_names)


def _check_covariates(model: ModelSpec, names: List[str]) -> None:
    if len(names) != model.n_covariates:
        raise SchemaError(
            f"model {model.name!r} expects covariates {list(model.covariate_names)}, data has {names}",
            column=model.covariate_names[0] if model.covariate_names else None,
        )


def _settings(config: ConfigManager, args: argparse.Namespace):
    quad = QuadratureConfig.from_config(config.get_quadrature_config())
    opts = FitOptions.from_config(config.get_estimation_config())
    return quad, opts


def _run_settings(args: argparse.Namespace, **resolved) -> Dict[str, Any]:
    """Parsed arguments plus the resolved settings objects, for the run manifest."""
    settings: Dict[str, Any] = {"arguments": dict(vars(args))}
    for name, value in resolved.items():
        settings[name] = asdict(value) if hasattr(value, "__dataclass_fields__") else value
    return settings


def _exporter(config: ConfigManager, args: argparse.Namespace) -> ReportExporter:
    export = config.get_export_config()
    output_dir = args.output or export.get("output_dir", "results")
    return ReportExporter(output_dir, export.get("float_format", "%.6g"))


def _load(args: argparse.Namespace):
    dataset, names = load_dataset(args.data)
    model = resolve_model(args.model, names)
    _check_covariates(model, names)
    return dataset, model


def cmd_fit(args: argparse.Namespace, config: ConfigManager, cli: CLIEnhancer) -> int:
    dataset, model = _load(args)
    quad, opts = _settings(config, args)
    if args.seed is not None:
        opts = FitOptions.from_config(config.get_estimation_config(), seed=args.seed)

    full = mle_full(model, dataset, quad, opts)
    report: Dict[str, Any] = {"model": model.name, "N": dataset.n_individuals, "n_obs": dataset.n_obs}
    report.update(full.summary())
    if args.tested_rows:
        spec = TestSpec(tuple(parse_index_list(args.tested_rows)))
        null = mle_null(model, dataset, spec, quad, opts)
        report["null.loglik"] = null.loglik
        for key, value in null.theta_hat.as_dict().items():
            report[f"null.{key}"] = value
        report["lrt"] = lrt_statistic(full, null)

    cli.print_key_values(report, title=f"Fit of {model.name}")
    exporter = _exporter(config, args)
    paths = {"report": str(exporter.write_report(report, "fit_report.txt"))}
    extra = _run_settings(args, quadrature=quad, estimation=opts)
    manifest = RunManifest.for_input(
        "fit", args.data, seed=opts.seed, config_path=config.config_path, extra=extra
    )
    paths["manifest"] = str(exporter.write_manifest(manifest, "fit_manifest.yaml"))
    cli.show_export_summary(paths)
    return 0


def _policy(config: ConfigManager, args: argparse.Namespace) -> ShrinkPolicy:
    overrides: Dict[str, Any] = {}
    if args.c_n is not None:
        if args.c_n == "auto":
            overrides["c_n"] = None
        else:
            try:
                overrides["c_n"] = float(args.c_n)
            except ValueError:
                raise ConfigurationError(f"--c-n must be 'auto' or a number, got {args.c_n!r}") from None
    if args.shrink_psi:
        overrides["shrink_psi"] = True
    return ShrinkPolicy.from_config(config.get_bootstrap_config(), **overrides)


def cmd_test(args: argparse.Namespace, config: ConfigManager, cli: CLIEnhancer) -> int:
    rows = tuple(parse_index_list(args.tested_rows))
    if args.plan == "sequential" and len(rows) != 2:
        raise ConfigurationError("--plan sequential needs exactly two tested rows")
    if args.asymptotic and (args.plan == "sequential" or len(rows) != 1):
        raise ConfigurationError(
            "--asymptotic needs --plan single and exactly one tested row; use the bootstrap p-value"
        )
    dataset, model = _load(args)
    quad, opts = _settings(config, args)
    boot = config.get_bootstrap_config()
    B = int(args.B if args.B is not None else boot.get("B", 200))
    seed = int(args.seed if args.seed is not None else boot.get("seed", 0))
    workers = args.workers if args.workers is not None else config.get("performance.parallel.max_workers", 1)
    policy = _policy(config, args)
    exporter = _exporter(config, args)
    paths: Dict[str, str] = {}

    if args.plan == "sequential":
        results = sequential_plan(model, dataset, rows, quad, opts, policy, B, seed, workers)
        table = []
        for name, result in results.items():
            reject = result.rejects(args.alpha)
            table.append([name, result.tested_rows, result.lrt_obs, result.c_n, result.p_boot, reject])
        headers = ["test", "rows", "lrt", "c_N", "p_boot", f"reject@{args.alpha:g}"]
        cli.print_table(headers, table, title="Sequential plan")
        frame = pd.DataFrame(table, columns=["test", "rows", "lrt", "c_n", "p_boot", "reject"])
        frame["rows"] = frame["rows"].map(lambda r: ",".join(str(v) for v in r))
        paths["plan"] = str(exporter.write_frame(frame, "plan.csv"))
        if args.excel or config.get("export.excel.enabled", False):
            paths["excel"] = str(exporter.write_excel({"plan": frame}, "plan.xlsx"))
    else:
        spec = TestSpec(rows)
        progress = ProgressTracker()
        progress.start(B, "bootstrap")
        try:
            result = bootstrap_test(
                model,
                dataset,
                spec,
                quad,
                opts,
                policy,
                B,
                seed,
                workers,
                float(boot.get("failure_budget", 0.05)),
                progress,
            )
        finally:
            progress.finish()
        report = result.to_report()
        if args.asymptotic:
            report["p_asymptotic"] = asymptotic_pvalue_single(result.lrt_obs, spec.r)
        report[f"reject_at_{args.alpha:g}"] = result.rejects(args.alpha)
        cli.print_key_values(report, title=f"Test of rows {','.join(map(str, rows))} in {model.name}")
        if result.unreliable:
            cli.print_warning(f"{result.b_failed} of {B} replicates failed; p-value flagged unreliable")
        paths["report"] = str(exporter.write_report(report, "test_report.txt"))
        if config.get("export.lrt_star_csv", True):
            paths["lrt_star"] = str(exporter.write_lrt_star(result.lrt_star))

    extra = _run_settings(
        args,
        B=B,
        tested_rows=list(rows),
        workers=workers,
        c_n=policy.threshold(dataset.n_individuals),
        quadrature=quad,
        estimation=opts,
        bootstrap=policy,
    )
    manifest = RunManifest.for_input(
        "test", args.data, seed=seed, config_path=config.config_path, extra=extra
    )
    paths["manifest"] = str(exporter.write_manifest(manifest, "test_manifest.yaml"))
    cli.show_export_summary(paths)
    return 0


def _scenario_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides: Dict[str, Any] = {}
    if args.scenario_file:
        with open(args.scenario_file, "r", encoding="utf-8") as handle:
            loaded = yaml.safe_load(handle) or {}
        if not isinstance(loaded, dict):
            raise ConfigurationError(f"scenario file {args.scenario_file} must hold a mapping")
        loaded.pop("model_id", None)
        overrides.update(loaded)
    for key in ("N", "K", "B", "seed"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if args.alpha:
        overrides["alpha_levels"] = parse_float_list(args.alpha)
    if args.c:
        overrides["c_values"] = parse_float_list(args.c)
    return overrides


def cmd_simulate(args: argparse.Namespace, config: ConfigManager, cli: CLIEnhancer) -> int:
    seed = args.seed if args.seed is not None else int(config.get("simulation.seed", 2024))
    if args.scenario == "coucal":
        n = args.N or 292
        dataset = synthetic_coucal(np.random.default_rng(seed), n)
        target = Path(args.output or "coucal_synthetic.csv")
        save_dataset(dataset, target, ["age"])
        manifest = RunManifest(
            command="simulate coucal",
            seed=seed,
            config_path=config.config_path,
            extra=_run_settings(args, N=n),
        )
        ReportExporter(target.parent).write_manifest(manifest, target.stem + "_manifest.yaml")
        cli.print_success(f"wrote {dataset.n_individuals} nestlings ({dataset.n_obs} weighings) to {target}")
        return 0

    overrides = _scenario_overrides(args)
    s_values = parse_index_list(args.s) if args.s else None
    sweep = s_values is not None and (len(s_values) > 1 or args.scenario == "m3")
    if s_values and not sweep:
        overrides["s"] = s_values[0]
    workers = args.workers if args.workers is not None else config.get("performance.parallel.max_workers", 1)
    scenario = build_scenario(args.scenario, overrides)
    cli.print_key_values(scenario.summary(), title=f"Scenario {args.scenario}")
    progress = ProgressTracker()

    if args.grid:
        result = empirical_power(scenario, parse_grid(args.grid), workers, progress)
        kind = "power"
    elif sweep:
        c_values = [p.threshold(scenario.N) for p in scenario.policies]
        alpha = scenario.alpha_levels[0] if args.alpha else 0.05
        result = nuisance_sweep(scenario, s_values, c_values, alpha, workers, progress)
        kind = "nuisance"
    else:
        result = empirical_level(scenario, workers, progress)
        kind = "level"

    cli.print_section(f"Empirical {kind}")
    print(result.to_table(), file=cli.stream)
    exporter = _exporter(config, args)
    frame = result.to_frame()
    paths = {"results": str(exporter.write_frame(frame, f"{args.scenario}_{kind}.csv"))}
    if args.excel or config.get("export.excel.enabled", False):
        excel = config.get("export.excel", {}) or {}
        paths["excel"] = str(
            exporter.write_excel(
                {kind: frame},
                f"{args.scenario}_{kind}.xlsx",
                excel.get("freeze_headers", True),
                excel.get("add_filters", True),
            )
        )
    manifest = RunManifest(
        command=f"simulate {args.scenario}",
        seed=scenario.seed,
        config_path=config.config_path,
        extra=_run_settings(args, scenario=scenario.summary(), kind=kind, workers=workers),
    )
    paths["manifest"] = str(exporter.write_manifest(manifest, f"{args.scenario}_{kind}_manifest.yaml"))
    cli.show_export_summary(paths)
    return 0


def cmd_convert(args: argparse.Namespace, config: ConfigManager, cli: CLIEnhancer) -> int:
    target = Path(args.output or "coucal.csv")
    frame = convert_growth_table(args.source, target, config.get("coucal.columns"))
    manifest = RunManifest.for_input(
        "convert", args.source, config_path=config.config_path, extra=_run_settings(args)
    )
    ReportExporter(target.parent).write_manifest(manifest, target.stem + "_manifest.yaml")
    cli.print_success(f"wrote {len(frame)} rows to {target}")
    return 0


COMMANDS = {"fit": cmd_fit, "test": cmd_test, "simulate": cmd_simulate, "convert": cmd_convert}


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point; returns the process exit code."""
    parser = build_parser()
    args = parser.parse_args(argv)
    config = set_config_path(args.config) if args.config else get_config()
    setup_logging(config, verbose=args.verbose)
    cli = CLIEnhancer()
    cli.print_header(f"vctest {args.command}", f"config: {config.config_path}")

    try:
        if not config.validate():
            raise ConfigurationError(f"invalid configuration: {'; '.join(config.errors())}")
        return COMMANDS[args.command](args, config, cli)
    except (ConfigurationError, ValueError) as e:
        cli.print_error(str(e))
        return 1
    except (EvaluationError, EstimationError) as e:
        cli.print_error(str(e))
        return 2
    except KeyboardInterrupt:
        cli.print_warning("interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
