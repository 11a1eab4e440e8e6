"""
Command-line entry point: validate an experiment config or run it and write its artifacts

    python -m src.main validate --config configs/intersection.yaml
    python -m src.main run --config configs/merging.yaml --workers 8
"""

import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy
import yaml

from src.config import ExperimentConfig, config_hash, dump_config, load_config
from src.errors import ConfigurationError
from src.sim.closed_loop import RunResult, branch_rows, describe_error, run_closed_loop, velocity_rows
from src.sim.monte_carlo import MonteCarloRunner, summarize, sweep_branching_threshold
from src.sim.scenarios import INTERSECTION, MERGING, ScenarioFixture, intersection_fixture, load_custom_fixture

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging(verbose: bool = False, output_dir: Optional[str] = None):
    """
    Configure the root logger once per invocation

    Args:
        verbose (bool): DEBUG instead of INFO
        output_dir (str): When given, also log to ``run.log`` there
    """
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if output_dir is not None:
        os.makedirs(output_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(output_dir, "run.log"), mode="w"))
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT, handlers=handlers, force=True)


def apply_overrides(
    cfg: ExperimentConfig,
    output_dir: Optional[str] = None,
    workers: Optional[int] = None,
    seed: Optional[int] = None,
    variants: Optional[Sequence[str]] = None,
) -> ExperimentConfig:
    """Command-line flags take precedence over the file; the result is re-validated"""
    changes = {}
    if output_dir is not None:
        changes["output_dir"] = output_dir
    if seed is not None:
        changes["seed"] = seed
    if variants:
        changes["variants"] = tuple(variants)
    if workers is not None:
        changes["monte_carlo"] = replace(cfg.monte_carlo, workers=workers)
    return replace(cfg, **changes) if changes else cfg


def run_fixture_variants(
    cfg: ExperimentConfig, fixture: ScenarioFixture, trace_dir: str, **labels
) -> Tuple[List[dict], List[dict], List[dict]]:
    """
    Run every configured variant once on one fixture

    Returns:
        (result rows, velocity rows, branch rows)
    """
    results, velocities, branches = [], [], []
    for name in cfg.variants:
        trace_path = os.path.join(trace_dir, f"{fixture.name}_{name}.jsonl")
        try:
            result = run_closed_loop(fixture, name, cfg.seed, cfg, trace_path)
        except Exception as e:
            logger.exception(f"{fixture.name} [{name}] failed: {e}")
            result = RunResult.failure(name, fixture.name, cfg.seed, describe_error(e))
        results.append(dict(result.summary(), **labels))
        velocities.extend(velocity_rows(result, variant=name, **labels))
        branches.extend(branch_rows(result, cfg.dt, variant=name, **labels))
    return results, velocities, branches


def _save_csv(df: pd.DataFrame, path: str, what: str) -> str:
    df.to_csv(path, index=False)
    logger.info(f"Saved {len(df)} {what} rows to {path}")
    return path


def run_experiment(cfg: ExperimentConfig) -> Dict[str, str]:
    """
    Execute the configured experiment and write its artifacts to ``cfg.output_dir``

    Intersection runs every TP behavior against every variant; merging runs the paired
    Monte-Carlo comparison (and the branching-threshold sweep when configured), with speed
    profiles and branches of its traced worlds; custom runs every variant on the scenario file.

    Args:
        cfg (ExperimentConfig): Validated configuration

    Returns:
        Dict[str, str]: Artifact name to path, the manifest included
    """
    out = cfg.output_dir
    trace_dir = os.path.join(out, "traces")
    os.makedirs(trace_dir, exist_ok=True)
    artifacts = {}

    with open(os.path.join(out, "config.yaml"), "w") as f:
        f.write(dump_config(cfg))
    artifacts["config"] = os.path.join(out, "config.yaml")

    if cfg.scenario == MERGING:
        runner = MonteCarloRunner(cfg, trace_dir)
        runs, summary = runner.run()
        velocities, branches = runner.velocities, runner.branches
        artifacts["results"] = _save_csv(runs, os.path.join(out, "results.csv"), "run")
        if cfg.monte_carlo.branching_sweep:
            sweep = sweep_branching_threshold(cfg, cfg.monte_carlo.branching_sweep)
            artifacts["branching_sweep"] = _save_csv(sweep, os.path.join(out, "branching_sweep.csv"), "sweep")
    else:
        if cfg.scenario == INTERSECTION:
            fixtures = [(intersection_fixture(cfg.intersection, b, cfg.limits), b) for b in cfg.intersection.behaviors]
        else:
            fixture = load_custom_fixture(cfg.scenario_file, cfg.limits)
            fixtures = [(fixture, fixture.name)]
        results, velocities, branches = [], [], []
        for fixture, behavior in fixtures:
            logger.info(f"Running {len(cfg.variants)} variants on {fixture.name}")
            r, v, b = run_fixture_variants(cfg, fixture, trace_dir, behavior=behavior)
            results.extend(r)
            velocities.extend(v)
            branches.extend(b)
        runs = pd.DataFrame(results)
        velocities, branches = pd.DataFrame(velocities), pd.DataFrame(branches)
        summary = summarize(runs, cfg.variants)
        artifacts["results"] = _save_csv(runs, os.path.join(out, "results.csv"), "run")

    artifacts["velocity_profiles"] = _save_csv(velocities, os.path.join(out, "velocity_profiles.csv"), "velocity")
    artifacts["branches"] = _save_csv(branches, os.path.join(out, "branches.csv"), "branch")
    artifacts["summary"] = _save_csv(summary, os.path.join(out, "summary.csv"), "summary")
    artifacts["traces"] = trace_dir
    artifacts["manifest"] = write_manifest(cfg, artifacts)
    print(summary.to_string(index=False))
    return artifacts


def write_manifest(cfg: ExperimentConfig, artifacts: Dict[str, str]) -> str:
    """Config hash, seed, library versions and artifact paths as ``manifest.json``"""
    path = os.path.join(cfg.output_dir, "manifest.json")
    manifest = {
        "config_hash": config_hash(cfg),
        "scenario": cfg.scenario,
        "seed": cfg.seed,
        "variants": list(cfg.variants),
        "versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
            "pyyaml": yaml.__version__,
        },
        "created": datetime.now(timezone.utc).isoformat(),
        "artifacts": {k: os.path.relpath(v, cfg.output_dir) for k, v in artifacts.items()},
    }
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    logger.info(f"Saved manifest to {path}")
    return path


def validate_and_echo(path: str) -> str:
    """Print the fully defaulted configuration; running the echo reproduces the original run"""
    text = dump_config(load_config(path))
    print(text, end="")
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Branch MPCC planner experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment and write its artifacts")
    run.add_argument("--config", required=True, help="Experiment YAML file")
    run.add_argument("--output-dir", default=None, help="Overrides output_dir")
    run.add_argument("--workers", type=int, default=None, help="Worker processes for Monte-Carlo runs")
    run.add_argument("--seed", type=int, default=None, help="Overrides the master seed")
    run.add_argument("--variants", nargs="+", default=None, help="Subset of planner variants")
    run.add_argument("--verbose", action="store_true", help="Debug logging")

    validate = sub.add_parser("validate", help="Print the fully defaulted configuration")
    validate.add_argument("--config", required=True, help="Experiment YAML file")
    validate.add_argument("--verbose", action="store_true", help="Debug logging")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Returns:
        int: 0 on success, 2 on configuration errors, 1 on anything else
    """
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        if args.command == "validate":
            validate_and_echo(args.config)
            return 0
        cfg = apply_overrides(load_config(args.config), args.output_dir, args.workers, args.seed, args.variants)
        setup_logging(args.verbose, cfg.output_dir)
        logger.info(f"Running {cfg.scenario} experiment, seed {cfg.seed}, variants {list(cfg.variants)}")
        artifacts = run_experiment(cfg)
        logger.info(f"Experiment complete, {len(artifacts)} artifacts in {cfg.output_dir}")
        return 0
    except ConfigurationError as e:
        logger.error(f"Invalid configuration: {e}")
        return 2
    except Exception as e:
        logger.exception(f"Experiment failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
