"""
Monte-Carlo merging experiment: every variant runs on the same sampled worlds
"""

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.config import ExperimentConfig
from src.sim.closed_loop import ABORTED, COLLISION, SUCCESS, RunResult, branch_rows, describe_error, run_closed_loop, velocity_rows
from src.sim.scenarios import merging_fixture

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = [
    "variant",
    "n_runs",
    "success_rate",
    "aborted_rate",
    "collision_rate",
    "failed_rate",
    "mean_cost",
    "mean_solve_ms",
    "max_solve_ms",
    "mean_rest_ms",
]


def world_rng(seed: int, run: int) -> np.random.Generator:
    """Stream owned by one sampled world"""
    return np.random.default_rng([seed, run])


def run_world(job: Tuple[ExperimentConfig, int, Sequence[str], Optional[str]]) -> Tuple[List[dict], List[dict], List[dict]]:
    """
    Run every variant on world ``run``; module level so worker processes can pickle it

    Returns:
        (result rows, velocity rows, branch rows); profiles only for the first ``trace_runs`` worlds
    """
    config, run, variants, trace_dir = job
    rng = world_rng(config.seed, run)
    fixture = merging_fixture(config.merging, rng, config.limits)
    predictor_seed = int(rng.integers(0, 2**31 - 1))
    traced = run < config.monte_carlo.trace_runs
    rows, velocities, branches = [], [], []
    for name in variants:
        trace_path = None
        if trace_dir is not None and traced:
            trace_path = os.path.join(trace_dir, f"merging_run{run:04d}_{name}.jsonl")
        try:
            result = run_closed_loop(fixture, name, predictor_seed, config, trace_path)
        except Exception as e:
            logger.exception(f"Run {run} [{name}] failed: {e}")
            result = RunResult.failure(name, fixture.name, predictor_seed, describe_error(e))
        row = result.summary()
        row["run"] = run
        row["n_tps"] = len(fixture.agents)
        rows.append(row)
        if traced:
            velocities.extend(velocity_rows(result, run=run, variant=name))
            branches.extend(branch_rows(result, config.dt, run=run, variant=name))
    return rows, velocities, branches


def summarize(runs: pd.DataFrame, variants: Iterable[str]) -> pd.DataFrame:
    """Per-variant outcome rates, mean cost and solve-time statistics"""
    rows = []
    for name in variants:
        sub = runs[runs["variant"] == name]
        ok = sub[~sub["failed"].astype(bool)]
        n = len(sub)
        rows.append(
            {
                "variant": name,
                "n_runs": n,
                "success_rate": float((sub["outcome"] == SUCCESS).mean()) if n else float("nan"),
                "aborted_rate": float((sub["outcome"] == ABORTED).mean()) if n else float("nan"),
                "collision_rate": float((sub["outcome"] == COLLISION).mean()) if n else float("nan"),
                "failed_rate": float(sub["failed"].astype(bool).mean()) if n else float("nan"),
                "mean_cost": float(ok["cost"].mean()) if len(ok) else float("nan"),
                "mean_solve_ms": float(ok["mean_solve_ms"].mean()) if len(ok) else float("nan"),
                "max_solve_ms": float(ok["max_solve_ms"].max()) if len(ok) else float("nan"),
                "mean_rest_ms": float(ok["mean_rest_ms"].mean()) if len(ok) else float("nan"),
            }
        )
    return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


class MonteCarloRunner:
    def __init__(self, config: ExperimentConfig, trace_dir: Optional[str] = None):
        """
        Paired Monte-Carlo comparison of planner variants on sampled merging worlds

        Args:
            config (ExperimentConfig): Experiment settings; ``monte_carlo`` and ``merging`` drive sampling
            trace_dir (str): Directory for the traces of the first ``trace_runs`` worlds
        """
        self.config = config
        self.trace_dir = trace_dir
        self.velocities = pd.DataFrame()
        self.branches = pd.DataFrame()

    def run(self, variants: Optional[Sequence[str]] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
        """
        Returns:
            (per-run table, per-variant summary); identical for identical configs. Executed
            speed profiles and planned branches of the traced worlds land in ``velocities``
            and ``branches``
        """
        variants = list(variants or self.config.variants)
        mc = self.config.monte_carlo
        jobs = [(self.config, run, variants, self.trace_dir) for run in range(mc.n_runs)]
        logger.info(f"Running {mc.n_runs} merging worlds x {len(variants)} variants on {mc.workers} worker(s)")
        rows, velocities, branches = [], [], []
        if mc.workers > 1:
            with ProcessPoolExecutor(max_workers=mc.workers) as pool:
                worlds = list(pool.map(run_world, jobs))
        else:
            worlds = [run_world(job) for job in jobs]
        for world_rows, world_velocities, world_branches in worlds:
            rows.extend(world_rows)
            velocities.extend(world_velocities)
            branches.extend(world_branches)
        self.velocities = pd.DataFrame(velocities)
        self.branches = pd.DataFrame(branches)
        runs = pd.DataFrame(rows).sort_values("run", kind="stable").reset_index(drop=True)
        summary = summarize(runs, variants)
        logger.info(f"Finished {len(runs)} runs")
        return runs, summary


def monte_carlo(config: ExperimentConfig, variants: Optional[Sequence[str]] = None, trace_dir: Optional[str] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Per-run table and per-variant summary of the merging experiment"""
    return MonteCarloRunner(config, trace_dir).run(variants)


def sweep_branching_threshold(config: ExperimentConfig, thresholds: Sequence[float]) -> pd.DataFrame:
    """
    Full framework over several branching thresholds on the same sampled worlds

    Returns:
        pd.DataFrame: One summary row per threshold
    """
    frames = []
    for b_th in thresholds:
        cfg = replace(config, postponing=replace(config.postponing, branching_threshold=float(b_th)))
        _, summary = MonteCarloRunner(cfg).run(["full"])
        summary.insert(0, "branching_threshold", float(b_th))
        frames.append(summary)
        logger.info(f"Branching threshold {b_th}: success {summary['success_rate'].iloc[0]:.2f}, cost {summary['mean_cost'].iloc[0]:.1f}")
    return pd.concat(frames, ignore_index=True)
