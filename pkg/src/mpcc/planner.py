"""
Planning cycle: prediction, scenario selection, decision postponing and the branch MPCC solve
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.errors import ConfigurationError
from src.mpcc.costs import CostWeights
from src.mpcc.nlp import build_nlp
from src.mpcc.solver import PlanTree, SolverConfig, SQPSolver
from src.prediction.gmm_predictor import PredictionConfig, PredictionSet, Predictor, Scene, SyntheticPredictor
from src.prediction.records import FilePredictor
from src.selection.decision_postponing import PostponingConfig, PostponingReport, analyze_branching
from src.selection.scenario_selection import (
    PlanTrajectory,
    RiskReport,
    ScenarioTree,
    cluster_modes,
    compute_risk,
    select_scenarios,
    select_top_probability,
)
from src.vehicle.bicycle_model import THETA, V, Y, EgoState, VehicleLimits
from src.world.path_world import ReferencePath

logger = logging.getLogger(__name__)

TOPOLOGY = "topology"
PROBABILITY = "probability"

ADAPTIVE = "adaptive"
NO_BRANCHING = "none"
FULL_HORIZON = "full"


@dataclass(frozen=True)
class PlannerVariant:
    """
    How a planner builds its scenario tree

    Args:
        name: Variant name used in configs and result tables
        selection: ``topology`` (clustering + risk ranking) or ``probability`` (top-n joint modes)
        n_scenarios: Top-n for probability selection; None means S_max
        postponing: ``adaptive``, ``none`` (b = 0) or ``full`` (b = N-1)
    """

    name: str
    selection: str
    n_scenarios: Optional[int]
    postponing: str


VARIANTS: Dict[str, PlannerVariant] = {
    "full": PlannerVariant("full", TOPOLOGY, None, ADAPTIVE),
    "cmpcc": PlannerVariant("cmpcc", PROBABILITY, 1, NO_BRANCHING),
    "scmpcc": PlannerVariant("scmpcc", PROBABILITY, 5, FULL_HORIZON),
    "noss2": PlannerVariant("noss2", PROBABILITY, 2, NO_BRANCHING),
    "noss3": PlannerVariant("noss3", PROBABILITY, 3, NO_BRANCHING),
    "noss4": PlannerVariant("noss4", PROBABILITY, 4, NO_BRANCHING),
    "nodp": PlannerVariant("nodp", TOPOLOGY, None, NO_BRANCHING),
}


def get_variant(name: str) -> PlannerVariant:
    try:
        return VARIANTS[name.lower()]
    except KeyError:
        raise ConfigurationError("variants", f"unknown planner variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class SelectionConfig:
    """
    Args:
        lam: Weight of the mode probability in the decision value
        s_max: Largest number of scenarios kept by topology selection
    """

    lam: float = 0.5
    s_max: int = 2

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigurationError("selection.lam", "must be >= 0")
        if self.s_max < 1:
            raise ConfigurationError("selection.s_max", "must be >= 1")


@dataclass
class CycleDiagnostics:
    """What one planning cycle saw and decided"""

    cycle: int
    variant: str
    n_modes: List[int]
    clusters: List[List[int]]
    scenario_ids: List[int]
    weights: List[float]
    branching_index: int
    postponing: Optional[PostponingReport] = None
    risk: Optional[RiskReport] = None
    solver: dict = field(default_factory=dict)
    divergence: Dict[str, float] = field(default_factory=dict)
    selection_time: float = 0.0
    solve_time: float = 0.0
    obstacle_violation: float = 0.0

    def to_dict(self) -> dict:
        return {
            "cycle": self.cycle,
            "variant": self.variant,
            "n_modes": self.n_modes,
            "clusters": self.clusters,
            "scenario_ids": self.scenario_ids,
            "weights": self.weights,
            "branching_index": self.branching_index,
            "postponing": self.postponing.to_dict() if self.postponing is not None else None,
            "risk": self.risk.to_dict() if self.risk is not None else None,
            "solver": self.solver,
            "divergence": self.divergence,
            "selection_time": self.selection_time,
            "obstacle_violation": self.obstacle_violation,
            "solve_time": self.solve_time,
        }


def make_predictor(cfg: PredictionConfig, seed: int = 0) -> Predictor:
    """Replay of a prediction records file when one is configured, else the synthetic predictor"""
    if cfg.file:
        return FilePredictor(cfg.file)
    return SyntheticPredictor.from_config(cfg, seed)


class BranchPlanner:
    def __init__(
        self,
        path: ReferencePath,
        predictor: Predictor,
        variant: PlannerVariant = VARIANTS["full"],
        horizon: int = 40,
        dt: float = 0.1,
        weights: Optional[CostWeights] = None,
        limits: Optional[VehicleLimits] = None,
        selection: Optional[SelectionConfig] = None,
        postponing: Optional[PostponingConfig] = None,
        solver: Optional[SolverConfig] = None,
    ):
        """
        Receding-horizon planner for one ego vehicle

        Args:
            path (ReferencePath): Reference path the ego follows
            predictor (Predictor): Source of multi-modal participant predictions
            variant (PlannerVariant): Scenario selection and branching strategy
            horizon (int): Number of states N per branch
            dt (float): Step (s)
            weights (CostWeights): Running-cost weights
            limits (VehicleLimits): Ego limits
            selection (SelectionConfig): lambda and S_max
            postponing (PostponingConfig): Branching and relevance thresholds
            solver (SolverConfig): SQP settings
        """
        if horizon < 2:
            raise ConfigurationError("horizon", "must be >= 2")
        if not dt > 0:
            raise ConfigurationError("dt", "must be > 0")
        self.path = path
        self.predictor = predictor
        self.variant = variant
        self.horizon = horizon
        self.dt = dt
        self.weights = weights or CostWeights()
        self.limits = limits or VehicleLimits()
        self.selection = selection or SelectionConfig()
        self.postponing = postponing or PostponingConfig()
        self.solver = SQPSolver(solver)
        self._previous_tree: Optional[ScenarioTree] = None

        logger.debug(f"Branch planner initialized (variant: {variant.name}, N={horizon}, dt={dt})")

    def reference_plan(self, z0: EgoState, previous: Optional[PlanTree]) -> PlanTrajectory:
        """Previous plan shifted by one step, or a constant-velocity rollout on the first cycle"""
        if previous is None or previous.horizon != self.horizon:
            return PlanTrajectory.constant_velocity(z0, self.horizon, self.dt, self.limits)
        main = previous.main_branch()
        return previous.consensus(self.dt).extended(previous.inputs[main, -1], self.limits)

    def build_tree(self, pset: PredictionSet, plan: PlanTrajectory) -> Tuple[ScenarioTree, List[List[int]], Optional[RiskReport], Optional[PostponingReport]]:
        """Scenario tree with its branching index, plus what the selection saw"""
        if pset.is_empty():
            return ScenarioTree.empty(self.horizon, self.dt), [], None, None

        ego_dims = self.limits.dims
        risk = compute_risk(pset, plan, ego_dims, self.selection.lam)
        if self.variant.selection == TOPOLOGY:
            clusters = cluster_modes(pset, plan, ego_dims)
            tree = select_scenarios(pset, clusters, risk, lam=self.selection.lam, s_max=self.variant.n_scenarios or self.selection.s_max)
        else:
            tree = select_top_probability(pset, self.variant.n_scenarios or self.selection.s_max)
            clusters = [list(s.members) for s in tree.scenarios]

        report = None
        if tree.n_scenarios == 1 or self.variant.postponing == NO_BRANCHING:
            tree.branching_index = 0
        elif self.variant.postponing == FULL_HORIZON:
            tree.branching_index = self.horizon - 1
        else:
            report = analyze_branching(tree, risk, self.postponing)
            tree.branching_index = report.branching_index
        return tree, clusters, risk, report

    def _match_previous(self, tree: ScenarioTree, previous: PlanTree) -> List[int]:
        """Previous branch for every new scenario: same scenario id, else nearest representative"""
        ids = list(previous.scenario_ids)
        old = self._previous_tree
        matches = []
        for scenario in tree.scenarios:
            if scenario.scenario_id in ids:
                matches.append(ids.index(scenario.scenario_id))
                continue
            if old is None or len(old.scenarios) != previous.n_scenarios or not scenario.modes:
                matches.append(previous.main_branch())
                continue
            dist = []
            for candidate in old.scenarios:
                if len(candidate.modes) != len(scenario.modes):
                    dist.append(np.inf)
                    continue
                # previous prediction advanced one step against the new one
                d = sum(float(np.linalg.norm(new.mu[:-1] - prev.mu[1:], axis=-1).mean()) for new, prev in zip(scenario.modes, candidate.modes))
                dist.append(d)
            matches.append(int(np.argmin(dist)) if np.isfinite(np.min(dist)) else previous.main_branch())
        return matches

    def warm_start(self, tree: ScenarioTree, z0: EgoState, previous: Optional[PlanTree]) -> np.ndarray:
        """Per-branch inputs (S, N-1, 3): previous branches shifted one step, or a cruise guess"""
        S, n_in = tree.n_scenarios, self.horizon - 1
        if previous is None or previous.horizon != self.horizon:
            cruise = np.array([0.0, 0.0, np.clip(z0.v, 0.0, self.limits.virtual_speed_max)])
            return np.broadcast_to(cruise, (S, n_in, 3)).copy()
        warm = np.empty((S, n_in, 3))
        for s, j in enumerate(self._match_previous(tree, previous)):
            shifted = previous.inputs[j, 1:]
            warm[s] = np.vstack([shifted, previous.inputs[j, -1:]])
        return warm

    def plan_cycle(self, scene: Scene, z0: EgoState, previous: Optional[PlanTree] = None) -> Tuple[PlanTree, CycleDiagnostics]:
        """
        Run one planning cycle

        Args:
            scene (Scene): Observed participants
            z0 (EgoState): Measured ego state
            previous (PlanTree): Plan of the previous cycle, None on the first cycle

        Returns:
            (PlanTree, CycleDiagnostics)
        """
        start = time.perf_counter()
        pset = self.predictor.predict(scene, self.horizon, self.dt)
        plan = self.reference_plan(z0, previous)
        tree, clusters, risk, report = self.build_tree(pset, plan)
        nlp = build_nlp(tree, z0, self.path, self.weights, self.limits)
        warm = self.warm_start(tree, z0, previous)
        selection_time = time.perf_counter() - start

        result = self.solver.solve(nlp, warm)
        self._previous_tree = tree

        diagnostics = CycleDiagnostics(
            cycle=scene.cycle,
            variant=self.variant.name,
            n_modes=[len(m) for m in pset.modes],
            clusters=[list(map(int, c)) for c in clusters],
            scenario_ids=list(result.scenario_ids),
            weights=result.weights.tolist(),
            branching_index=result.branching_index,
            postponing=report,
            risk=risk,
            solver=result.to_dict(),
            divergence=branch_divergence(result),
            selection_time=selection_time,
            solve_time=result.solve_time,
            obstacle_violation=nlp.obstacle_violation(result.states),
        )
        logger.debug(
            f"Cycle {scene.cycle} [{self.variant.name}]: {tree.n_scenarios} scenarios, b={tree.branching_index}, "
            f"{result.status} in {result.iterations} iterations ({1e3 * result.solve_time:.1f} ms solve, "
            f"{1e3 * selection_time:.1f} ms rest)"
        )
        return result, diagnostics

    def reset(self):
        self._previous_tree = None


def branch_divergence(plan: PlanTree) -> Dict[str, float]:
    """Largest post-branching speed and lateral-position gap between any two branches"""
    if plan.n_scenarios < 2:
        return {"speed": 0.0, "lateral": 0.0}
    tail = plan.states[:, plan.branching_index + 1:]
    if tail.shape[1] == 0:
        return {"speed": 0.0, "lateral": 0.0}
    speed = float(np.max(tail[..., V].max(axis=0) - tail[..., V].min(axis=0)))
    lateral = float(np.max(np.ptp(tail[..., Y], axis=0)))
    return {"speed": speed, "lateral": lateral}


def path_progress(plan: PlanTree) -> float:
    return float(plan.states[plan.main_branch(), -1, THETA] - plan.states[0, 0, THETA])


if __name__ == "__main__":
    from src.world.path_world import straight_path

    logging.basicConfig(level=logging.INFO)
    road = straight_path(300.0, half_width=3.5)
    planner = BranchPlanner(road, SyntheticPredictor())
    z = EgoState(0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 0.0)
    tree_plan, diag = planner.plan_cycle(Scene([], dt=0.1), z)
    logger.info(f"Empty road: {tree_plan.status}, first input {tree_plan.first_input().round(3)}, progress {path_progress(tree_plan):.1f} m")
