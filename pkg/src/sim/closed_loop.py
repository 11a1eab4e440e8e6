"""
Closed-loop simulation of the planner against simulated traffic, outcome
classification and the realized running cost of a run
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Union

import numpy as np

from src.config import ExperimentConfig
from src.errors import PlannerError
from src.mpcc.costs import CostWeights, running_cost
from src.mpcc.planner import BranchPlanner, PlannerVariant, get_variant, make_predictor
from src.mpcc.solver import INFEASIBLE
from src.prediction.gmm_predictor import GaussianState, Scene, TrackedParticipant
from src.sim.scenarios import MIN_GAP, ScenarioFixture, TPAgent, leader_of
from src.sim.trace import TraceWriter, split_trace
from src.vehicle.bicycle_model import A, PSI, THETA, V, X, Y, ControlInput, EgoState, comfort_braking_input, rk4_step
from src.world.path_world import Dimensions, RectFootprint, ReferencePath, rect_overlap

logger = logging.getLogger(__name__)

SUCCESS = "success"
ABORTED = "aborted"
COLLISION = "collision"
FAILED = "failed"
OUTCOMES = (SUCCESS, ABORTED, COLLISION)

REALIZED_SIGMA = 0.01
STANDSTILL_TIME = 3.0
MAX_TRAFFIC_DECEL = 9.0


@dataclass
class RunResult:
    """Outcome, realized cost, per-cycle timings (ms) and the full trace of one run"""

    outcome: str
    cost: float
    solve_times: List[float]
    rest_times: List[float]
    trace: List[dict] = field(repr=False)
    n_steps: int = 0
    min_accel: float = 0.0
    fallback_steps: int = 0
    emergency_steps: int = 0
    variant: str = ""
    scenario: str = ""
    seed: int = 0
    failed: bool = False
    error: str = ""

    @classmethod
    def failure(cls, variant: str, scenario: str, seed: int, error: str) -> "RunResult":
        """Placeholder for a run the planner could not finish"""
        return cls(
            outcome=FAILED,
            cost=float("nan"),
            solve_times=[],
            rest_times=[],
            trace=[],
            min_accel=float("nan"),
            variant=variant,
            scenario=scenario,
            seed=seed,
            failed=True,
            error=error,
        )

    def summary(self) -> dict:
        return {
            "variant": self.variant,
            "scenario": self.scenario,
            "seed": self.seed,
            "outcome": self.outcome,
            "failed": self.failed,
            "error": self.error,
            "cost": self.cost,
            "n_steps": self.n_steps,
            "min_accel": self.min_accel,
            "fallback_steps": self.fallback_steps,
            "emergency_steps": self.emergency_steps,
            "mean_solve_ms": float(np.mean(self.solve_times)) if self.solve_times else float("nan"),
            "max_solve_ms": float(np.max(self.solve_times)) if self.solve_times else float("nan"),
            "mean_rest_ms": float(np.mean(self.rest_times)) if self.rest_times else float("nan"),
        }


def _traffic_accel(agent: TPAgent, agents: List[TPAgent], fixture: ScenarioFixture, z: np.ndarray) -> float:
    if agent.idm is None:
        return agent.accel()
    gap, lead_speed = None, None
    leader = leader_of(agent, agents)
    if leader is not None:
        gap = leader.s - agent.s - 0.5 * (leader.dims.length + agent.dims.length)
        lead_speed = leader.v
    if fixture.merge is not None and fixture.merge.in_lane(fixture.path, z[X], z[Y]):
        s_ego = float(agent.route.project(z[X], z[Y]))
        if s_ego > agent.s:
            ego_gap = s_ego - agent.s - 0.5 * (fixture.limits.length + agent.dims.length)
            if gap is None or ego_gap < gap:
                gap, lead_speed = ego_gap, float(z[V])
    if gap is not None and gap <= MIN_GAP:
        logger.warning(f"Participant {agent.tp_id}: gap {gap:.2f} m clamped to {MIN_GAP} m")
        gap = MIN_GAP
    return max(agent.accel(gap, lead_speed), -MAX_TRAFFIC_DECEL)


def _header(fixture: ScenarioFixture, variant: PlannerVariant, seed: int, config: ExperimentConfig) -> dict:
    merge = None
    if fixture.merge is not None:
        merge = {"ramp_end_theta": fixture.merge.ramp_end_theta, "tolerance": fixture.merge.tolerance}
    return {
        "record": "header",
        "scenario": fixture.kind,
        "name": fixture.name,
        "variant": variant.name,
        "seed": seed,
        "dt": config.dt,
        "horizon": config.horizon,
        "ego_dims": [fixture.limits.length, fixture.limits.width],
        "goal_theta": fixture.goal_theta,
        "merge": merge,
        "participants": [
            {"id": a.tp_id, "length": a.dims.length, "width": a.dims.width, "behavior": a.behavior} for a in fixture.agents
        ],
        "weights": asdict(config.weights),
    }


def run_closed_loop(
    fixture: ScenarioFixture,
    variant: Union[str, PlannerVariant],
    seed: int = 0,
    config: Optional[ExperimentConfig] = None,
    trace_path: Optional[str] = None,
) -> RunResult:
    """
    Simulate the ego planner in closed loop until a terminal condition

    Each step senses the exact participant states, runs a planning cycle, applies the
    first shared input and moves the traffic. An infeasible solve falls back to comfortable
    braking, or to braking at the friction bound when even the least-violating plan
    overlaps a predicted participant. The run ends on collision, goal, ramp end or
    standstill on the ramp, or timeout.

    Args:
        fixture (ScenarioFixture): World to simulate
        variant: Planner variant or its name
        seed (int): Seed of the predictor's jitter stream
        config (ExperimentConfig): Horizon, step, weights and planner settings
        trace_path (str): JSON-lines trace file; the trace is kept in memory either way

    Returns:
        RunResult: Classified outcome, realized cost and timings
    """
    config = config or ExperimentConfig()
    variant = get_variant(variant) if isinstance(variant, str) else variant
    fixture.validate()
    dt, limits, path = config.dt, fixture.limits, fixture.path
    planner = BranchPlanner(
        path,
        make_predictor(config.prediction, seed),
        variant,
        config.horizon,
        dt,
        config.weights,
        limits,
        config.selection,
        config.postponing,
        config.solver,
    )
    agents = fixture.copy_agents()
    histories = {a.tp_id: [a.state] for a in agents}
    z = fixture.z0.as_array()
    previous = None
    max_steps = int(round(fixture.timeout / dt))
    merged = False
    standstill = 0
    solve_ms, rest_ms = [], []
    fallbacks = 0
    emergencies = 0

    with TraceWriter(trace_path) as writer:
        writer.write(_header(fixture, variant, seed, config))
        for step in range(max_steps + 1):
            # Sense the world and check terminal conditions
            z[THETA] = float(path.project(z[X], z[Y]))
            ego_fp = RectFootprint.at(z[X], z[Y], z[PSI], limits.dims)
            collision = any(rect_overlap(ego_fp, a.footprint()) for a in agents)
            merged_now = fixture.merge is not None and fixture.merge.merged(path, z[X], z[Y])
            merged = merged or merged_now
            record = {
                "record": "step",
                "step": step,
                "t": step * dt,
                "ego": z.tolist(),
                "tps": [dict(zip(("x", "y", "psi", "v"), a.state.tolist()), id=a.tp_id) for a in agents],
                "merged": merged_now,
                "collision": collision,
            }

            terminal = None
            if collision:
                terminal = "collision"
            elif z[THETA] >= fixture.goal_theta and (fixture.merge is None or merged):
                terminal = "goal"
            elif fixture.merge is not None and not merged and z[THETA] > fixture.merge.ramp_end_theta:
                terminal = "ramp_end"
            elif fixture.merge is not None and not merged and standstill * dt >= STANDSTILL_TIME:
                terminal = "stopped"
            elif step == max_steps:
                terminal = "timeout"
            if terminal is not None:
                record.update(input=None, terminal=terminal)
                writer.write(record)
                break

            # Plan on exact participant histories
            scene = Scene(
                [TrackedParticipant(a.tp_id, a.dims, np.array(histories[a.tp_id]), a.intents) for a in agents],
                dt,
                cycle=step,
            )
            plan, diagnostics = planner.plan_cycle(scene, EgoState.from_array(z), previous)
            fallback = plan.status == INFEASIBLE
            emergency = fallback and diagnostics.obstacle_violation > config.solver.feasibility_tol
            if fallback:
                reuse = previous.inputs[previous.main_branch(), 1] if previous is not None and previous.inputs.shape[1] > 1 else None
                decel = limits.a_lon_max if emergency else config.fallback_decel
                u = comfort_braking_input(z, decel, dt, limits, reuse)
                logger.warning(f"Step {step}: plan infeasible (violation {plan.violation:.3f}), braking at {decel} m/s^2")
                fallbacks += 1
                emergencies += int(emergency)
                previous = None
            else:
                u = plan.first_input()
                previous = plan
            u = np.clip(u, limits.input_lower, limits.input_upper)
            record.update(
                input=u.tolist(),
                fallback=fallback,
                emergency=emergency,
                planner=diagnostics.to_dict(),
                branches=plan.states[..., [X, Y, V]].round(4).tolist(),
            )
            writer.write(record)
            solve_ms.append(1e3 * diagnostics.solve_time)
            rest_ms.append(1e3 * diagnostics.selection_time)

            # Traffic reacts to the ego state before it moves
            accels = [_traffic_accel(a, agents, fixture, z) for a in agents]
            z = rk4_step(z, u, dt, limits.wheelbase)
            if z[V] < 0.0:
                z[V], z[A] = 0.0, max(z[A], 0.0)
            for agent, accel in zip(agents, accels):
                agent.advance(accel, dt)
                histories[agent.tp_id].append(agent.state)
            standstill = standstill + 1 if z[V] < 0.1 else 0

    trace = writer.records
    steps = split_trace(trace)[1]
    result = RunResult(
        outcome=classify_outcome(trace),
        cost=closed_loop_cost(trace, config.weights, path),
        solve_times=solve_ms,
        rest_times=rest_ms,
        trace=trace,
        n_steps=len(steps),
        min_accel=float(min(r["ego"][A] for r in steps)),
        fallback_steps=fallbacks,
        emergency_steps=emergencies,
        variant=variant.name,
        scenario=fixture.name,
        seed=seed,
    )
    logger.info(
        f"Run {fixture.name} [{variant.name}] seed {seed}: {result.outcome} after {result.n_steps} steps, "
        f"cost {result.cost:.1f}, mean solve {result.summary()['mean_solve_ms']:.1f} ms"
    )
    return result


def classify_outcome(trace: List[dict]) -> str:
    """
    Collision if the ego rectangle overlaps a participant at any step; aborted if a
    merging ego never joined the mainline before the ramp end, or if the ego never
    reached its goal in a scenario without a merge; success otherwise
    """
    header, steps = split_trace(trace)
    ego_dims = Dimensions(*header["ego_dims"])
    dims = {p["id"]: Dimensions(p["length"], p["width"]) for p in header["participants"]}
    for r in steps:
        ego = RectFootprint.at(r["ego"][X], r["ego"][Y], r["ego"][PSI], ego_dims)
        for tp in r["tps"]:
            if rect_overlap(ego, RectFootprint.at(tp["x"], tp["y"], tp["psi"], dims[tp["id"]])):
                return COLLISION
    merge = header.get("merge")
    if merge is not None:
        if not any(r["merged"] and r["ego"][THETA] <= merge["ramp_end_theta"] for r in steps):
            return ABORTED
        return SUCCESS
    if not any(r["ego"][THETA] >= header["goal_theta"] for r in steps):
        return ABORTED
    return SUCCESS


def closed_loop_cost(trace: List[dict], weights: CostWeights, path: ReferencePath) -> float:
    """
    Running cost summed over the executed steps, on realized ego states and inputs and
    realized participant positions

    Args:
        trace: Header and step records of a run
        weights (CostWeights): Cost weights
        path (ReferencePath): Ego reference path of the run

    Returns:
        float: Closed-loop cost
    """
    header, steps = split_trace(trace)
    dims = {p["id"]: Dimensions(p["length"], p["width"]) for p in header["participants"]}
    cov = REALIZED_SIGMA**2 * np.eye(2)
    total = 0.0
    for r in steps:
        if r.get("input") is None:
            continue
        obstacles = [
            (GaussianState(np.array([tp["x"], tp["y"]]), cov, tp["psi"], tp["v"]), dims[tp["id"]]) for tp in r["tps"]
        ]
        total += running_cost(EgoState.from_array(r["ego"]), ControlInput.from_array(r["input"]), path, weights, obstacles)
    return float(total)


def describe_error(error: Exception) -> str:
    """Planner errors by message, anything else prefixed with its type"""
    if isinstance(error, PlannerError):
        return str(error)
    return f"{type(error).__name__}: {error}"


def velocity_rows(result: RunResult, **labels) -> List[dict]:
    """Executed ego speed and acceleration per step"""
    rows = []
    for r in result.trace:
        if r.get("record") != "step":
            continue
        ego = r["ego"]
        rows.append(dict(labels, t=r["t"], x=ego[X], y=ego[Y], v=ego[V], a=ego[A], theta=ego[THETA]))
    return rows


def branch_rows(result: RunResult, dt: float, **labels) -> List[dict]:
    """Planned branch trajectories of every cycle, one row per (cycle, branch, stage)"""
    rows = []
    for r in result.trace:
        if r.get("record") != "step" or "branches" not in r:
            continue
        for branch, states in enumerate(r["branches"]):
            for k, (x, y, v) in enumerate(states):
                rows.append(dict(labels, step=r["step"], t=r["t"] + k * dt, branch=branch, k=k, x=x, y=y, v=v))
    return rows
