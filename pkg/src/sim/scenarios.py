"""
Scenario fixtures for closed-loop runs: the crossing intersection, randomized highway
merges and scenarios described in a YAML file
"""

import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import yaml

from src.errors import ConfigurationError, PlannerError
from src.prediction.gmm_predictor import advance_constant_accel
from src.prediction.intents import AccelProfile, Intent
from src.sim.idm import IDMParams, IDMRanges, idm_accel
from src.vehicle.bicycle_model import EgoState, VehicleLimits
from src.world.path_world import Dimensions, RectFootprint, ReferencePath, build_path, contour_lag_errors, rect_overlap, straight_path

logger = logging.getLogger(__name__)

INTERSECTION = "intersection"
MERGING = "merging"
CUSTOM = "custom"
SCENARIO_KINDS = (INTERSECTION, MERGING, CUSTOM)

MIN_GAP = 0.1
MAINLINE_CAR = Dimensions(4.5, 2.0)


@dataclass
class TPAgent:
    """
    Simulated traffic participant moving along a route

    The longitudinal motion comes from ``idm`` when set, otherwise from the scripted
    acceleration law ``script``. ``intents`` are what the predictor is told to consider.
    """

    tp_id: int
    dims: Dimensions
    route: ReferencePath
    s: float
    v: float
    intents: List[Intent]
    idm: Optional[IDMParams] = None
    script: Optional[AccelProfile] = None
    behavior: str = ""
    lane: str = ""

    def __post_init__(self):
        if self.idm is None and self.script is None:
            raise ConfigurationError(f"participants.{self.tp_id}", "needs either IDM parameters or a scripted intent")
        if not 0.0 <= self.s <= self.route.theta_max:
            raise ConfigurationError(f"participants.{self.tp_id}.s", f"must lie on the route [0, {self.route.theta_max:.1f}]")
        if self.v < 0:
            raise ConfigurationError(f"participants.{self.tp_id}.v", "must be >= 0")

    @property
    def state(self) -> np.ndarray:
        """(x, y, psi, v)"""
        q = self.route.query(self.s)
        return np.array([float(q.x), float(q.y), float(q.psi), self.v])

    def footprint(self) -> RectFootprint:
        x, y, psi, _ = self.state
        return RectFootprint.at(x, y, psi, self.dims)

    def accel(self, gap: Optional[float] = None, lead_speed: Optional[float] = None) -> float:
        if self.idm is None:
            return self.script(self.s, self.v)
        return idm_accel(self.idm, self.v, gap, lead_speed)

    def advance(self, a: float, dt: float):
        if self.s >= self.route.theta_max:
            self.v = 0.0
            return
        v_hi = self.idm.v0 if self.idm is not None and a > 0 else math.inf
        self.s, self.v = advance_constant_accel(self.s, self.v, a, dt, 0.0, max(v_hi, self.v))
        if self.s >= self.route.theta_max:
            self.s, self.v = self.route.theta_max, 0.0


@dataclass(frozen=True)
class MergeZone:
    """Where the ego must have joined the mainline: arclength of the ramp end on the ego path"""

    ramp_end_theta: float
    tolerance: float = 1.0
    lane_width: float = 3.75

    def merged(self, path: ReferencePath, x: float, y: float) -> bool:
        theta = float(path.project(x, y))
        e_c, _ = contour_lag_errors(path, x, y, theta)
        return abs(e_c) <= self.tolerance

    def in_lane(self, path: ReferencePath, x: float, y: float) -> bool:
        """Ego center inside the mainline lane, so mainline traffic follows it"""
        theta = float(path.project(x, y))
        e_c, _ = contour_lag_errors(path, x, y, theta)
        return abs(e_c) < self.lane_width / 2.0


@dataclass
class ScenarioFixture:
    kind: str
    path: ReferencePath
    z0: EgoState
    agents: List[TPAgent]
    limits: VehicleLimits
    goal_theta: float
    timeout: float
    merge: Optional[MergeZone] = None
    name: str = ""

    def validate(self):
        """
        Raises:
            ConfigurationError: on inconsistent fixtures, before any simulation step
        """
        if self.kind not in SCENARIO_KINDS:
            raise ConfigurationError("scenario", f"unknown kind {self.kind!r}")
        if not 0.0 <= self.z0.theta <= self.path.theta_max:
            raise ConfigurationError("ego.theta", "initial arclength lies outside the ego path")
        if not 0.0 < self.goal_theta <= self.path.theta_max:
            raise ConfigurationError("goal_theta", f"must lie in (0, {self.path.theta_max:.1f}]")
        if self.timeout <= 0:
            raise ConfigurationError("timeout", "must be > 0")
        if self.z0.v < 0 or self.z0.v > self.limits.v_max:
            raise ConfigurationError("ego.v", f"must lie in [0, {self.limits.v_max}]")
        ids = [a.tp_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ConfigurationError("participants", "participant ids must be unique")
        ego = RectFootprint.at(self.z0.x, self.z0.y, self.z0.psi, self.limits.dims)
        for agent in self.agents:
            if rect_overlap(ego, agent.footprint()):
                raise ConfigurationError(f"participants.{agent.tp_id}", "overlaps the ego at the start")

    def copy_agents(self) -> List[TPAgent]:
        return [replace(a) for a in self.agents]


def ego_on_path(path: ReferencePath, x: float, y: float, psi: float, v: float) -> EgoState:
    return EgoState(x, y, psi, v, 0.0, 0.0, float(path.project(x, y)))


@dataclass(frozen=True)
class IntersectionConfig:
    """
    Crossing fixture: the ego drives east, one participant approaches from the north and
    either turns right into a side street before the ego lane or crosses it
    """

    ego_start_x: float = -35.0
    ego_speed: float = 10.0
    half_width: float = 2.5
    tp_x: float = -2.0
    tp_start_y: float = 33.0
    tp_speed: float = 10.0
    side_street_y: float = 12.0
    turn_radius: float = 5.0
    turn_speed: float = 5.0
    brake_zone: float = 8.0
    turn_prior: float = 0.6
    goal_x: float = 25.0
    timeout: float = 12.0
    v_max: float = 12.0
    behaviors: Tuple[str, ...] = ("turn", "cross")

    def __post_init__(self):
        if not 0.0 < self.turn_prior < 1.0:
            raise ConfigurationError("intersection.turn_prior", "must lie in (0, 1)")
        if self.side_street_y - self.turn_radius <= self.half_width:
            raise ConfigurationError("intersection.side_street_y", "the turn must end clear of the ego lane")
        for b in self.behaviors:
            if b not in ("turn", "cross"):
                raise ConfigurationError("intersection.behaviors", f"unknown behavior {b!r}")


def intersection_routes(cfg: IntersectionConfig) -> Tuple[ReferencePath, ReferencePath, float]:
    """Turn and cross routes of the participant and the arclength where the turn starts"""
    top = cfg.tp_start_y + 12.0
    approach = top - (cfg.side_street_y + cfg.turn_radius)
    heading = -math.pi / 2.0
    turn = build_path((cfg.tp_x, top), heading, [("straight", approach), ("arc", cfg.turn_radius, -math.pi / 2.0), ("straight", 40.0)], 2.0, 2.0, name="turn")
    cross = build_path((cfg.tp_x, top), heading, [("straight", 2.0 * top)], 2.0, 2.0, name="cross")
    return turn, cross, approach


def intersection_fixture(cfg: IntersectionConfig, behavior: str, limits: Optional[VehicleLimits] = None) -> ScenarioFixture:
    """
    Args:
        cfg (IntersectionConfig): Geometry and speeds
        behavior (str): What the participant actually does, ``turn`` or ``cross``
        limits (VehicleLimits): Ego limits; the speed cap is taken from ``cfg``

    Returns:
        ScenarioFixture: Validated fixture
    """
    limits = replace(limits or VehicleLimits(), v_max=cfg.v_max)
    path = straight_path(100.0, start=(-40.0, 0.0), half_width=cfg.half_width, name="ego")
    turn_route, cross_route, turn_start = intersection_routes(cfg)
    turn_profile = AccelProfile(accel=0.0, target_speed=cfg.turn_speed, target_arclength=turn_start, brake_zone=cfg.brake_zone)
    cross_profile = AccelProfile(accel=0.0)
    intents = [
        Intent("turn", turn_route, turn_profile, cfg.turn_prior),
        Intent("cross", cross_route, cross_profile, 1.0 - cfg.turn_prior),
    ]
    if behavior not in ("turn", "cross"):
        raise ConfigurationError("intersection.behaviors", f"unknown behavior {behavior!r}")
    route, script = (turn_route, turn_profile) if behavior == "turn" else (cross_route, cross_profile)
    tp = TPAgent(
        tp_id=1,
        dims=Dimensions(4.5, 2.0),
        route=route,
        s=float(route.project(cfg.tp_x, cfg.tp_start_y)),
        v=cfg.tp_speed,
        intents=intents,
        script=script,
        behavior=behavior,
    )
    fixture = ScenarioFixture(
        kind=INTERSECTION,
        path=path,
        z0=ego_on_path(path, cfg.ego_start_x, 0.0, 0.0, cfg.ego_speed),
        agents=[tp],
        limits=limits,
        goal_theta=float(path.project(cfg.goal_x, 0.0)),
        timeout=cfg.timeout,
        name=f"intersection_{behavior}",
    )
    fixture.validate()
    return fixture


@dataclass(frozen=True)
class MergingConfig:
    """
    Ramp merge into a single mainline lane; the ego starts on the ramp and the mainline
    carries 2-4 IDM vehicles with sampled gaps, speeds and parameters
    """

    lane_width: float = 3.75
    ramp_length: float = 200.0
    ramp_end_x: float = 150.0
    taper: float = 10.0
    ego_start_x: float = 0.0
    ego_speed: float = 20.0
    goal_x: float = 260.0
    timeout: float = 20.0
    v_max: float = 25.0
    merge_tolerance: float = 1.0
    n_tps: Tuple[int, int] = (2, 4)
    first_offset: Tuple[float, float] = (-30.0, 30.0)
    gap: Tuple[float, float] = (12.0, 35.0)
    speed: Tuple[float, float] = (18.0, 26.0)
    idm: IDMRanges = field(default_factory=IDMRanges)

    def __post_init__(self):
        if not 1 <= self.n_tps[0] <= self.n_tps[1]:
            raise ConfigurationError("merging.n_tps", "must be a range 1 <= low <= high")
        if self.ramp_end_x - self.ramp_length > self.ego_start_x or self.ego_start_x >= self.ramp_end_x:
            raise ConfigurationError("merging.ego_start_x", "the ego must start on the ramp")
        if self.goal_x <= self.ramp_end_x + self.taper:
            raise ConfigurationError("merging.goal_x", "must lie beyond the ramp end")
        for name in ("gap", "speed", "first_offset"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"merging.{name}", "low must not exceed high")


def merging_road(cfg: MergingConfig) -> Tuple[ReferencePath, float]:
    """Mainline reference path (the ego target lane) and the arclength of the ramp end"""
    # room behind the ramp for the rearmost sampled vehicle
    rearmost = cfg.ego_start_x + cfg.first_offset[0] - (cfg.n_tps[1] - 1) * (MAINLINE_CAR.length + cfg.gap[1])
    x_start = min(cfg.ramp_end_x - cfg.ramp_length, rearmost) - 50.0
    length = cfg.goal_x + 150.0 - x_start
    half = cfg.lane_width / 2.0
    ramp_begin = cfg.ramp_end_x - cfg.ramp_length - x_start
    ramp_end = cfg.ramp_end_x - x_start

    def right_side(theta):
        # ramp widens the road on the e_c > 0 side, tapering off after the ramp end
        taper = np.clip((theta - ramp_end) / cfg.taper, 0.0, 1.0)
        on_ramp = (theta >= ramp_begin) & (theta <= ramp_end + cfg.taper)
        return np.where(on_ramp, half + cfg.lane_width * (1.0 - taper), half)

    path = build_path((x_start, 0.0), 0.0, [("straight", length)], right_side, half, lane_markers=(half,), name="mainline")
    return path, ramp_end


def mainline_intents(route: ReferencePath) -> List[Intent]:
    return [
        Intent("yield", route, AccelProfile(accel=-1.5), 0.3),
        Intent("maintain", route, AccelProfile(accel=0.0), 0.4),
        Intent("accelerate", route, AccelProfile(accel=1.0), 0.3),
    ]


def merging_fixture(cfg: MergingConfig, rng: np.random.Generator, limits: Optional[VehicleLimits] = None) -> ScenarioFixture:
    """
    Sample one merging world

    Args:
        cfg (MergingConfig): Geometry and sampling ranges
        rng (np.random.Generator): Stream owned by this world
        limits (VehicleLimits): Ego limits; the speed cap is taken from ``cfg``

    Returns:
        ScenarioFixture: Validated fixture with the mainline traffic ordered front to back
    """
    limits = replace(limits or VehicleLimits(), v_max=cfg.v_max)
    path, ramp_end = merging_road(cfg)
    n = int(rng.integers(cfg.n_tps[0], cfg.n_tps[1] + 1))
    dims = MAINLINE_CAR
    x = cfg.ego_start_x + float(rng.uniform(*cfg.first_offset))
    agents = []
    for i in range(n):
        if i > 0:
            x -= dims.length + float(rng.uniform(*cfg.gap))
        s = float(path.project(x, 0.0))
        agents.append(
            TPAgent(
                tp_id=i + 1,
                dims=dims,
                route=path,
                s=min(max(s, 0.0), path.theta_max),
                v=float(rng.uniform(*cfg.speed)),
                intents=mainline_intents(path),
                idm=cfg.idm.sample(rng),
                behavior="idm",
                lane="main",
            )
        )
    fixture = ScenarioFixture(
        kind=MERGING,
        path=path,
        z0=ego_on_path(path, cfg.ego_start_x, -cfg.lane_width, 0.0, cfg.ego_speed),
        agents=agents,
        limits=limits,
        goal_theta=float(path.project(cfg.goal_x, 0.0)),
        timeout=cfg.timeout,
        merge=MergeZone(ramp_end, cfg.merge_tolerance, cfg.lane_width),
        name="merging",
    )
    fixture.validate()
    return fixture


def _profile(entry: dict, where: str) -> AccelProfile:
    keys = ("accel", "v_min", "v_max", "target_speed", "target_arclength", "brake_zone", "max_decel")
    try:
        return AccelProfile(**{k: float(entry[k]) for k in keys if entry.get(k) is not None})
    except (TypeError, ValueError) as e:
        raise ConfigurationError(where, str(e)) from e


def _load_path(base: str, entry, where: str, lane_markers=()) -> ReferencePath:
    if not isinstance(entry, str):
        raise ConfigurationError(where, "must be a path file name")
    file_path = entry if os.path.isabs(entry) else os.path.join(base, entry)
    if not os.path.exists(file_path):
        raise ConfigurationError(where, f"file not found: {file_path}")
    try:
        return ReferencePath.from_file(file_path, lane_markers=lane_markers)
    except PlannerError as e:
        raise ConfigurationError(where, str(e)) from e


def load_custom_fixture(path: str, limits: Optional[VehicleLimits] = None) -> ScenarioFixture:
    """
    Load a scenario described in YAML

    Path files are resolved relative to the scenario file. Each participant lists its
    candidate intents; ``behavior`` names the intent it executes, or ``idm`` for
    car-following along the route of its first intent.

    Args:
        path (str): Scenario file
        limits (VehicleLimits): Ego limits; ``v_max`` in the file overrides the speed cap

    Returns:
        ScenarioFixture: Validated fixture
    """
    if not os.path.exists(path):
        raise ConfigurationError("scenario_file", f"file not found: {path}")
    with open(path, "r") as f:
        data = yaml.safe_load(f) or {}
    base = os.path.dirname(os.path.abspath(path))
    limits = limits or VehicleLimits()
    if "v_max" in data:
        limits = replace(limits, v_max=float(data["v_max"]))

    ego = data.get("ego") or {}
    ego_path = _load_path(base, ego.get("path"), "ego.path", ego.get("lane_markers", ()))
    state = ego.get("state") or {}
    try:
        x, y = float(state["x"]), float(state["y"])
    except (KeyError, TypeError, ValueError):
        raise ConfigurationError("ego.state", "needs numeric x and y") from None
    z0 = ego_on_path(ego_path, x, y, float(state.get("psi", 0.0)), float(state.get("v", 0.0)))

    agents = []
    for i, entry in enumerate(data.get("participants") or []):
        where = f"participants[{i}]"
        intents = []
        for j, it in enumerate(entry.get("intents") or []):
            route = _load_path(base, it.get("route"), f"{where}.intents[{j}].route")
            intents.append(Intent(str(it.get("label", f"intent{j}")), route, _profile(it, f"{where}.intents[{j}]"), float(it.get("weight", 1.0))))
        if not intents:
            raise ConfigurationError(f"{where}.intents", "at least one intent is required")
        behavior = str(entry.get("behavior", intents[0].label))
        idm = None
        if behavior == "idm":
            route, script = intents[0].route, None
            try:
                idm = IDMParams(**(entry.get("idm") or {}))
            except TypeError as e:
                raise ConfigurationError(f"{where}.idm", str(e)) from e
        else:
            chosen = [it for it in intents if it.label == behavior]
            if not chosen:
                raise ConfigurationError(f"{where}.behavior", f"no intent labeled {behavior!r}")
            route, script = chosen[0].route, chosen[0].profile
        st = entry.get("state") or {}
        s = float(route.project(float(st["x"]), float(st["y"]))) if "x" in st and "y" in st else float(st.get("s", 0.0))
        agents.append(
            TPAgent(
                tp_id=int(entry.get("id", i + 1)),
                dims=Dimensions(float(entry.get("length", 4.5)), float(entry.get("width", 2.0))),
                route=route,
                s=s,
                v=float(st.get("v", 0.0)),
                intents=intents,
                idm=idm,
                script=script,
                behavior=behavior,
                lane=str(entry.get("lane", "")),
            )
        )

    merge = None
    if data.get("merge"):
        m = data["merge"]
        merge = MergeZone(float(m["ramp_end_theta"]), float(m.get("tolerance", 1.0)), float(m.get("lane_width", 3.75)))
    fixture = ScenarioFixture(
        kind=CUSTOM,
        path=ego_path,
        z0=z0,
        agents=agents,
        limits=limits,
        goal_theta=float(data.get("goal_theta", ego_path.theta_max)),
        timeout=float(data.get("timeout", 15.0)),
        merge=merge,
        name=str(data.get("name", os.path.splitext(os.path.basename(path))[0])),
    )
    fixture.validate()
    logger.info(f"Loaded scenario {fixture.name!r} with {len(agents)} participants from {path}")
    return fixture


def leader_of(agent: TPAgent, agents: List[TPAgent]) -> Optional[TPAgent]:
    """Closest participant ahead on the same lane"""
    if not agent.lane:
        return None
    ahead = [o for o in agents if o is not agent and o.lane == agent.lane and o.s > agent.s]
    return min(ahead, key=lambda o: o.s) if ahead else None
