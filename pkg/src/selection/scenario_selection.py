"""
Scenario selection: topology clustering of predicted modes against the ego plan,
collision-event-probability ranking and cluster weights
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from src.errors import ContractError
from src.prediction.gmm_predictor import GaussianState, ModePrediction, PredictionSet, check_spd
from src.vehicle.bicycle_model import PSI, N_X, EgoState, VehicleLimits, rk4_step, transition_error
from src.world.path_world import Dimensions, segments_hit_rects, wrap_angle

logger = logging.getLogger(__name__)

QUADRATURE_NODES = 16
ALIGNED_HEADING = np.deg2rad(15.0)
CROSSED_HEADING = np.deg2rad(75.0)
CLIP_SIGMAS = 6.0

_GL_NODES, _GL_WEIGHTS = leggauss(QUADRATURE_NODES)


class PlanTrajectory:
    def __init__(self, states: np.ndarray, dt: float):
        """
        Single-branch ego plan used as the reference for clustering and risk

        Args:
            states (np.ndarray): Ego states (N, 7); (x, y) is the body center
            dt (float): Step between states (s)
        """
        self.states = np.asarray(states, dtype=float)
        self.dt = float(dt)
        if self.states.ndim != 2 or self.states.shape[1] != N_X or self.states.shape[0] < 2:
            raise ContractError(f"plan states must have shape (N, {N_X}), got {self.states.shape}")

    @property
    def horizon(self) -> int:
        return int(self.states.shape[0])

    def check_consistency(self, limits: VehicleLimits, tol: float = 1e-3) -> float:
        """Largest one-step transition error; raises ContractError above ``tol``"""
        worst = max(transition_error(self.states[k], self.states[k + 1], self.dt, limits) for k in range(self.horizon - 1))
        if worst > tol:
            raise ContractError(f"plan transitions are not dynamically consistent (error {worst:.2e})")
        return worst

    @classmethod
    def constant_velocity(cls, z0: EgoState, horizon: int, dt: float, limits: VehicleLimits) -> "PlanTrajectory":
        """Rollout with zero jerk and steering rate from z0 with its acceleration zeroed"""
        z = z0.as_array()
        z[4] = 0.0
        states = np.empty((horizon, N_X))
        states[0] = z
        u = np.array([0.0, 0.0, max(z[3], 0.0)])
        for k in range(horizon - 1):
            states[k + 1] = rk4_step(states[k], u, dt, limits.wheelbase)
        return cls(states, dt)

    def extended(self, u_last: np.ndarray, limits: VehicleLimits) -> "PlanTrajectory":
        """Drop the first state and append one step with ``u_last`` (receding-horizon shift)"""
        tail = rk4_step(self.states[-1], u_last, self.dt, limits.wheelbase)
        return PlanTrajectory(np.vstack([self.states[1:], tail]), self.dt)


@dataclass
class Scenario:
    """One branch of the tree: the representative joint mode, its per-participant modes and weight"""

    scenario_id: int
    modes: List[ModePrediction]
    dims: List[Dimensions]
    weight: float
    members: List[int]


@dataclass
class ScenarioTree:
    scenarios: List[Scenario]
    horizon: int
    dt: float
    branching_index: int = 0

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)

    @property
    def weights(self) -> np.ndarray:
        return np.array([s.weight for s in self.scenarios])

    @classmethod
    def empty(cls, horizon: int, dt: float) -> "ScenarioTree":
        """Tree of a scene without participants: one unconstrained scenario"""
        return cls([Scenario(0, [], [], 1.0, [0])], horizon, dt, 0)

    def validate(self, s_max: Optional[int] = None):
        if not self.scenarios:
            raise ContractError("scenario tree has no scenarios")
        if s_max is not None and self.n_scenarios > s_max:
            raise ContractError(f"{self.n_scenarios} scenarios exceed S_max={s_max}")
        if abs(self.weights.sum() - 1.0) > 1e-6:
            raise ContractError(f"scenario weights sum to {self.weights.sum():.8f}")
        if not 0 <= self.branching_index <= self.horizon - 1:
            raise ContractError(f"branching index {self.branching_index} outside [0, {self.horizon - 1}]")
        for s in self.scenarios:
            if not s.members:
                raise ContractError(f"scenario {s.scenario_id} has an empty cluster")
            for mode in s.modes:
                if mode.horizon != self.horizon:
                    raise ContractError(f"scenario {s.scenario_id} mode horizon {mode.horizon} != {self.horizon}")


@dataclass
class RiskReport:
    """
    Collision risk per (participant o, mode index m)

    ``cep`` is clamped to [0, 1], ``cep_raw`` is the unclamped accumulated sum and
    ``density`` holds the per-step densities (n_tps, n_modes, N) in 1/s.
    """

    cep: np.ndarray
    cep_raw: np.ndarray
    density: np.ndarray
    prob: np.ndarray
    lam: float

    @property
    def decision(self) -> np.ndarray:
        return self.cep + self.lam * self.prob

    def max_cep(self) -> np.ndarray:
        """Largest CEP over modes, per participant"""
        return self.cep.max(axis=1) if self.cep.size else np.zeros(0)

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "cep": self.cep.round(6).tolist(),
            "cep_raw": self.cep_raw.round(6).tolist(),
            "decision": self.decision.round(6).tolist(),
        }


def uvd_equivalent(traj_a: ModePrediction, traj_b: ModePrediction, ego_plan: PlanTrajectory, ego_footprint: Dimensions) -> bool:
    """
    True iff no segment joining corresponding mean positions of the two trajectories
    crosses the ego rectangle at the same plan step

    Raises:
        ContractError: if the horizons differ
    """
    n = ego_plan.horizon
    if traj_a.horizon != n or traj_b.horizon != n:
        raise ContractError(f"horizon mismatch: {traj_a.horizon}, {traj_b.horizon} vs plan {n}")
    s = ego_plan.states
    hits = segments_hit_rects(traj_a.mu, traj_b.mu, s[:, 0], s[:, 1], s[:, PSI], ego_footprint.length, ego_footprint.width)
    return not bool(np.any(hits))


def cluster_modes(pset: PredictionSet, ego_plan: PlanTrajectory, ego_footprint: Dimensions) -> List[List[int]]:
    """
    Partition joint modes into topology clusters

    Two joint modes are equivalent when every participant's pair of modes is
    UVD-equivalent; clusters are the connected components of that relation.

    Args:
        pset (PredictionSet): Predictions with at least one participant
        ego_plan (PlanTrajectory): Plan from the previous cycle
        ego_footprint (Dimensions): Ego body size

    Returns:
        List[List[int]]: Sorted joint-mode indices per cluster, clusters ordered by smallest member
    """
    if pset.is_empty():
        raise ContractError("clustering needs at least one participant")
    n = pset.n_joint_modes
    rows, cols = [], []
    for i in range(n):
        for j in range(i + 1, n):
            if all(
                uvd_equivalent(pset.joint_mode(o, i), pset.joint_mode(o, j), ego_plan, ego_footprint)
                for o in range(pset.n_tps)
            ):
                rows.append(i)
                cols.append(j)
    graph = coo_matrix((np.ones(len(rows)), (np.array(rows, dtype=int), np.array(cols, dtype=int))), shape=(n, n))
    n_clusters, labels = connected_components(graph, directed=False)
    clusters = [sorted(np.flatnonzero(labels == c).tolist()) for c in range(n_clusters)]
    return sorted(clusters, key=lambda c: c[0])


def minkowski_half_extents(ego_dims: Dimensions, tp_dims: Dimensions, relative_heading) -> np.ndarray:
    """
    Half extents (along, across the ego heading) of the ego rectangle inflated by the participant body

    Aligned bodies (within 15 degrees) add half length / half width, crossed bodies (beyond
    75 degrees) add them swapped, anything in between adds the participant's bounding-disc radius.
    """
    phi = np.abs(wrap_angle(relative_heading)) % np.pi
    phi = np.where(phi > np.pi / 2, np.pi - phi, phi)
    radius = tp_dims.diagonal / 2.0
    add_x = np.where(phi <= ALIGNED_HEADING, tp_dims.length / 2, np.where(phi >= CROSSED_HEADING, tp_dims.width / 2, radius))
    add_y = np.where(phi <= ALIGNED_HEADING, tp_dims.width / 2, np.where(phi >= CROSSED_HEADING, tp_dims.length / 2, radius))
    return np.stack([ego_dims.length / 2 + add_x, ego_dims.width / 2 + add_y], axis=-1)


def gaussian_box_mass(mu: np.ndarray, cov: np.ndarray, half: np.ndarray) -> np.ndarray:
    """
    Mass of N(mu, cov) over the centered boxes [-hx, hx] x [-hy, hy], batched over steps

    Args:
        mu: Means (K, 2) in the box frame
        cov: Covariances (K, 2, 2) in the box frame
        half: Half extents (K, 2)

    Returns:
        np.ndarray: Probability per step (K,), clamped to [0, 1]
    """
    sd = np.sqrt(np.stack([cov[:, 0, 0], cov[:, 1, 1]], axis=-1))
    lo = np.maximum(-half, mu - CLIP_SIGMAS * sd)
    hi = np.minimum(half, mu + CLIP_SIGMAS * sd)
    span = np.clip(hi - lo, 0.0, None)
    # nodes (K, Q) per axis
    gx = lo[:, :1] + span[:, :1] * (_GL_NODES + 1.0) / 2.0
    gy = lo[:, 1:] + span[:, 1:] * (_GL_NODES + 1.0) / 2.0
    wx = span[:, :1] / 2.0 * _GL_WEIGHTS
    wy = span[:, 1:] / 2.0 * _GL_WEIGHTS

    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    inv_xx = (cov[:, 1, 1] / det)[:, None, None]
    inv_yy = (cov[:, 0, 0] / det)[:, None, None]
    inv_xy = (-cov[:, 0, 1] / det)[:, None, None]
    dx = (gx - mu[:, :1])[:, :, None]
    dy = (gy - mu[:, 1:])[:, None, :]
    quad = inv_xx * dx**2 + 2.0 * inv_xy * dx * dy + inv_yy * dy**2
    pdf = np.exp(-0.5 * quad) / (2.0 * np.pi * np.sqrt(det))[:, None, None]
    mass = np.einsum("ki,kij,kj->k", wx, pdf, wy)
    return np.clip(mass, 0.0, 1.0)


def step_collision_probs(
    mu: np.ndarray, cov: np.ndarray, tp_psi: np.ndarray, tp_dims: Dimensions, ego_states: np.ndarray, ego_dims: Dimensions
) -> np.ndarray:
    """Per-step probability that the participant body overlaps the ego body"""
    ego_states = np.atleast_2d(ego_states)
    c, s = np.cos(ego_states[:, PSI]), np.sin(ego_states[:, PSI])
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (K, 2, 2) body -> world
    rel = np.einsum("kji,kj->ki", rot, np.atleast_2d(mu) - ego_states[:, :2])
    cov_local = np.einsum("kji,kjl,klm->kim", rot, np.reshape(cov, (-1, 2, 2)), rot)
    half = minkowski_half_extents(ego_dims, tp_dims, np.atleast_1d(tp_psi) - ego_states[:, PSI])
    return gaussian_box_mass(rel, cov_local, half)


def cep_density(
    tp_state: GaussianState, tp_footprint: Dimensions, ego_state: EgoState, ego_footprint: Dimensions, dt: float
) -> float:
    """
    Collision-event-probability density p_k / dt for one step

    Raises:
        ContractError: if the participant covariance is not SPD
    """
    check_spd(tp_state.cov)
    p = step_collision_probs(
        np.asarray(tp_state.mu)[None], np.asarray(tp_state.cov)[None], np.array([tp_state.psi]),
        tp_footprint, ego_state.as_array()[None], ego_footprint,
    )
    return float(p[0]) / dt


@dataclass
class CepEntry:
    cep: float
    cep_raw: float
    density: np.ndarray = field(repr=False)


def cep(tp_mode: ModePrediction, tp_footprint: Dimensions, ego_plan: PlanTrajectory, ego_footprint: Dimensions) -> CepEntry:
    """
    Accumulated collision event probability of one mode over the horizon

    Returns:
        CepEntry: Sum of density * dt clamped to [0, 1], the raw sum and the per-step densities
    """
    if tp_mode.horizon != ego_plan.horizon:
        raise ContractError(f"mode horizon {tp_mode.horizon} != plan horizon {ego_plan.horizon}")
    p = step_collision_probs(tp_mode.mu, tp_mode.cov, tp_mode.psi, tp_footprint, ego_plan.states, ego_footprint)
    density = p / ego_plan.dt
    raw = float(np.sum(density * ego_plan.dt))
    return CepEntry(min(max(raw, 0.0), 1.0), raw, density)


def compute_risk(pset: PredictionSet, ego_plan: PlanTrajectory, ego_footprint: Dimensions, lam: float) -> RiskReport:
    """Risk report over every (participant, mode) of the prediction set"""
    n_tps, n_modes = pset.n_tps, pset.n_joint_modes
    cep_c = np.zeros((n_tps, n_modes))
    cep_raw = np.zeros((n_tps, n_modes))
    density = np.zeros((n_tps, n_modes, pset.horizon))
    prob = np.zeros((n_tps, n_modes))
    for o in range(n_tps):
        for m in range(n_modes):
            mode = pset.joint_mode(o, m)
            entry = cep(mode, pset.dims[o], ego_plan, ego_footprint)
            cep_c[o, m], cep_raw[o, m], density[o, m] = entry.cep, entry.cep_raw, entry.density
            prob[o, m] = mode.prob
    return RiskReport(cep_c, cep_raw, density, prob, lam)


def _scenario(pset: PredictionSet, rep: int, weight: float, members: Sequence[int]) -> Scenario:
    return Scenario(rep, [pset.joint_mode(o, rep) for o in range(pset.n_tps)], list(pset.dims), weight, list(members))


def select_scenarios(
    pset: PredictionSet, clusters: List[List[int]], risk: RiskReport, lam: Optional[float] = None, s_max: int = 2
) -> ScenarioTree:
    """
    Pick one representative per cluster and keep the most relevant clusters

    The representative maximizes the decision value C + lam * pi summed over participants
    (lowest index wins ties); ``lam`` defaults to the one the risk was computed with.
    At most ``s_max`` clusters are kept, ranked by that value, and each kept scenario
    is weighted by its cluster's joint probability, renormalized.

    Returns:
        ScenarioTree: Tree with branching index 0
    """
    if any(len(c) == 0 for c in clusters):
        raise ContractError("cannot select from an empty cluster")
    if not clusters:
        raise ContractError("no clusters to select from")
    if s_max < 1:
        raise ContractError(f"s_max must be >= 1, got {s_max}")
    lam = risk.lam if lam is None else float(lam)
    score = (risk.cep + lam * risk.prob).sum(axis=0)
    joint_p = pset.joint_probs()
    picks = []
    for c in clusters:
        members = np.array(sorted(c))
        rep = int(members[np.argmax(score[members])])
        picks.append((float(score[rep]), rep, members))
    picks.sort(key=lambda t: (-t[0], t[2][0]))
    kept = picks[:s_max]
    omega = np.array([joint_p[members].sum() for _, _, members in kept])
    omega = omega / omega.sum() if omega.sum() > 0 else np.full(len(kept), 1.0 / len(kept))
    scenarios = [_scenario(pset, rep, float(w), members.tolist()) for (_, rep, members), w in zip(kept, omega)]
    if len(picks) > s_max:
        logger.debug(f"Kept {s_max} of {len(picks)} clusters")
    return ScenarioTree(scenarios, pset.horizon, pset.dt, 0)


def select_top_probability(pset: PredictionSet, n: int) -> ScenarioTree:
    """Baseline selection: the ``n`` most probable joint modes, each its own scenario"""
    joint_p = pset.joint_probs()
    order = sorted(range(joint_p.size), key=lambda m: (-joint_p[m], m))[:n]
    omega = joint_p[order]
    omega = omega / omega.sum() if omega.sum() > 0 else np.full(len(order), 1.0 / len(order))
    scenarios = [_scenario(pset, m, float(w), [m]) for m, w in zip(order, omega)]
    return ScenarioTree(scenarios, pset.horizon, pset.dt, 0)
