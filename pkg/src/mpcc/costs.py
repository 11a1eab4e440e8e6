"""
Running cost, potential fields and constraint residuals of the contouring controller,
each available per step and batched with state Jacobians for the solver
"""

import logging
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from src.errors import ConfigurationError
from src.prediction.gmm_predictor import GaussianState, ModePrediction
from src.vehicle.bicycle_model import PSI, THETA, X, Y, ControlInput, EgoState
from src.world.path_world import Dimensions, PathQuery, ReferencePath

logger = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)
SMOOTH_ABS_EPS = 1e-3


@dataclass(frozen=True)
class CostWeights:
    """
    Args:
        Q: Weight on (contouring, lag) error, 2x2 PSD
        q_v: Progress reward on the virtual speed
        R: Input weight, 3x3 PSD
        q_ob: Obstacle potential weight
        q_lm: Lane-marker potential weight
        sigma: Lane-marker potential width (m)
        q_bar: Penalty on arclength leaving [0, theta_max]
        margin: Extra clearance of the obstacle ellipse (m)
    """

    Q: Tuple[Tuple[float, float], Tuple[float, float]] = ((1.0, 0.0), (0.0, 5.0))
    q_v: float = 1.0
    R: Tuple[Tuple[float, ...], ...] = ((0.05, 0.0, 0.0), (0.0, 10.0, 0.0), (0.0, 0.0, 0.01))
    q_ob: float = 50.0
    q_lm: float = 5.0
    sigma: float = 0.5
    q_bar: float = 100.0
    margin: float = 0.2

    def __post_init__(self):
        for name, shape in (("Q", (2, 2)), ("R", (3, 3))):
            mat = np.asarray(getattr(self, name), dtype=float)
            if mat.shape != shape:
                raise ConfigurationError(f"weights.{name}", f"must be {shape[0]}x{shape[1]}")
            if not np.allclose(mat, mat.T) or np.linalg.eigvalsh(mat).min() < -1e-12:
                raise ConfigurationError(f"weights.{name}", "must be symmetric positive semi-definite")
        for name in ("q_v", "q_ob", "q_lm", "sigma"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"weights.{name}", "must be > 0")
        if self.q_bar < 0 or self.margin < 0:
            raise ConfigurationError("weights", "q_bar and margin must be >= 0")

    @property
    def Q_mat(self) -> np.ndarray:
        return np.asarray(self.Q, dtype=float)

    @property
    def R_mat(self) -> np.ndarray:
        return np.asarray(self.R, dtype=float)

    def Q_sqrt(self) -> np.ndarray:
        """L with L^T L = Q"""
        w, vec = np.linalg.eigh(self.Q_mat)
        return np.sqrt(np.clip(w, 0.0, None))[:, None] * vec.T


@dataclass
class ContourTerms:
    """Contouring / lag errors with their state gradients, plus the path lookup they came from"""

    e_c: np.ndarray
    e_l: np.ndarray
    de_c: np.ndarray
    de_l: np.ndarray
    query: PathQuery
    overshoot: np.ndarray
    inside: np.ndarray


def contour_terms(path: ReferencePath, Z: np.ndarray) -> ContourTerms:
    """
    Contouring and lag errors of states (..., 7) at their own arclength state

    Outside [0, theta_max] the path is clamped and its arclength derivatives vanish.
    """
    theta = Z[..., THETA]
    q = path.query(theta)
    inside = (theta >= 0.0) & (theta <= path.theta_max)
    dxr, dyr, dpsi = (np.where(inside, d, 0.0) for d in (q.dx, q.dy, q.dpsi))
    s, c = np.sin(q.psi), np.cos(q.psi)
    ex, ey = Z[..., X] - q.x, Z[..., Y] - q.y
    e_c = s * ex - c * ey
    e_l = -c * ex - s * ey
    de_c = np.zeros(Z.shape)
    de_l = np.zeros(Z.shape)
    de_c[..., X], de_c[..., Y] = s, -c
    de_l[..., X], de_l[..., Y] = -c, -s
    de_c[..., THETA] = dpsi * (c * ex + s * ey) - s * dxr + c * dyr
    de_l[..., THETA] = dpsi * (s * ex - c * ey) + c * dxr + s * dyr
    overshoot = theta - np.clip(theta, 0.0, path.theta_max)
    return ContourTerms(e_c, e_l, de_c, de_l, q, overshoot, inside)


def conservative_dims(mode: ModePrediction, dims: Dimensions) -> Tuple[np.ndarray, np.ndarray]:
    """Body length / width grown by two standard deviations along / across the heading, per step"""
    c, s = np.cos(mode.psi), np.sin(mode.psi)
    var_along = c * c * mode.cov[:, 0, 0] + 2 * c * s * mode.cov[:, 0, 1] + s * s * mode.cov[:, 1, 1]
    var_across = s * s * mode.cov[:, 0, 0] - 2 * c * s * mode.cov[:, 0, 1] + c * c * mode.cov[:, 1, 1]
    return dims.length + 2.0 * np.sqrt(var_along), dims.width + 2.0 * np.sqrt(var_across)


def _obstacle_frame(Z: np.ndarray, mu: np.ndarray, psi_o: np.ndarray):
    co, so = np.cos(psi_o), np.sin(psi_o)
    dx, dy = Z[..., X] - mu[..., 0], Z[..., Y] - mu[..., 1]
    return co * dx + so * dy, -so * dx + co * dy, co, so


def obstacle_potential(Z: np.ndarray, mu: np.ndarray, psi_o: np.ndarray, l_o: np.ndarray, w_o: np.ndarray):
    """exp(-(dx/l)^2 - (dy/w)^2) in the obstacle heading frame, and its state gradient"""
    ax, ay, co, so = _obstacle_frame(Z, mu, psi_o)
    val = np.exp(-((ax / l_o) ** 2) - (ay / w_o) ** 2)
    d_ax = -2.0 * ax / l_o**2 * val
    d_ay = -2.0 * ay / w_o**2 * val
    grad = np.zeros(ax.shape + (Z.shape[-1],))
    grad[..., X] = d_ax * co - d_ay * so
    grad[..., Y] = d_ax * so + d_ay * co
    return val, grad


def _smooth_abs(t):
    r = np.sqrt(t * t + SMOOTH_ABS_EPS**2)
    return r, t / r


def ellipse_axes(ego_psi, psi_o, l_o, w_o, ego: Dimensions, margin: float):
    """
    Semi-axes (alpha along, beta across the obstacle heading) of the ellipse enclosing
    the Minkowski sum of the obstacle box and the rotated ego box, and their heading derivatives
    """
    phi = ego_psi - psi_o
    ac, dac = _smooth_abs(np.cos(phi))
    as_, das = _smooth_abs(np.sin(phi))
    hl, hw = ego.length / 2.0, ego.width / 2.0
    ex = hl * ac + hw * as_
    ey = hl * as_ + hw * ac
    dex = -hl * dac * np.sin(phi) + hw * das * np.cos(phi)
    dey = hl * das * np.cos(phi) - hw * dac * np.sin(phi)
    alpha = SQRT2 * (l_o / 2.0 + ex) + margin
    beta = SQRT2 * (w_o / 2.0 + ey) + margin
    return alpha, beta, SQRT2 * dex, SQRT2 * dey


def obstacle_ellipse(Z: np.ndarray, mu: np.ndarray, psi_o: np.ndarray, l_o, w_o, ego: Dimensions, margin: float):
    """Residual 1 - (dx/alpha)^2 - (dy/beta)^2 (<= 0 is clear) and its state gradient"""
    ax, ay, co, so = _obstacle_frame(Z, mu, psi_o)
    alpha, beta, dalpha, dbeta = ellipse_axes(Z[..., PSI], psi_o, l_o, w_o, ego, margin)
    g = 1.0 - (ax / alpha) ** 2 - (ay / beta) ** 2
    d_ax = -2.0 * ax / alpha**2
    d_ay = -2.0 * ay / beta**2
    grad = np.zeros(ax.shape + (Z.shape[-1],))
    grad[..., X] = d_ax * co - d_ay * so
    grad[..., Y] = d_ax * so + d_ay * co
    grad[..., PSI] = 2.0 * ax**2 / alpha**3 * dalpha + 2.0 * ay**2 / beta**3 * dbeta
    return g, grad


def boundary_residuals(terms: ContourTerms, ego_width: float):
    """Left / right boundary residuals (..., 2) and their state gradients (..., 2, 7)"""
    q = terms.query
    dd_lb = np.where(terms.inside, q.dd_lb, 0.0)
    dd_rb = np.where(terms.inside, q.dd_rb, 0.0)
    g = np.stack([terms.e_c - (q.d_lb - ego_width / 2.0), -terms.e_c - (q.d_rb - ego_width / 2.0)], axis=-1)
    grad = np.stack([terms.de_c.copy(), -terms.de_c], axis=-2)
    grad[..., 0, THETA] -= dd_lb
    grad[..., 1, THETA] -= dd_rb
    return g, grad


def running_cost(
    z: EgoState,
    u: ControlInput,
    path: ReferencePath,
    weights: CostWeights,
    obstacles: Sequence[Tuple[GaussianState, Dimensions]] = (),
) -> float:
    """
    Stage cost: tracking + progress reward + input effort + potential fields

    Args:
        z (EgoState): Ego state at the step
        u (ControlInput): Input at the step
        path (ReferencePath): Reference path, carrying the lane markers
        weights (CostWeights): Cost weights
        obstacles: Predicted participant state and body size at this step

    Returns:
        float: J_k; an arclength outside the path is clamped and penalized quadratically
    """
    za = z.as_array()[None]
    terms = contour_terms(path, za)
    e = np.array([terms.e_c[0], terms.e_l[0]])
    ua = u.as_array()
    cost = float(e @ weights.Q_mat @ e) - weights.q_v * u.theta_dot + float(ua @ weights.R_mat @ ua)
    for state, dims in obstacles:
        mode = ModePrediction(0, 1.0, state.mu[None], state.cov[None], np.array([state.psi]), np.array([state.v]))
        l_o, w_o = conservative_dims(mode, dims)
        val, _ = obstacle_potential(za, np.asarray(state.mu)[None], np.array([state.psi]), l_o, w_o)
        cost += weights.q_ob * float(val[0])
    for d_lm in path.lane_markers:
        cost += weights.q_lm * float(np.exp(-(((d_lm - terms.e_c[0]) / weights.sigma) ** 2)))
    cost += weights.q_bar * float(terms.overshoot[0]) ** 2
    return cost


def obstacle_constraint(z: EgoState, obstacle_mu, obstacle_psi: float, footprint: Dimensions, ego: Dimensions, margin: float = 0.2) -> float:
    """Ellipse separation residual (<= 0 means clear) of the ego against one obstacle"""
    g, _ = obstacle_ellipse(
        z.as_array()[None], np.asarray(obstacle_mu, dtype=float)[None], np.array([obstacle_psi]),
        footprint.length, footprint.width, ego, margin,
    )
    return float(g[0])


def boundary_constraint(z: EgoState, path: ReferencePath, ego_width: float) -> Tuple[float, float]:
    """(e_c - (d_lb - w/2), -e_c - (d_rb - w/2)); both <= 0 keeps the ego inside the road"""
    g, _ = boundary_residuals(contour_terms(path, z.as_array()[None]), ego_width)
    return float(g[0, 0]), float(g[0, 1])
