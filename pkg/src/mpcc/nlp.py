"""
Branch MPCC nonlinear program over a scenario tree. Inputs up to the branching index
are shared decision variables (slots), so non-anticipativity holds by construction.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from src.errors import ContractError
from src.mpcc.costs import CostWeights, boundary_residuals, conservative_dims, contour_terms, obstacle_ellipse, obstacle_potential
from src.selection.scenario_selection import ScenarioTree
from src.vehicle.bicycle_model import DELTA, DTHETA, N_U, N_X, V, EgoState, VehicleLimits, friction_ellipse_arrays, rk4_step
from src.world.path_world import ReferencePath

logger = logging.getLogger(__name__)

N_STATE_INEQ = 7


def slot_layout(n_scenarios: int, horizon: int, branching_index: int) -> Tuple[np.ndarray, int]:
    """
    Map every (scenario, step) input to a decision-variable slot

    Steps k <= b use the shared slot k; later steps get one slot per scenario.

    Returns:
        (slot_index (S, N-1), n_slots)
    """
    n_inputs = horizon - 1
    n_shared = min(branching_index + 1, n_inputs)
    n_own = n_inputs - n_shared
    k = np.arange(n_inputs)
    s = np.arange(n_scenarios)[:, None]
    own = n_shared + s * n_own + (k - n_shared)
    slot_index = np.where(k < n_shared, k, own).astype(int)
    return slot_index, n_shared + n_scenarios * n_own


class BranchNLP:
    def __init__(
        self,
        tree: ScenarioTree,
        z0: EgoState,
        path: ReferencePath,
        weights: CostWeights,
        limits: VehicleLimits,
    ):
        """
        Problem data and residual evaluators consumed by the SQP solver

        Args:
            tree (ScenarioTree): Scenarios, weights and branching index
            z0 (EgoState): Measured initial state shared by every branch
            path (ReferencePath): Reference path with boundaries and lane markers
            weights (CostWeights): Cost weights
            limits (VehicleLimits): Actuator, acceleration and speed limits
        """
        tree.validate()
        self.tree = tree
        self.path = path
        self.weights = weights
        self.limits = limits
        self.dt = tree.dt
        self.n_scenarios = tree.n_scenarios
        self.horizon = tree.horizon
        self.n_x, self.n_u = N_X, N_U
        self.branching_index = tree.branching_index
        self.z0 = z0.as_array()
        self.slot_index, self.n_slots = slot_layout(self.n_scenarios, self.horizon, self.branching_index)
        self.omega = tree.weights
        self.slot_weight = np.zeros(self.n_slots)
        np.add.at(self.slot_weight, self.slot_index, np.broadcast_to(self.omega[:, None], self.slot_index.shape))
        self.input_lower = limits.input_lower
        self.input_upper = limits.input_upper
        self._collect_obstacles()
        self._sqrt_omega = np.sqrt(self.omega)[:, None, None]
        self._lq = weights.Q_sqrt()
        self._markers = np.asarray(path.lane_markers, dtype=float)

    def _collect_obstacles(self):
        n_obs = {len(s.modes) for s in self.tree.scenarios}
        if len(n_obs) != 1:
            raise ContractError("all scenarios must carry the same participants")
        self.n_obstacles = n_obs.pop()
        shape = (self.n_scenarios, self.n_obstacles, self.horizon)
        self.ob_mu = np.zeros(shape + (2,))
        self.ob_psi = np.zeros(shape)
        self.ob_l_pot = np.ones(shape)
        self.ob_w_pot = np.ones(shape)
        self.ob_length = np.ones(shape)
        self.ob_width = np.ones(shape)
        for s, scenario in enumerate(self.tree.scenarios):
            for o, (mode, dims) in enumerate(zip(scenario.modes, scenario.dims)):
                if mode.horizon != self.horizon:
                    raise ContractError(f"scenario {s} participant {o} has horizon {mode.horizon}, expected {self.horizon}")
                self.ob_mu[s, o] = mode.mu
                self.ob_psi[s, o] = mode.psi
                self.ob_l_pot[s, o], self.ob_w_pot[s, o] = conservative_dims(mode, dims)
                self.ob_length[s, o] = dims.length
                self.ob_width[s, o] = dims.width

    @property
    def n_input_variables(self) -> int:
        return self.n_slots * self.n_u

    def scenario_inputs(self, U_slots: np.ndarray) -> np.ndarray:
        """Inputs per (scenario, step), shape (S, N-1, 3)"""
        return U_slots[self.slot_index]

    def dynamics(self, Z: np.ndarray, U: np.ndarray, jacobians: bool = False):
        """One RK4 step from every non-terminal state; Z (S, N-1, 7), U (S, N-1, 3)"""
        return rk4_step(Z, U, self.dt, self.limits.wheelbase, jacobians)

    def rollout(self, U_slots: np.ndarray) -> np.ndarray:
        """States of every branch integrated from z0, shape (S, N, 7)"""
        U = self.scenario_inputs(U_slots)
        Z = np.empty((self.n_scenarios, self.horizon, N_X))
        Z[:, 0] = self.z0
        for k in range(self.horizon - 1):
            Z[:, k + 1] = rk4_step(Z[:, k], U[:, k], self.dt, self.limits.wheelbase)
        return Z

    def _markers_terms(self, e_c: np.ndarray):
        t = (self._markers - e_c[..., None]) / self.weights.sigma
        val = np.exp(-0.5 * t * t)
        return val, val * t / self.weights.sigma

    def stage_residuals(self, Z: np.ndarray, jacobians: bool = False):
        """
        Least-squares residuals r with sum(r^2) equal to the weighted state part of the cost

        Rows per (scenario, step): two tracking rows, one per obstacle potential, one per
        lane marker and one arclength-overshoot row.
        """
        w = self.weights
        terms = contour_terms(self.path, Z)
        e = np.stack([terms.e_c, terms.e_l], axis=-1)
        de = np.stack([terms.de_c, terms.de_l], axis=-2)
        rows = [np.einsum("ij,...j->...i", self._lq, e)]
        jac = [np.einsum("ij,...jk->...ik", self._lq, de)] if jacobians else []

        if self.n_obstacles:
            Zo = Z[:, None]
            val, grad = obstacle_potential(Zo, self.ob_mu, self.ob_psi, self.ob_l_pot, self.ob_w_pot)
            # sqrt(q exp(-E)) = sqrt(q) exp(-E/2)
            r_ob = np.sqrt(w.q_ob * val)
            rows.append(np.moveaxis(r_ob, 1, -1))
            if jacobians:
                d_ob = np.sqrt(w.q_ob) * 0.5 * grad / np.sqrt(np.maximum(val, 1e-300))[..., None]
                jac.append(np.moveaxis(d_ob, 1, -2))

        if self._markers.size:
            val, dval_de = self._markers_terms(terms.e_c)
            rows.append(np.sqrt(w.q_lm) * val)
            if jacobians:
                jac.append(np.sqrt(w.q_lm) * dval_de[..., None] * terms.de_c[..., None, :])

        rows.append(np.sqrt(w.q_bar) * terms.overshoot[..., None])
        if jacobians:
            d_bar = np.zeros(Z.shape[:-1] + (1, N_X))
            d_bar[..., 0, -1] = np.sqrt(w.q_bar) * (~terms.inside)
            jac.append(d_bar)

        r = np.concatenate(rows, axis=-1) * self._sqrt_omega
        if not jacobians:
            return r
        return r, np.concatenate(jac, axis=-2) * self._sqrt_omega[..., None]

    def stage_inequalities(self, Z: np.ndarray, jacobians: bool = False):
        """
        Residuals g <= 0 per (scenario, step): steering box, speed box, friction ellipse,
        two road boundaries and one ellipse per obstacle; rows at k = 0 are inactive
        """
        lim = self.limits
        g = np.empty(Z.shape[:-1] + (N_STATE_INEQ + self.n_obstacles,))
        J = np.zeros(g.shape + (N_X,)) if jacobians else None
        g[..., 0] = Z[..., DELTA] - lim.delta_max
        g[..., 1] = lim.delta_min - Z[..., DELTA]
        g[..., 2] = Z[..., V] - lim.v_max
        g[..., 3] = -Z[..., V]
        g[..., 4], d_fric = friction_ellipse_arrays(Z, lim)
        g_b, d_b = boundary_residuals(contour_terms(self.path, Z), lim.width)
        g[..., 5:7] = g_b
        if self.n_obstacles:
            g_o, d_o = obstacle_ellipse(Z[:, None], self.ob_mu, self.ob_psi, self.ob_length, self.ob_width, lim.dims, self.weights.margin)
            g[..., 7:] = np.moveaxis(g_o, 1, -1)
        if jacobians:
            J[..., 0, DELTA] = 1.0
            J[..., 1, DELTA] = -1.0
            J[..., 2, V] = 1.0
            J[..., 3, V] = -1.0
            J[..., 4, :] = d_fric
            J[..., 5:7, :] = d_b
            if self.n_obstacles:
                J[..., 7:, :] = np.moveaxis(d_o, 1, -2)
            J[:, 0] = 0.0
        g[:, 0] = -1.0
        return (g, J) if jacobians else g

    def input_cost(self, U_slots: np.ndarray):
        """
        Weighted input effort minus progress reward over the slots

        Returns:
            (value, gradient (n_slots, 3), Hessian blocks (n_slots, 3, 3))
        """
        R = self.weights.R_mat
        w = self.slot_weight
        quad = np.einsum("ni,ij,nj->n", U_slots, R, U_slots)
        value = float(np.sum(w * (quad - self.weights.q_v * U_slots[:, DTHETA])))
        grad = 2.0 * w[:, None] * (U_slots @ R)
        grad[:, DTHETA] -= self.weights.q_v * w
        hess = 2.0 * w[:, None, None] * R
        return value, grad, hess

    def objective(self, Z: np.ndarray, U_slots: np.ndarray) -> float:
        """Weighted sum over scenarios of the running cost"""
        r = self.stage_residuals(Z)
        return float(np.sum(r * r)) + self.input_cost(U_slots)[0]

    def scenario_costs(self, Z: np.ndarray, U_slots: np.ndarray) -> np.ndarray:
        """Unweighted running cost of every branch"""
        r = self.stage_residuals(Z) / self._sqrt_omega
        state_part = np.sum(r * r, axis=(1, 2))
        U = self.scenario_inputs(U_slots)
        R = self.weights.R_mat
        input_part = np.einsum("ski,ij,skj->s", U, R, U) - self.weights.q_v * U[..., DTHETA].sum(axis=1)
        return state_part + input_part

    def obstacle_violation(self, Z: np.ndarray) -> float:
        """Largest obstacle-ellipse residual over k >= 1; positive means the states overlap a prediction"""
        if not self.n_obstacles:
            return 0.0
        return float(np.max(self.stage_inequalities(Z)[:, 1:, N_STATE_INEQ:], initial=0.0))

    def max_violation(self, Z: np.ndarray, U_slots: Optional[np.ndarray] = None) -> float:
        viol = float(np.max(np.clip(self.stage_inequalities(Z), 0.0, None), initial=0.0))
        if U_slots is not None:
            viol = max(viol, float(np.max(np.clip(U_slots - self.input_upper, 0.0, None), initial=0.0)))
            viol = max(viol, float(np.max(np.clip(self.input_lower - U_slots, 0.0, None), initial=0.0)))
        return viol


def build_nlp(tree: ScenarioTree, z0: EgoState, path: ReferencePath, weights: CostWeights, limits: VehicleLimits) -> BranchNLP:
    """
    Build the branch MPCC problem for a scenario tree

    Raises:
        ContractError: if scenario horizons disagree with the tree
    """
    nlp = BranchNLP(tree, z0, path, weights, limits)
    logger.debug(
        f"Built NLP: {nlp.n_scenarios} scenarios, b={nlp.branching_index}, "
        f"{nlp.n_input_variables} input variables, {nlp.n_obstacles} obstacles"
    )
    return nlp
