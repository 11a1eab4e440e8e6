"""
Tests for the branch NLP (slot layout, residual Jacobians) and the SQP solver
"""

import numpy as np
import pytest

from src.errors import ConfigurationError, ContractError
from src.mpcc.costs import CostWeights, running_cost
from src.mpcc.nlp import build_nlp, slot_layout
from src.mpcc.solver import CONVERGED, INFEASIBLE, SolverConfig, SQPSolver, solve
from src.prediction.gmm_predictor import GaussianState, ModePrediction
from src.selection.scenario_selection import Scenario, ScenarioTree
from src.vehicle.bicycle_model import THETA, V, X, Y, ControlInput, EgoState, VehicleLimits
from src.world.path_world import Dimensions, straight_path

DT = 0.1
CAR = Dimensions(4.5, 2.0)


class QuadraticChain:
    """
    Scalar integrator z_{k+1} = z_k + u_k tracking per-scenario targets with input
    weight c: a linear least-squares problem with a closed-form optimum
    """

    n_x = 1
    n_u = 1

    def __init__(self, targets, branching_index, z0=0.0, c=0.1):
        self.targets = np.asarray(targets, dtype=float)
        self.n_scenarios, self.horizon = self.targets.shape
        self.branching_index = branching_index
        self.slot_index, self.n_slots = slot_layout(self.n_scenarios, self.horizon, branching_index)
        self.z0 = np.array([z0])
        self.c = c
        self.input_lower = np.array([-np.inf])
        self.input_upper = np.array([np.inf])

    def dynamics(self, Z, U, jacobians=False):
        F = Z + U
        if not jacobians:
            return F
        ones = np.ones(Z.shape[:-1] + (1, 1))
        return F, ones, ones.copy()

    def stage_residuals(self, Z, jacobians=False):
        r = Z - self.targets[..., None]
        if not jacobians:
            return r
        return r, np.ones(Z.shape[:-1] + (1, 1))

    def stage_inequalities(self, Z, jacobians=False):
        g = np.zeros(Z.shape[:-1] + (0,))
        if not jacobians:
            return g
        return g, np.zeros(g.shape + (1,))

    def input_cost(self, U):
        value = float(self.c * np.sum(U * U))
        return value, 2.0 * self.c * U, np.full((self.n_slots, 1, 1), 2.0 * self.c)

    def closed_form(self) -> np.ndarray:
        H = self.c * np.eye(self.n_slots)
        rhs = np.zeros(self.n_slots)
        for s in range(self.n_scenarios):
            D = np.zeros((self.horizon, self.n_slots))
            for k in range(1, self.horizon):
                for j in range(k):
                    D[k, self.slot_index[s, j]] += 1.0
            H += D.T @ D
            rhs += D.T @ (self.targets[s] - self.z0[0])
        return np.linalg.solve(H, rhs)


def parked_mode(x, y, n, sigma=0.2):
    return ModePrediction(
        0, 1.0, np.tile([x, y], (n, 1)), np.tile(sigma**2 * np.eye(2), (n, 1, 1)), np.zeros(n), np.zeros(n)
    )


def one_participant_tree(n, modes, branching_index=0):
    weights = np.full(len(modes), 1.0 / len(modes))
    scenarios = [Scenario(s, [mode], [CAR], float(w), [s]) for s, (mode, w) in enumerate(zip(modes, weights))]
    return ScenarioTree(scenarios, n, DT, branching_index)


def test_slot_layout_counts():
    slot_index, n_slots = slot_layout(2, 41, 8)
    assert n_slots * 3 == 213
    assert slot_index.shape == (2, 40)
    np.testing.assert_array_equal(slot_index[0, :9], slot_index[1, :9])
    assert not set(slot_index[0, 9:]) & set(slot_index[1, 9:])

    _, n_slots = slot_layout(2, 40, 8)
    assert n_slots * 3 == 207


def test_slot_layout_single_and_full_horizon():
    slot_index, n_slots = slot_layout(1, 10, 0)
    np.testing.assert_array_equal(slot_index[0], np.arange(9))
    assert n_slots == 9

    slot_index, n_slots = slot_layout(3, 10, 9)
    assert n_slots == 9
    assert (slot_index == slot_index[:1]).all()


@pytest.mark.parametrize("n_scenarios,branching_index", [(1, 0), (2, 0), (2, 3), (3, 8)])
def test_quadratic_oracle(n_scenarios, branching_index):
    rng = np.random.default_rng(11)
    problem = QuadraticChain(rng.uniform(-3.0, 3.0, size=(n_scenarios, 10)), branching_index, z0=0.5)
    plan = solve(problem)
    expected = problem.closed_form()[problem.slot_index]
    assert plan.status == CONVERGED
    np.testing.assert_allclose(plan.inputs[..., 0], expected, atol=1e-6)
    assert plan.shared_inputs_identical()


def test_non_anticipativity_is_exact():
    problem = QuadraticChain(np.array([np.linspace(0.0, 5.0, 12), np.linspace(0.0, -5.0, 12)]), branching_index=4)
    plan = solve(problem)
    shared = plan.inputs[:, :5]
    assert np.array_equal(shared[0], shared[1])
    np.testing.assert_allclose(plan.states[0, :6], plan.states[1, :6], atol=1e-12)
    assert not np.allclose(plan.inputs[0, 5:], plan.inputs[1, 5:])


def test_warm_start_shape_mismatch():
    problem = QuadraticChain(np.zeros((2, 6)), branching_index=1)
    with pytest.raises(ContractError):
        SQPSolver().solve(problem, warm_start=np.zeros((2, 4, 1)))


def test_warm_start_at_optimum_converges_immediately():
    problem = QuadraticChain(np.array([np.linspace(0.0, 2.0, 8)]), branching_index=0)
    optimum = problem.closed_form()[problem.slot_index][..., None]
    plan = solve(problem, warm_start=optimum)
    assert plan.status == CONVERGED
    assert plan.iterations == 1


def test_solver_config_validation():
    with pytest.raises(ConfigurationError) as err:
        SolverConfig(max_iter=0)
    assert err.value.field == "solver.max_iter"
    with pytest.raises(ConfigurationError):
        SolverConfig(rho_growth=1.0)
    with pytest.raises(ConfigurationError):
        SolverConfig(min_step=0.0)


def random_states(rng, s, n):
    Z = np.zeros((s, n, 7))
    Z[..., X] = rng.uniform(5.0, 30.0, size=(s, n))
    Z[..., Y] = rng.uniform(-2.0, 2.0, size=(s, n))
    Z[..., 2] = rng.uniform(0.1, 0.3, size=(s, n))
    Z[..., V] = rng.uniform(3.0, 10.0, size=(s, n))
    Z[..., 4] = rng.uniform(-2.0, 2.0, size=(s, n))
    Z[..., 5] = rng.uniform(-0.2, 0.2, size=(s, n))
    Z[..., THETA] = Z[..., X] + rng.uniform(-0.7, 0.7, size=(s, n))
    return Z


def central_differences(fn, Z, eps=1e-6):
    base = fn(Z)
    jac = np.zeros(base.shape + (Z.shape[-1],))
    for i in range(Z.shape[-1]):
        dz = np.zeros_like(Z)
        dz[..., i] = eps
        jac[..., i] = (fn(Z + dz) - fn(Z - dz)) / (2.0 * eps)
    return jac


@pytest.fixture
def obstacle_nlp():
    n = 6
    road = straight_path(100.0, half_width=4.0, lane_markers=(1.75,))
    modes = [parked_mode(18.0, 1.0, n), parked_mode(22.0, -1.5, n, sigma=0.4)]
    tree = one_participant_tree(n, modes, branching_index=2)
    return build_nlp(tree, EgoState(x=5.0, v=8.0, theta=5.0), road, CostWeights(), VehicleLimits())


def test_residual_jacobians_match_finite_differences(obstacle_nlp):
    Z = random_states(np.random.default_rng(5), 2, obstacle_nlp.horizon)
    _, J = obstacle_nlp.stage_residuals(Z, jacobians=True)
    np.testing.assert_allclose(J, central_differences(obstacle_nlp.stage_residuals, Z), rtol=1e-5, atol=1e-6)


def test_inequality_jacobians_match_finite_differences(obstacle_nlp):
    Z = random_states(np.random.default_rng(6), 2, obstacle_nlp.horizon)
    g, J = obstacle_nlp.stage_inequalities(Z, jacobians=True)
    assert (g[:, 0] == -1.0).all()
    np.testing.assert_allclose(J, central_differences(obstacle_nlp.stage_inequalities, Z), rtol=1e-5, atol=1e-6)


def test_residuals_reproduce_running_cost():
    n = 4
    road = straight_path(100.0, half_width=4.0, lane_markers=(1.75,))
    mode = parked_mode(18.0, 1.0, n)
    nlp = build_nlp(one_participant_tree(n, [mode]), EgoState(x=5.0, theta=5.0), road, CostWeights(), VehicleLimits())
    Z = random_states(np.random.default_rng(8), 1, n)
    r = nlp.stage_residuals(Z)
    for k in range(n):
        obstacle = GaussianState(mode.mu[k], mode.cov[k], float(mode.psi[k]), 0.0)
        expected = running_cost(EgoState.from_array(Z[0, k]), ControlInput(), road, nlp.weights, [(obstacle, CAR)])
        assert float(np.sum(r[0, k] ** 2)) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_obstacle_violation_flags_overlapping_states(obstacle_nlp):
    Z = np.zeros((2, obstacle_nlp.horizon, 7))
    Z[..., X], Z[..., Y], Z[..., V], Z[..., THETA] = 18.0, 1.0, 5.0, 18.0
    assert obstacle_nlp.obstacle_violation(Z) > 0.0
    Z[..., X], Z[..., THETA] = 60.0, 60.0
    assert obstacle_nlp.obstacle_violation(Z) == 0.0


def test_nlp_rejects_horizon_mismatch():
    tree = one_participant_tree(6, [parked_mode(18.0, 1.0, 5)])
    road = straight_path(100.0, half_width=4.0)
    with pytest.raises(ContractError):
        build_nlp(tree, EgoState(), road, CostWeights(), VehicleLimits())


def test_input_variable_count(obstacle_nlp):
    # 3 shared steps, then 2 own steps per scenario
    assert obstacle_nlp.n_slots == 3 + 2 * 2
    assert obstacle_nlp.n_input_variables == 21


def test_straight_road_without_obstacles():
    n = 20
    road = straight_path(200.0, half_width=3.5)
    nlp = build_nlp(ScenarioTree.empty(n, DT), EgoState(v=8.0), road, CostWeights(), VehicleLimits())
    plan = SQPSolver().solve(nlp)
    assert plan.status != INFEASIBLE
    assert plan.violation <= SolverConfig().infeasible_tol
    assert plan.states.shape == (1, n, 7)
    assert plan.inputs.shape == (1, n - 1, 3)
    assert np.all(np.abs(plan.states[0, :, Y]) < 1.0)
    assert plan.states[0, -1, X] > 10.0
    assert np.all(np.isfinite(plan.first_input()))
    assert plan.costs.shape == (1,)


def test_branched_solve_shares_trunk(obstacle_nlp):
    plan = SQPSolver(SolverConfig(max_iter=15)).solve(obstacle_nlp)
    assert plan.n_scenarios == 2
    assert plan.branching_index == 2
    assert plan.shared_inputs_identical()
    np.testing.assert_allclose(plan.states[0, :4], plan.states[1, :4], atol=1e-12)
    np.testing.assert_allclose(plan.weights, [0.5, 0.5])
    assert len(plan.history) >= 1


def test_branching_never_costs_more_than_a_shared_horizon():
    n = 8
    road = straight_path(100.0, half_width=4.0, lane_markers=(1.75,))
    modes = [parked_mode(20.0, 1.0, n), parked_mode(20.0, -1.5, n, sigma=0.4)]
    z0 = EgoState(x=5.0, v=8.0, theta=5.0)
    shared_nlp = build_nlp(one_participant_tree(n, modes, branching_index=n - 1), z0, road, CostWeights(), VehicleLimits())
    branched_nlp = build_nlp(one_participant_tree(n, modes, branching_index=1), z0, road, CostWeights(), VehicleLimits())
    solver = SQPSolver()

    shared = solver.solve(shared_nlp)
    assert shared.violation <= solver.config.feasibility_tol
    branched = solver.solve(branched_nlp, warm_start=shared.inputs)

    assert branched.status != INFEASIBLE
    assert branched.objective <= shared.objective + 1e-3 * (1.0 + abs(shared.objective))
    assert np.array_equal(shared.inputs[0], shared.inputs[1])
    assert branched.shared_inputs_identical()
