"""
Tests for topology clustering, collision event probability and scenario selection
"""

import numpy as np
import pytest

from src.errors import ContractError
from src.prediction.gmm_predictor import GaussianState, ModePrediction, PredictionSet
from src.selection.scenario_selection import (
    PlanTrajectory,
    RiskReport,
    ScenarioTree,
    cep,
    cep_density,
    cluster_modes,
    compute_risk,
    gaussian_box_mass,
    select_scenarios,
    select_top_probability,
    uvd_equivalent,
)
from src.vehicle.bicycle_model import EgoState, VehicleLimits
from src.world.path_world import Dimensions

N = 21
DT = 0.1
EGO = Dimensions(4.5, 2.0)
CAR = Dimensions(4.5, 2.0)


def mode_from_means(mode_id, prob, mu, psi=0.0, sigma=0.2, label=""):
    mu = np.asarray(mu, dtype=float)
    n = mu.shape[0]
    return ModePrediction(mode_id, prob, mu, np.tile(sigma**2 * np.eye(2), (n, 1, 1)), np.full(n, psi), np.full(n, 5.0), label)


@pytest.fixture
def ego_plan():
    # drives east through the origin at k = 10
    return PlanTrajectory.constant_velocity(EgoState(x=-10.0, v=10.0), N, DT, VehicleLimits())


@pytest.fixture
def crossing_modes():
    """Participant coming from the north: four modes turn away before the ego lane, two cross it"""
    k = np.arange(N)
    modes = []
    for j in range(4):
        mu = np.column_stack([-(4.0 + j) * k * DT, np.full(N, 8.0 + 0.2 * j)])
        modes.append(mode_from_means(j, 0.15, mu, psi=np.pi, label="turn"))
    modes.append(mode_from_means(4, 0.2, np.column_stack([np.zeros(N), 5.0 - k]), psi=-np.pi / 2, label="cross"))
    modes.append(mode_from_means(5, 0.2, np.column_stack([np.full(N, 0.5), 5.0 - 1.1 * k]), psi=-np.pi / 2, label="cross"))
    return modes


def test_uvd_identical_and_far(ego_plan, crossing_modes):
    assert uvd_equivalent(crossing_modes[0], crossing_modes[0], ego_plan, EGO)
    far = PlanTrajectory.constant_velocity(EgoState(x=-500.0, y=300.0, v=10.0), N, DT, VehicleLimits())
    assert uvd_equivalent(crossing_modes[0], crossing_modes[4], far, EGO)


def test_uvd_ego_between_turn_and_cross(ego_plan, crossing_modes):
    assert not uvd_equivalent(crossing_modes[0], crossing_modes[4], ego_plan, EGO)
    assert uvd_equivalent(crossing_modes[4], crossing_modes[5], ego_plan, EGO)
    assert uvd_equivalent(crossing_modes[1], crossing_modes[3], ego_plan, EGO)


def test_uvd_horizon_mismatch(ego_plan, crossing_modes):
    short = mode_from_means(0, 1.0, np.zeros((5, 2)))
    with pytest.raises(ContractError):
        uvd_equivalent(short, crossing_modes[0], ego_plan, EGO)


def test_six_mode_intersection_gives_two_clusters(ego_plan, crossing_modes):
    pset = PredictionSet([crossing_modes], N, DT)
    pset.validate()
    clusters = cluster_modes(pset, ego_plan, EGO)
    assert clusters == [[0, 1, 2, 3], [4, 5]]

    risk = compute_risk(pset, ego_plan, EGO, lam=0.5)
    tree = select_scenarios(pset, clusters, risk, s_max=2)
    tree.validate(s_max=2)
    assert tree.n_scenarios == 2
    assert tree.weights.sum() == pytest.approx(1.0)
    labels = sorted(s.modes[0].label for s in tree.scenarios)
    assert labels == ["cross", "turn"]
    by_label = {s.modes[0].label: s.weight for s in tree.scenarios}
    assert by_label["turn"] == pytest.approx(0.6)
    assert by_label["cross"] == pytest.approx(0.4)
    assert risk.cep[0, 4] > risk.cep[0, 0]


def test_identical_modes_form_one_cluster(ego_plan):
    base = np.column_stack([np.zeros(N), 5.0 - np.arange(N)])
    pset = PredictionSet([[mode_from_means(i, 0.25, base) for i in range(4)]], N, DT)
    assert cluster_modes(pset, ego_plan, EGO) == [[0, 1, 2, 3]]


def test_clusters_partition_modes():
    rng = np.random.default_rng(5)
    n = 10
    for _ in range(1000):
        plan = PlanTrajectory.constant_velocity(EgoState(x=-5.0, v=float(rng.uniform(0, 10))), n, DT, VehicleLimits())
        n_modes = int(rng.integers(1, 7))
        modes = []
        for m in range(n_modes):
            start = rng.uniform(-10, 10, size=2)
            vel = rng.uniform(-8, 8, size=2)
            modes.append(mode_from_means(m, 1.0 / n_modes, start + np.outer(np.arange(n) * DT, vel)))
        pset = PredictionSet([modes], n, DT)
        clusters = cluster_modes(pset, plan, EGO)
        flat = sorted(i for c in clusters for i in c)
        assert flat == list(range(n_modes))
        assert all(c == sorted(c) for c in clusters)


def test_gaussian_box_mass_matches_sampling():
    rng = np.random.default_rng(7)
    for _ in range(20):
        half = rng.uniform(0.5, 4.0, size=2)
        mu = rng.uniform(-4.0, 4.0, size=2)
        root = rng.normal(0.0, 0.8, size=(2, 2))
        cov = root @ root.T + 0.05 * np.eye(2)
        mass = gaussian_box_mass(mu[None], cov[None], half[None])[0]
        samples = rng.multivariate_normal(mu, cov, size=200_000)
        inside = np.all(np.abs(samples) <= half, axis=1)
        p = inside.mean()
        se = np.sqrt(max(p * (1 - p), 1e-6) / samples.shape[0])
        assert abs(mass - p) <= 3 * se + 2e-3


def test_cep_density_limits():
    ego = EgoState()
    far = GaussianState(np.array([50.0, 0.0]), 0.04 * np.eye(2), 0.0, 0.0)
    assert cep_density(far, CAR, ego, EGO, DT) < 1e-12
    center = GaussianState(np.zeros(2), 1e-4 * np.eye(2), 0.0, 0.0)
    assert cep_density(center, CAR, ego, EGO, DT) == pytest.approx(1.0 / DT, rel=1e-6)
    # aligned bodies inflate the ego box to half extents (4.5, 2.0)
    edge = GaussianState(np.array([4.5, 0.0]), 0.04 * np.eye(2), 0.0, 0.0)
    assert cep_density(edge, CAR, ego, EGO, DT) * DT == pytest.approx(0.5, abs=0.01)


def test_cep_density_rejects_bad_covariance():
    bad = GaussianState(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), 0.0, 0.0)
    with pytest.raises(ContractError):
        cep_density(bad, CAR, EgoState(), EGO, DT)


def test_cep_accumulates_and_clamps():
    plan = PlanTrajectory(np.zeros((N, 7)), DT)
    parked = mode_from_means(0, 1.0, np.zeros((N, 2)), sigma=0.01)
    entry = cep(parked, CAR, plan, EGO)
    assert entry.cep_raw == pytest.approx(N, rel=1e-6)
    assert entry.cep == 1.0
    away = mode_from_means(0, 1.0, np.tile([60.0, 0.0], (N, 1)))
    assert cep(away, CAR, plan, EGO).cep == 0.0

    mu = np.tile([60.0, 0.0], (N, 1))
    mu[3] = [0.0, 0.0]
    single = cep(mode_from_means(0, 1.0, mu, sigma=0.01), CAR, plan, EGO)
    assert single.cep == pytest.approx(1.0, abs=1e-6)
    assert np.count_nonzero(single.density > 1e-9) == 1


def _risk(cep_values, probs, lam=0.5):
    cep_values = np.atleast_2d(cep_values)
    return RiskReport(cep_values, cep_values, np.zeros(cep_values.shape + (N,)), np.atleast_2d(probs), lam)


def _pset(probs):
    return PredictionSet([[mode_from_means(i, p, np.zeros((N, 2))) for i, p in enumerate(probs)]], N, DT)


def test_select_weights_by_cluster_probability():
    pset = _pset([0.7, 0.2, 0.1])
    tree = select_scenarios(pset, [[0], [1, 2]], _risk([0.0, 0.0, 0.0], [0.7, 0.2, 0.1]), s_max=2)
    assert [s.scenario_id for s in tree.scenarios] == [0, 1]
    assert tree.weights == pytest.approx([0.7, 0.3])
    assert tree.branching_index == 0


def test_select_uses_decision_value():
    pset = _pset([0.1, 0.6, 0.3])
    risk = _risk([0.4, 0.05, 0.0], [0.1, 0.6, 0.3])
    assert risk.decision[0, :2] == pytest.approx([0.45, 0.35])
    tree = select_scenarios(pset, [[0, 1], [2]], risk, s_max=2)
    assert tree.scenarios[0].scenario_id == 0
    assert tree.scenarios[0].members == [0, 1]
    assert tree.weights == pytest.approx([0.7, 0.3])


def test_select_trade_off_argument():
    pset = _pset([0.1, 0.6, 0.3])
    risk = _risk([0.4, 0.05, 0.0], [0.1, 0.6, 0.3])
    assert select_scenarios(pset, [[0, 1], [2]], risk, lam=0.0, s_max=2).scenarios[0].scenario_id == 0
    assert select_scenarios(pset, [[0, 1], [2]], risk, lam=2.0, s_max=2).scenarios[0].scenario_id == 1
    assert select_scenarios(pset, [[0, 1], [2]], risk, s_max=2).scenarios[0].scenario_id == 0
    with pytest.raises(ContractError):
        select_scenarios(pset, [[0, 1], [2]], risk, s_max=0)


def test_select_keeps_at_most_s_max():
    pset = _pset([0.5, 0.3, 0.2])
    tree = select_scenarios(pset, [[0], [1], [2]], _risk([0.0, 0.0, 0.0], [0.5, 0.3, 0.2]), s_max=2)
    assert [s.scenario_id for s in tree.scenarios] == [0, 1]
    assert tree.weights == pytest.approx([0.625, 0.375])
    with pytest.raises(ContractError):
        select_scenarios(pset, [[0], []], _risk([0.0, 0.0, 0.0], [0.5, 0.3, 0.2]), s_max=2)


def test_select_top_probability():
    pset = _pset([0.2, 0.5, 0.3])
    tree = select_top_probability(pset, 2)
    assert [s.scenario_id for s in tree.scenarios] == [1, 2]
    assert tree.weights == pytest.approx([0.625, 0.375])


def test_tree_validation():
    tree = ScenarioTree.empty(N, DT)
    tree.validate()
    assert tree.n_scenarios == 1
    tree.branching_index = N
    with pytest.raises(ContractError):
        tree.validate()


def test_plan_consistency_check(ego_plan):
    assert ego_plan.check_consistency(VehicleLimits()) < 1e-9
    broken = ego_plan.states.copy()
    broken[5, 0] += 1.0
    with pytest.raises(ContractError):
        PlanTrajectory(broken, DT).check_consistency(VehicleLimits())


def crossing_participant(x_offset, sigma, step=1.0):
    """Participant heading south across the lane of an ego parked at the origin"""
    k = np.arange(N)
    mu = np.column_stack([np.full(N, x_offset), 10.0 - step * k])
    return mode_from_means(0, 1.0, mu, psi=-np.pi / 2, sigma=sigma)


def test_cep_grows_with_uncertainty_outside_the_footprint():
    plan = PlanTrajectory(np.zeros((N, 7)), DT)
    # crossed bodies inflate the ego box to half extents (3.25, 3.25); the path stays 1.75 m outside
    sigmas = np.linspace(0.1, 2.0, 20)
    raw = np.array([cep(crossing_participant(5.0, s), CAR, plan, EGO).cep_raw for s in sigmas])
    assert raw[0] < 1e-12
    assert raw[-1] > 0.1
    assert np.all(np.diff(raw) >= -1e-9)


def test_cep_matches_sampled_union_bound_on_a_crossing():
    rng = np.random.default_rng(21)
    plan = PlanTrajectory(np.zeros((N, 7)), DT)
    mode = crossing_participant(3.6, 0.3, step=2.0)
    entry = cep(mode, CAR, plan, EGO)
    half = np.array([3.25, 3.25])

    n_samples = 200_000
    hits = np.zeros((N, n_samples), dtype=bool)
    for k in range(N):
        samples = rng.multivariate_normal(mode.mu[k], mode.cov[k], size=n_samples)
        hits[k] = np.all(np.abs(samples) <= half, axis=1)
    union_bound = float(hits.mean(axis=1).sum())
    any_step = float(hits.any(axis=0).mean())

    assert 0.05 < entry.cep < 1.0
    assert entry.cep == pytest.approx(union_bound, abs=0.02)
    assert any_step <= entry.cep + 0.02


@pytest.mark.slow
def test_cep_density_matches_large_sampling():
    rng = np.random.default_rng(17)
    for _ in range(50):
        heading = rng.uniform(-np.pi, np.pi)
        crossed = bool(rng.integers(0, 2))
        ego = EgoState(x=rng.uniform(-5.0, 5.0), y=rng.uniform(-5.0, 5.0), psi=heading)
        rel = rng.uniform(-6.0, 6.0, size=2)
        c, s = np.cos(heading), np.sin(heading)
        mu = np.array([ego.x, ego.y]) + np.array([[c, -s], [s, c]]) @ rel
        root = rng.normal(0.0, 0.8, size=(2, 2))
        cov = root @ root.T + 0.05 * np.eye(2)
        tp = GaussianState(mu, cov, heading + (np.pi / 2 if crossed else 0.0), 0.0)
        density = cep_density(tp, CAR, ego, EGO, DT)

        half = np.array([3.25, 3.25]) if crossed else np.array([4.5, 2.0])
        inside = 0
        n_samples = 1_000_000
        for chunk in np.array_split(np.arange(n_samples), 10):
            samples = rng.multivariate_normal(mu, cov, size=chunk.size) - [ego.x, ego.y]
            local = samples @ np.array([[c, -s], [s, c]])
            inside += int(np.count_nonzero(np.all(np.abs(local) <= half, axis=1)))
        p = inside / n_samples
        se = np.sqrt(max(p * (1 - p), 1e-6) / n_samples)
        assert abs(density * DT - p) <= 3 * se + 1e-3
