"""
Adaptive decision postponing: the branching index is the step at which the selected
scenarios become distinguishable, measured by the Bhattacharyya distance
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from src.errors import ConfigurationError, ContractError
from src.prediction.gmm_predictor import PredictionSet
from src.selection.scenario_selection import RiskReport, ScenarioTree

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PostponingConfig:
    """
    Args:
        branching_threshold: Bhattacharyya distance B_th at which two scenarios count as distinguishable
        relevance_threshold: Smallest CEP C_min that makes a participant relevant
    """

    branching_threshold: float = 1.0
    relevance_threshold: float = 0.01

    def __post_init__(self):
        if not self.branching_threshold > 0:
            raise ConfigurationError("postponing.branching_threshold", "must be > 0")
        if not 0.0 <= self.relevance_threshold <= 1.0:
            raise ConfigurationError("postponing.relevance_threshold", "must lie in [0, 1]")


def bhattacharyya(mu_i, cov_i, mu_j, cov_j) -> np.ndarray:
    """
    Bhattacharyya distance between Gaussians, batched over leading axes

    B = 1/8 d^T S^-1 d + 1/2 ln(det S / sqrt(det S_i det S_j)) with S = (S_i + S_j) / 2

    Raises:
        ContractError: if the mean covariance is singular
    """
    mu_i, mu_j = np.asarray(mu_i, dtype=float), np.asarray(mu_j, dtype=float)
    cov_i, cov_j = np.asarray(cov_i, dtype=float), np.asarray(cov_j, dtype=float)
    cov = 0.5 * (cov_i + cov_j)
    det = np.linalg.det(cov)
    if np.any(det <= 1e-300):
        raise ContractError("mean covariance is singular")
    d = mu_i - mu_j
    mahalanobis = np.einsum("...i,...i->...", d, np.linalg.solve(cov, d[..., None])[..., 0])
    log_term = np.log(det) - 0.5 * (np.log(np.linalg.det(cov_i)) + np.log(np.linalg.det(cov_j)))
    dist = mahalanobis / 8.0 + 0.5 * log_term
    return dist if dist.ndim else float(dist)


@dataclass
class PostponingReport:
    """Branching index plus the first-crossing step of every (participant, scenario pair)"""

    branching_index: int
    relevant_tps: List[int] = field(default_factory=list)
    crossings: Dict[Tuple[int, int, int], int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "branching_index": self.branching_index,
            "relevant_tps": self.relevant_tps,
            "crossings": [{"tp": o, "i": i, "j": j, "k": k} for (o, i, j), k in sorted(self.crossings.items())],
        }


def first_crossing(distances: np.ndarray, threshold: float) -> int:
    """Smallest step whose distance reaches ``threshold``; the last step when none does"""
    hits = np.flatnonzero(distances >= threshold)
    return int(hits[0]) if hits.size else int(distances.shape[0] - 1)


def analyze_branching(tree: ScenarioTree, risk: RiskReport, cfg: PostponingConfig) -> PostponingReport:
    """
    Args:
        tree (ScenarioTree): Selected scenarios; their per-participant modes are compared
        risk (RiskReport): Risk used to filter relevant participants
        cfg (PostponingConfig): Thresholds

    Returns:
        PostponingReport: b = max over relevant participants and scenario pairs of the first
        step the pair becomes distinguishable; 0 for a single scenario
    """
    n = tree.horizon
    if tree.n_scenarios == 0:
        raise ContractError("branching time needs at least one scenario")
    if tree.n_scenarios == 1:
        return PostponingReport(0)

    n_tps = len(tree.scenarios[0].modes)
    if n_tps == 0:
        return PostponingReport(0)
    max_cep = risk.max_cep() if risk is not None and risk.cep.size else np.ones(n_tps)
    relevant = [o for o in range(n_tps) if max_cep[o] >= cfg.relevance_threshold]
    if not relevant:
        relevant = list(range(n_tps))

    crossings = {}
    for o in relevant:
        for i in range(tree.n_scenarios):
            for j in range(i + 1, tree.n_scenarios):
                a, b = tree.scenarios[i].modes[o], tree.scenarios[j].modes[o]
                dist = bhattacharyya(a.mu, a.cov, b.mu, b.cov)
                crossings[(o, i, j)] = first_crossing(dist, cfg.branching_threshold)
    b = max(crossings.values()) if crossings else 0
    return PostponingReport(int(np.clip(b, 0, n - 1)), relevant, crossings)


def branching_time(tree: ScenarioTree, predictions: Optional[PredictionSet], risk: RiskReport, cfg: PostponingConfig) -> int:
    """
    Branching index b of the scenario tree

    Args:
        predictions (PredictionSet): Prediction the tree was selected from; checked against
            the tree when given

    Raises:
        ContractError: if the prediction does not match the tree's horizon or participants
    """
    if predictions is not None:
        if predictions.horizon != tree.horizon:
            raise ContractError(f"prediction horizon {predictions.horizon} != tree horizon {tree.horizon}")
        if tree.scenarios and predictions.n_tps != len(tree.scenarios[0].modes):
            raise ContractError(f"prediction has {predictions.n_tps} participants, the tree {len(tree.scenarios[0].modes)}")
    return analyze_branching(tree, risk, cfg).branching_index
