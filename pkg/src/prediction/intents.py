"""
Scripted traffic-participant intents: route + acceleration law + prior weight, the
allocation of predictor modes to intents, and the kinematic intent-evidence filter
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from src.errors import ContractError
from src.world.path_world import ReferencePath

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AccelProfile:
    """
    Acceleration law of a scripted intent, evaluated once per step

    A plain profile applies ``accel`` while keeping the speed inside [v_min, v_max].
    With ``target_speed`` and ``target_arclength`` set, the participant brakes inside
    ``brake_zone`` meters before ``target_arclength`` so that it reaches the target
    speed there, then holds that speed.
    """

    accel: float = 0.0
    v_min: float = 0.0
    v_max: float = math.inf
    target_speed: Optional[float] = None
    target_arclength: Optional[float] = None
    brake_zone: float = 12.0
    max_decel: float = 4.0

    def __call__(self, s: float, v: float) -> float:
        if self.target_speed is None or self.target_arclength is None:
            return self.accel
        remaining = self.target_arclength - s
        if remaining > self.brake_zone:
            return self.accel
        if v <= self.target_speed:
            return 0.0
        if remaining <= 0.0:
            return -min(self.max_decel, v - self.target_speed)
        need = (v * v - self.target_speed**2) / (2.0 * remaining)
        return -min(self.max_decel, need)

    def jittered(self, offset: float) -> "AccelProfile":
        """Variant with the constant acceleration and target speed shifted by ``offset``"""
        target = None if self.target_speed is None else max(0.5, self.target_speed + offset)
        return replace(self, accel=self.accel + offset, target_speed=target)


@dataclass(frozen=True)
class Intent:
    label: str
    route: ReferencePath
    profile: AccelProfile
    weight: float

    def __post_init__(self):
        if self.weight < 0:
            raise ContractError(f"intent {self.label!r} has negative weight {self.weight}")


def allocate_modes(weights: Sequence[float], n_modes: int) -> List[int]:
    """
    Split ``n_modes`` among intents proportionally to their weights (largest remainder),
    at least one mode per intent

    Args:
        weights: Intent weights, not necessarily normalized
        n_modes: Total number of modes; raised to the number of intents if smaller

    Returns:
        List[int]: Number of modes per intent
    """
    w = np.asarray(weights, dtype=float)
    if w.size == 0:
        return []
    n_modes = max(int(n_modes), w.size)
    total = w.sum()
    quota = w / total * n_modes if total > 0 else np.full(w.size, n_modes / w.size)
    alloc = np.maximum(np.floor(quota).astype(int), 1)
    while alloc.sum() < n_modes:
        rest = quota - alloc
        alloc[int(np.argmax(rest))] += 1
    while alloc.sum() > n_modes:
        rest = np.where(alloc > 1, quota - alloc, np.inf)
        alloc[int(np.argmin(rest))] -= 1
    return alloc.tolist()


class IntentFilter:
    def __init__(self, window: int = 10, sigma_accel: float = 1.0, sigma_pos: float = 0.5, min_weight: float = 1e-3):
        """
        Posterior intent weights from observed kinematics

        Args:
            window (int): Number of most recent observation steps used
            sigma_accel (float): Std. dev. of observed vs. expected acceleration (m/s^2)
            sigma_pos (float): Std. dev. of the lateral distance to an intent's route (m)
            min_weight (float): Floor applied to every posterior weight before renormalizing
        """
        self.window = window
        self.sigma_accel = sigma_accel
        self.sigma_pos = sigma_pos
        self.min_weight = min_weight

    def posterior(self, intents: Sequence[Intent], history: np.ndarray, dt: float) -> np.ndarray:
        """
        Args:
            intents: Candidate intents with prior weights
            history: Observed states (T, 4) with columns x, y, psi, v; most recent last
            dt: Observation period (s)

        Returns:
            np.ndarray: Normalized weight per intent
        """
        prior = np.array([it.weight for it in intents], dtype=float)
        prior = prior / prior.sum()
        history = np.asarray(history, dtype=float)
        recent = history[-(self.window + 1):]
        if recent.shape[0] < 2:
            return prior

        loglik = np.zeros(len(intents))
        observed_accel = np.diff(recent[:, 3]) / dt
        for i, intent in enumerate(intents):
            s = intent.route.project(recent[:-1, 0], recent[:-1, 1])
            expected = np.array([intent.profile(si, vi) for si, vi in zip(s, recent[:-1, 3])])
            lateral = intent.route.distance_to(recent[1:, 0], recent[1:, 1])
            loglik[i] = -0.5 * np.sum(((observed_accel - expected) / self.sigma_accel) ** 2)
            loglik[i] += -0.5 * np.sum((lateral / self.sigma_pos) ** 2)

        with np.errstate(divide="ignore"):
            log_post = np.log(prior) + loglik
        post = np.exp(log_post - logsumexp(log_post))
        post = np.maximum(post, self.min_weight)
        return post / post.sum()
