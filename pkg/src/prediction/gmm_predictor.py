"""
Multi-modal prediction contract (per-step Gaussian mixture per traffic participant)
and the synthetic predictor that produces it from scripted intents
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence

import numpy as np

from src.errors import ConfigurationError, ContractError
from src.prediction.intents import AccelProfile, Intent, IntentFilter, allocate_modes
from src.world.path_world import Dimensions, ReferencePath

logger = logging.getLogger(__name__)

SIGMA_MIN = 1e-3


@dataclass(frozen=True, eq=False)
class GaussianState:
    mu: np.ndarray
    cov: np.ndarray
    psi: float
    v: float

    def validate(self):
        check_spd(self.cov)


def check_spd(cov: np.ndarray, sigma_min: float = SIGMA_MIN):
    """Raise ContractError unless cov (..., 2, 2) is symmetric with eigenvalues above sigma_min^2"""
    cov = np.asarray(cov, dtype=float)
    if not np.allclose(cov, np.swapaxes(cov, -1, -2), atol=1e-12):
        raise ContractError("covariance is not symmetric")
    if not np.all(np.isfinite(cov)):
        raise ContractError("covariance has non-finite entries")
    eig = np.linalg.eigvalsh(cov)
    if np.any(eig <= sigma_min**2):
        raise ContractError(f"covariance not positive definite (smallest eigenvalue {eig.min():.3e})")


class ModePrediction:
    def __init__(
        self,
        mode_id: int,
        prob: float,
        mu: np.ndarray,
        cov: np.ndarray,
        psi: np.ndarray,
        v: np.ndarray,
        label: str = "",
    ):
        """
        One predicted trajectory hypothesis of a traffic participant

        Args:
            mode_id (int): Index of the mode within its participant
            prob (float): Mode probability
            mu (np.ndarray): Mean positions (N, 2)
            cov (np.ndarray): Position covariances (N, 2, 2)
            psi (np.ndarray): Headings (N,)
            v (np.ndarray): Speeds (N,)
            label (str): Intent the mode was generated from, if known
        """
        self.mode_id = int(mode_id)
        self.prob = float(prob)
        self.mu = np.asarray(mu, dtype=float)
        self.cov = np.asarray(cov, dtype=float)
        self.psi = np.asarray(psi, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.label = label

    @classmethod
    def from_states(cls, mode_id: int, prob: float, states: Sequence[GaussianState], label: str = "") -> "ModePrediction":
        return cls(
            mode_id,
            prob,
            np.array([s.mu for s in states]),
            np.array([s.cov for s in states]),
            np.array([s.psi for s in states]),
            np.array([s.v for s in states]),
            label,
        )

    @property
    def horizon(self) -> int:
        return int(self.mu.shape[0])

    @property
    def states(self) -> List[GaussianState]:
        return [GaussianState(self.mu[k], self.cov[k], float(self.psi[k]), float(self.v[k])) for k in range(self.horizon)]

    def with_prob(self, prob: float) -> "ModePrediction":
        return ModePrediction(self.mode_id, prob, self.mu, self.cov, self.psi, self.v, self.label)

    def validate(self, horizon: Optional[int] = None):
        n = self.horizon
        if horizon is not None and n != horizon:
            raise ContractError(f"mode {self.mode_id} has {n} states, expected {horizon}")
        if self.mu.shape != (n, 2) or self.cov.shape != (n, 2, 2) or self.psi.shape != (n,) or self.v.shape != (n,):
            raise ContractError(f"mode {self.mode_id} arrays have inconsistent shapes")
        if not 0.0 <= self.prob <= 1.0:
            raise ContractError(f"mode {self.mode_id} probability {self.prob} outside [0, 1]")
        check_spd(self.cov)
        trace = np.trace(self.cov, axis1=1, axis2=2)
        if np.any(np.diff(trace) < -1e-9):
            raise ContractError(f"mode {self.mode_id} covariance trace decreases along the horizon")

    def __repr__(self) -> str:
        return f"ModePrediction(id={self.mode_id}, pi={self.prob:.3f}, label={self.label!r}, N={self.horizon})"


@dataclass
class PredictionSet:
    """
    Per-participant mode lists sharing one horizon and step

    ``modes[o]`` lists the modes of participant ``tp_ids[o]``, whose body size is ``dims[o]``.
    """

    modes: List[List[ModePrediction]]
    horizon: int
    dt: float
    tp_ids: List[int] = field(default_factory=list)
    dims: List[Dimensions] = field(default_factory=list)

    def __post_init__(self):
        if not self.tp_ids:
            self.tp_ids = list(range(len(self.modes)))
        if not self.dims:
            self.dims = [Dimensions(4.5, 2.0) for _ in self.modes]

    @property
    def n_tps(self) -> int:
        return len(self.modes)

    @property
    def n_joint_modes(self) -> int:
        return max((len(m) for m in self.modes), default=0)

    def is_empty(self) -> bool:
        return self.n_tps == 0

    def validate(self):
        if self.horizon < 2:
            raise ContractError(f"horizon must be >= 2, got {self.horizon}")
        if not self.dt > 0:
            raise ContractError(f"dt must be > 0, got {self.dt}")
        if len(self.tp_ids) != self.n_tps or len(self.dims) != self.n_tps:
            raise ContractError("tp_ids and dims must have one entry per participant")
        for tp_id, modes in zip(self.tp_ids, self.modes):
            if not modes:
                raise ContractError(f"participant {tp_id} has no modes")
            total = sum(m.prob for m in modes)
            if abs(total - 1.0) > 1e-6:
                raise ContractError(f"participant {tp_id} mode probabilities sum to {total:.8f}")
            for m in modes:
                m.validate(self.horizon)

    def joint_mode(self, o: int, m: int) -> ModePrediction:
        """Mode of participant ``o`` taking part in joint mode ``m`` (wraps when it has fewer modes)"""
        modes = self.modes[o]
        return modes[m % len(modes)]

    def joint_probs(self) -> np.ndarray:
        """Joint-mode probabilities: product over participants, normalized"""
        n = self.n_joint_modes
        if n == 0:
            return np.zeros(0)
        p = np.ones(n)
        for o in range(self.n_tps):
            p *= np.array([self.joint_mode(o, m).prob for m in range(n)])
        total = p.sum()
        return p / total if total > 0 else np.full(n, 1.0 / n)


@dataclass
class TrackedParticipant:
    """Observed traffic participant: id, body size, state history (x, y, psi, v) and candidate intents"""

    tp_id: int
    dims: Dimensions
    history: np.ndarray
    intents: List[Intent] = field(default_factory=list)


@dataclass
class Scene:
    participants: List[TrackedParticipant]
    dt: float
    cycle: int = 0


class Predictor(Protocol):
    def predict(self, scene: Scene, horizon: int, dt: float) -> PredictionSet: ...


def covariance_growth(psi: np.ndarray, sigma_lon0: float, sigma_lat0: float, gamma_lon: float, gamma_lat: float) -> np.ndarray:
    """R(psi_k) diag((s_lon0 + k g_lon)^2, (s_lat0 + k g_lat)^2) R(psi_k)^T for every step"""
    k = np.arange(psi.shape[0])
    var_lon = (sigma_lon0 + k * gamma_lon) ** 2
    var_lat = (sigma_lat0 + k * gamma_lat) ** 2
    c, s = np.cos(psi), np.sin(psi)
    cov = np.empty((psi.shape[0], 2, 2))
    cov[:, 0, 0] = c * c * var_lon + s * s * var_lat
    cov[:, 1, 1] = s * s * var_lon + c * c * var_lat
    cov[:, 0, 1] = cov[:, 1, 0] = c * s * (var_lon - var_lat)
    return cov


def advance_constant_accel(s: float, v: float, a: float, dt: float, v_lo: float, v_hi: float):
    """Exact constant-acceleration step with the speed saturating at [v_lo, v_hi]"""
    v_next = v + a * dt
    if a < 0 and v_next < v_lo:
        t_hit = max(0.0, (v_lo - v) / a)
        return s + v * t_hit + 0.5 * a * t_hit**2 + v_lo * (dt - t_hit), v_lo
    if a > 0 and v_next > v_hi:
        t_hit = max(0.0, (v_hi - v) / a)
        return s + v * t_hit + 0.5 * a * t_hit**2 + v_hi * (dt - t_hit), v_hi
    return s + v * dt + 0.5 * a * dt * dt, v_next


def synth_rollout(
    tp_state: Sequence[float],
    route: ReferencePath,
    accel_profile: AccelProfile,
    horizon: int,
    dt: float,
    sigma_lon0: float = 0.2,
    sigma_lat0: float = 0.2,
    gamma_lon: float = 0.08,
    gamma_lat: float = 0.03,
    mode_id: int = 0,
    prob: float = 1.0,
    label: str = "",
) -> ModePrediction:
    """
    Roll a participant forward along a route under an acceleration law

    Args:
        tp_state: Current (x, y, psi, v) of the participant
        route (ReferencePath): Route the mean follows
        accel_profile (AccelProfile): Acceleration law, held constant within each step
        horizon (int): Number of predicted states including the current one
        dt (float): Step (s)
        sigma_lon0, sigma_lat0: Initial longitudinal / lateral std. dev. (m)
        gamma_lon, gamma_lat: Std. dev. growth per step (m)

    Returns:
        ModePrediction: Mean, heading, speed and rotated covariance per step; once the
        route end is reached the mean stays there with zero speed
    """
    s = float(route.project(tp_state[0], tp_state[1]))
    v = max(float(tp_state[3]), 0.0)
    v_lo = max(accel_profile.v_min, 0.0)
    v_hi = accel_profile.v_max
    arclength = np.empty(horizon)
    speed = np.empty(horizon)
    for k in range(horizon):
        arclength[k], speed[k] = s, v
        if s >= route.theta_max:
            v = 0.0
            continue
        a = accel_profile(s, v)
        s, v = advance_constant_accel(s, v, a, dt, min(v_lo, v), max(v_hi, v))
        if s >= route.theta_max:
            s = route.theta_max
    speed[arclength >= route.theta_max] = 0.0
    q = route.query(arclength)
    cov = covariance_growth(q.psi, sigma_lon0, sigma_lat0, gamma_lon, gamma_lat)
    mu = np.stack([q.x, q.y], axis=-1)
    return ModePrediction(mode_id, prob, mu, cov, np.asarray(q.psi), speed, label)


@dataclass(frozen=True)
class PredictionConfig:
    """
    Args:
        modes_per_tp: Modes per participant (6 like a typical learned predictor)
        accel_jitter: Std. dev. of the acceleration offset of extra modes (m/s^2)
        sigma_lon0, sigma_lat0: Initial std. dev. along / across the heading (m)
        gamma_lon, gamma_lat: Std. dev. growth per step (m)
        base_share: Weight share of the unjittered mode of an intent
        use_evidence: Weight intents by observed kinematics instead of the priors
        window, sigma_accel, sigma_pos: Evidence window (steps) and likelihood widths
        file: Prediction records file replayed instead of the synthetic predictor
    """

    modes_per_tp: int = 6
    accel_jitter: float = 0.3
    sigma_lon0: float = 0.2
    sigma_lat0: float = 0.2
    gamma_lon: float = 0.08
    gamma_lat: float = 0.03
    base_share: float = 0.5
    use_evidence: bool = True
    window: int = 10
    sigma_accel: float = 1.0
    sigma_pos: float = 0.5
    file: Optional[str] = None

    def __post_init__(self):
        if self.modes_per_tp < 1:
            raise ConfigurationError("prediction.modes_per_tp", "must be >= 1")
        for name in ("sigma_lon0", "sigma_lat0"):
            if not getattr(self, name) > SIGMA_MIN:
                raise ConfigurationError(f"prediction.{name}", f"must be > {SIGMA_MIN}")
        for name in ("accel_jitter", "gamma_lon", "gamma_lat"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"prediction.{name}", "must be >= 0")
        if not 0.0 < self.base_share <= 1.0:
            raise ConfigurationError("prediction.base_share", "must lie in (0, 1]")
        if self.window < 1 or not self.sigma_accel > 0 or not self.sigma_pos > 0:
            raise ConfigurationError("prediction", "window, sigma_accel and sigma_pos must be positive")


class SyntheticPredictor:
    def __init__(
        self,
        modes_per_tp: Optional[int] = None,
        accel_jitter: float = 0.3,
        sigma_lon0: float = 0.2,
        sigma_lat0: float = 0.2,
        gamma_lon: float = 0.08,
        gamma_lat: float = 0.03,
        intent_filter: Optional[IntentFilter] = None,
        base_share: float = 0.5,
        seed: int = 0,
    ):
        """
        Stand-in for a learned multi-modal predictor

        Args:
            modes_per_tp (int): Modes per participant; one mode per intent when None
            accel_jitter (float): Std. dev. of the acceleration offset of extra modes (m/s^2)
            sigma_lon0, sigma_lat0, gamma_lon, gamma_lat: Uncertainty growth model
            intent_filter (IntentFilter): Turns observed kinematics into intent weights;
                prior weights are used when None
            base_share (float): Fraction of an intent's weight kept by its unjittered mode
                when the intent has several modes; the variants split the rest
            seed (int): Seed of the jitter stream
        """
        self.modes_per_tp = modes_per_tp
        self.accel_jitter = accel_jitter
        self.sigmas = dict(sigma_lon0=sigma_lon0, sigma_lat0=sigma_lat0, gamma_lon=gamma_lon, gamma_lat=gamma_lat)
        if not 0.0 < base_share <= 1.0:
            raise ConfigurationError("prediction.base_share", "must lie in (0, 1]")
        self.intent_filter = intent_filter
        self.base_share = base_share
        self.seed = seed

    @classmethod
    def from_config(cls, cfg: PredictionConfig, seed: int = 0) -> "SyntheticPredictor":
        evidence = IntentFilter(cfg.window, cfg.sigma_accel, cfg.sigma_pos) if cfg.use_evidence else None
        return cls(
            modes_per_tp=cfg.modes_per_tp,
            accel_jitter=cfg.accel_jitter,
            sigma_lon0=cfg.sigma_lon0,
            sigma_lat0=cfg.sigma_lat0,
            gamma_lon=cfg.gamma_lon,
            gamma_lat=cfg.gamma_lat,
            intent_filter=evidence,
            base_share=cfg.base_share,
            seed=seed,
        )

    def mode_shares(self, count: int) -> np.ndarray:
        """Fractions of an intent's weight carried by each of its ``count`` modes, base mode first"""
        if count == 1:
            return np.ones(1)
        rest = (1.0 - self.base_share) / (count - 1)
        return np.concatenate([[self.base_share], np.full(count - 1, rest)])

    def intent_weights(self, tp: TrackedParticipant, dt: float) -> np.ndarray:
        if self.intent_filter is None:
            w = np.array([it.weight for it in tp.intents], dtype=float)
            return w / w.sum()
        return self.intent_filter.posterior(tp.intents, tp.history, dt)

    def predict_participant(self, tp: TrackedParticipant, horizon: int, dt: float, scene_dt: float) -> List[ModePrediction]:
        if len(tp.history) == 0:
            raise ContractError(f"participant {tp.tp_id} has an empty history")
        if not tp.intents:
            raise ContractError(f"participant {tp.tp_id} has no intents")
        state = np.asarray(tp.history, dtype=float)[-1]
        weights = self.intent_weights(tp, scene_dt)
        n_modes = self.modes_per_tp or len(tp.intents)
        alloc = allocate_modes([it.weight for it in tp.intents], n_modes)

        modes = []
        for i, (intent, count) in enumerate(zip(tp.intents, alloc)):
            rng = np.random.default_rng([self.seed, tp.tp_id, i])
            offsets = np.concatenate([[0.0], rng.normal(0.0, self.accel_jitter, size=count - 1)])
            shares = self.mode_shares(count)
            for offset, share in zip(offsets, shares):
                profile = intent.profile if offset == 0.0 else intent.profile.jittered(float(offset))
                modes.append(
                    synth_rollout(
                        state,
                        intent.route,
                        profile,
                        horizon,
                        dt,
                        mode_id=len(modes),
                        prob=weights[i] * share,
                        label=intent.label,
                        **self.sigmas,
                    )
                )
        return modes

    def predict(self, scene: Scene, horizon: int, dt: float) -> PredictionSet:
        """
        Predict every participant of the scene

        Args:
            scene (Scene): Observed participants
            horizon (int): Number of predicted steps N
            dt (float): Step (s)

        Returns:
            PredictionSet: Validated predictions; empty for an empty scene
        """
        modes = [self.predict_participant(tp, horizon, dt, scene.dt) for tp in scene.participants]
        pset = PredictionSet(
            modes,
            horizon,
            dt,
            tp_ids=[tp.tp_id for tp in scene.participants],
            dims=[tp.dims for tp in scene.participants],
        )
        pset.validate()
        logger.debug(f"Predicted {sum(len(m) for m in modes)} modes for {pset.n_tps} participants")
        return pset


if __name__ == "__main__":
    from src.world.path_world import straight_path

    logging.basicConfig(level=logging.INFO)
    lane = straight_path(200.0)
    intents = [
        Intent("yield", lane, AccelProfile(accel=-1.5), 0.3),
        Intent("maintain", lane, AccelProfile(accel=0.0), 0.4),
        Intent("accelerate", lane, AccelProfile(accel=1.0, v_max=30.0), 0.3),
    ]
    tp = TrackedParticipant(1, Dimensions(4.5, 2.0), np.array([[10.0, 0.0, 0.0, 20.0]]), intents)
    pset = SyntheticPredictor(modes_per_tp=6).predict(Scene([tp], dt=0.1), horizon=40, dt=0.1)
    for mode in pset.modes[0]:
        logger.info(f"{mode} final position {mode.mu[-1].round(2)} trace {math.fsum(np.diag(mode.cov[-1])):.2f}")
