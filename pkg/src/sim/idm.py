"""
Intelligent Driver Model for simulated traffic and the ranges its parameters are sampled from
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src.errors import ConfigurationError, DomainError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class IDMParams:
    """
    Args:
        v0: Desired speed (m/s)
        T: Time headway (s)
        s0: Minimum gap (m)
        a: Maximum acceleration (m/s^2)
        b: Comfortable deceleration (m/s^2)
        delta: Acceleration exponent
    """

    v0: float = 25.0
    T: float = 1.5
    s0: float = 2.0
    a: float = 1.5
    b: float = 2.0
    delta: float = 4.0

    def __post_init__(self):
        for name in ("v0", "T", "s0", "a", "b", "delta"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"idm.{name}", "must be > 0")


def desired_gap(params: IDMParams, v: float, dv: float) -> float:
    """s* = s0 + vT + v dv / (2 sqrt(a b))"""
    return params.s0 + v * params.T + v * dv / (2.0 * math.sqrt(params.a * params.b))


def idm_accel(params: IDMParams, v: float, gap: Optional[float] = None, lead_speed: Optional[float] = None) -> float:
    """
    IDM acceleration

    Args:
        params (IDMParams): Driver parameters
        v (float): Own speed (m/s)
        gap (float): Bumper-to-bumper distance to the leader (m); None or inf for free road
        lead_speed (float): Speed of the leader (m/s)

    Returns:
        float: a (1 - (v/v0)^delta - (s*/s)^2)

    Raises:
        DomainError: if the gap is not positive
    """
    free = params.a * (1.0 - (v / params.v0) ** params.delta)
    if gap is None or math.isinf(gap):
        return free
    if gap <= 0:
        raise DomainError(f"IDM gap must be > 0, got {gap:.3f}")
    dv = v - (v if lead_speed is None else lead_speed)
    return free - params.a * (desired_gap(params, v, dv) / gap) ** 2


@dataclass(frozen=True)
class IDMRanges:
    """Uniform sampling ranges of the IDM parameters of simulated traffic"""

    v0: Tuple[float, float] = (22.0, 30.0)
    T: Tuple[float, float] = (1.0, 2.0)
    s0: Tuple[float, float] = (1.5, 3.0)
    a: Tuple[float, float] = (1.0, 2.0)
    b: Tuple[float, float] = (1.5, 2.5)
    delta: float = 4.0

    def __post_init__(self):
        for name in ("v0", "T", "s0", "a", "b"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigurationError(f"merging.idm.{name}", "must be a range 0 < low <= high")

    def sample(self, rng: np.random.Generator) -> IDMParams:
        return IDMParams(
            v0=float(rng.uniform(*self.v0)),
            T=float(rng.uniform(*self.T)),
            s0=float(rng.uniform(*self.s0)),
            a=float(rng.uniform(*self.a)),
            b=float(rng.uniform(*self.b)),
            delta=self.delta,
        )
