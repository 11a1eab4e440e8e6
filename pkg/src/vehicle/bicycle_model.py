"""
Kinematic bicycle model of the ego vehicle with jerk / steering-rate / virtual-speed inputs
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Optional, Tuple

import numpy as np

from src.errors import ConfigurationError, DomainError
from src.world.path_world import Dimensions

logger = logging.getLogger(__name__)

# state z = [x, y, psi, v, a, delta, theta]
X, Y, PSI, V, A, DELTA, THETA = range(7)
# input u = [jerk, steering rate, virtual speed]
J, DDELTA, DTHETA = range(3)
N_X, N_U = 7, 3


@dataclass(frozen=True)
class EgoState:
    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    v: float = 0.0
    a: float = 0.0
    delta: float = 0.0
    theta: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v, self.a, self.delta, self.theta])

    @classmethod
    def from_array(cls, z) -> "EgoState":
        return cls(*(float(v) for v in np.asarray(z, dtype=float)[:N_X]))


@dataclass(frozen=True)
class ControlInput:
    j: float = 0.0
    delta_dot: float = 0.0
    theta_dot: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.j, self.delta_dot, self.theta_dot])

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        return cls(*(float(v) for v in np.asarray(u, dtype=float)[:N_U]))


@dataclass(frozen=True)
class VehicleLimits:
    """
    Actuator, acceleration and body limits of the ego vehicle

    Args:
        j_min, j_max: Jerk bounds (m/s^3)
        delta_dot_min, delta_dot_max: Steering-rate bounds (rad/s)
        delta_min, delta_max: Steering-angle bounds (rad)
        a_lon_max, a_lat_max: Friction-ellipse semi-axes (m/s^2)
        wheelbase: Distance between the axles (m)
        length, width: Ego body size (m)
        v_max: Speed limit (m/s)
        theta_dot_max: Upper bound of the virtual speed, 1.5 * v_max when omitted
    """

    j_min: float = -15.0
    j_max: float = 15.0
    delta_dot_min: float = -0.6
    delta_dot_max: float = 0.6
    delta_min: float = -0.5
    delta_max: float = 0.5
    a_lon_max: float = 3.0
    a_lat_max: float = 4.0
    wheelbase: float = 2.7
    length: float = 4.5
    width: float = 2.0
    v_max: float = 15.0
    theta_dot_max: Optional[float] = None

    def __post_init__(self):
        for lo, hi in (("j_min", "j_max"), ("delta_dot_min", "delta_dot_max"), ("delta_min", "delta_max")):
            if not getattr(self, lo) < getattr(self, hi):
                raise ConfigurationError(f"limits.{lo}", f"must be < {hi}")
        for name in ("a_lon_max", "a_lat_max", "wheelbase", "length", "width", "v_max"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"limits.{name}", "must be > 0")
        if self.theta_dot_max is not None and not self.theta_dot_max > 0:
            raise ConfigurationError("limits.theta_dot_max", "must be > 0")

    @property
    def dims(self) -> Dimensions:
        return Dimensions(self.length, self.width)

    @property
    def virtual_speed_max(self) -> float:
        return self.theta_dot_max if self.theta_dot_max is not None else 1.5 * self.v_max

    @property
    def input_lower(self) -> np.ndarray:
        return np.array([self.j_min, self.delta_dot_min, 0.0])

    @property
    def input_upper(self) -> np.ndarray:
        return np.array([self.j_max, self.delta_dot_max, self.virtual_speed_max])

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> Tuple[str, ...]:
        return tuple(f.name for f in fields(cls))


def dynamics_array(Z: np.ndarray, U: np.ndarray, wheelbase: float) -> np.ndarray:
    """Batched state derivative for states (..., 7) and inputs (..., 3)"""
    Z = np.asarray(Z, dtype=float)
    U = np.asarray(U, dtype=float)
    psi, v, a, delta = Z[..., PSI], Z[..., V], Z[..., A], Z[..., DELTA]
    return np.stack(
        [
            v * np.cos(psi),
            v * np.sin(psi),
            v * np.tan(delta) / wheelbase,
            a,
            U[..., J],
            U[..., DDELTA],
            U[..., DTHETA],
        ],
        axis=-1,
    )


def _dynamics_jacobians(Z: np.ndarray, wheelbase: float) -> np.ndarray:
    psi, v, delta = Z[..., PSI], Z[..., V], Z[..., DELTA]
    fz = np.zeros(Z.shape[:-1] + (N_X, N_X))
    fz[..., X, PSI] = -v * np.sin(psi)
    fz[..., X, V] = np.cos(psi)
    fz[..., Y, PSI] = v * np.cos(psi)
    fz[..., Y, V] = np.sin(psi)
    fz[..., PSI, V] = np.tan(delta) / wheelbase
    fz[..., PSI, DELTA] = v / (wheelbase * np.cos(delta) ** 2)
    fz[..., V, A] = 1.0
    return fz


_FU = np.zeros((N_X, N_U))
_FU[A, J] = 1.0
_FU[DELTA, DDELTA] = 1.0
_FU[THETA, DTHETA] = 1.0


def rk4_step(Z: np.ndarray, U: np.ndarray, dt: float, wheelbase: float, jacobians: bool = False):
    """
    One fixed-step RK4 step of the bicycle model, batched over leading axes

    Args:
        Z: States (..., 7)
        U: Inputs held constant over the step (..., 3)
        dt: Step length (s)
        wheelbase: Wheelbase (m)
        jacobians: Also return dZ_next/dZ (..., 7, 7) and dZ_next/dU (..., 7, 3)

    Returns:
        Z_next, or (Z_next, A, B) when ``jacobians`` is set
    """
    Z = np.asarray(Z, dtype=float)
    U = np.asarray(U, dtype=float)
    k1 = dynamics_array(Z, U, wheelbase)
    Z2 = Z + 0.5 * dt * k1
    k2 = dynamics_array(Z2, U, wheelbase)
    Z3 = Z + 0.5 * dt * k2
    k3 = dynamics_array(Z3, U, wheelbase)
    Z4 = Z + dt * k3
    k4 = dynamics_array(Z4, U, wheelbase)
    Z_next = Z + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not jacobians:
        return Z_next

    eye = np.broadcast_to(np.eye(N_X), Z.shape[:-1] + (N_X, N_X))
    fu = np.broadcast_to(_FU, Z.shape[:-1] + (N_X, N_U))
    f1 = _dynamics_jacobians(Z, wheelbase)
    dk1_dz, dk1_du = f1, fu
    f2 = _dynamics_jacobians(Z2, wheelbase)
    dk2_dz = f2 @ (eye + 0.5 * dt * dk1_dz)
    dk2_du = f2 @ (0.5 * dt * dk1_du) + fu
    f3 = _dynamics_jacobians(Z3, wheelbase)
    dk3_dz = f3 @ (eye + 0.5 * dt * dk2_dz)
    dk3_du = f3 @ (0.5 * dt * dk2_du) + fu
    f4 = _dynamics_jacobians(Z4, wheelbase)
    dk4_dz = f4 @ (eye + dt * dk3_dz)
    dk4_du = f4 @ (dt * dk3_du) + fu
    A_mat = eye + dt / 6.0 * (dk1_dz + 2.0 * dk2_dz + 2.0 * dk3_dz + dk4_dz)
    B_mat = dt / 6.0 * (dk1_du + 2.0 * dk2_du + 2.0 * dk3_du + dk4_du)
    return Z_next, A_mat, B_mat


def continuous_dynamics(z: EgoState, u: ControlInput, limits: VehicleLimits) -> np.ndarray:
    """
    State derivative [v cos psi, v sin psi, v tan(delta)/l, a, j, delta_dot, theta_dot]

    Args:
        z (EgoState): Current state
        u (ControlInput): Current input
        limits (VehicleLimits): Supplies the wheelbase

    Returns:
        np.ndarray: 7-vector
    """
    return dynamics_array(z.as_array(), u.as_array(), limits.wheelbase)


def discrete_step(z: EgoState, u: ControlInput, dt: float, limits: Optional[VehicleLimits] = None) -> EgoState:
    """Advance the state by ``dt`` seconds with one RK4 step"""
    if not dt > 0:
        raise DomainError(f"dt must be > 0, got {dt}")
    limits = limits or VehicleLimits()
    return EgoState.from_array(rk4_step(z.as_array(), u.as_array(), dt, limits.wheelbase))


def rollout(z0: np.ndarray, U: np.ndarray, dt: float, wheelbase: float) -> np.ndarray:
    """Integrate inputs (K, 3) from z0; returns states (K + 1, 7)"""
    Z = np.empty((U.shape[0] + 1, N_X))
    Z[0] = z0
    for k in range(U.shape[0]):
        Z[k + 1] = rk4_step(Z[k], U[k], dt, wheelbase)
    return Z


def lateral_accel(v, delta, wheelbase: float):
    return np.asarray(v) ** 2 * np.tan(delta) / wheelbase


def friction_ellipse_arrays(Z: np.ndarray, limits: VehicleLimits) -> Tuple[np.ndarray, np.ndarray]:
    """Friction-ellipse residual g(z) <= 0 and its gradient w.r.t. the state, batched"""
    v, a, delta = Z[..., V], Z[..., A], Z[..., DELTA]
    l = limits.wheelbase
    a_lat = lateral_accel(v, delta, l)
    g = (a / limits.a_lon_max) ** 2 + (a_lat / limits.a_lat_max) ** 2 - 1.0
    grad = np.zeros(Z.shape)
    c = 2.0 * a_lat / limits.a_lat_max**2
    grad[..., A] = 2.0 * a / limits.a_lon_max**2
    grad[..., V] = c * 2.0 * v * np.tan(delta) / l
    grad[..., DELTA] = c * v**2 / (l * np.cos(delta) ** 2)
    return g, grad


def accel_constraint_residuals(z: EgoState, limits: VehicleLimits) -> np.ndarray:
    """
    Residuals g(z) <= 0: friction ellipse, then the upper and lower steering-angle box

    Args:
        z (EgoState): State to check
        limits (VehicleLimits): Limits to check against

    Returns:
        np.ndarray: [ellipse, delta - delta_max, delta_min - delta]
    """
    g, _ = friction_ellipse_arrays(z.as_array(), limits)
    return np.array([float(g), z.delta - limits.delta_max, limits.delta_min - z.delta])


def infer_input(z: np.ndarray, z_next: np.ndarray, dt: float) -> np.ndarray:
    """Input that maps z to z_next on the linear (a, delta, theta) sub-states"""
    return np.array([z_next[A] - z[A], z_next[DELTA] - z[DELTA], z_next[THETA] - z[THETA]]) / dt


def transition_error(z: np.ndarray, z_next: np.ndarray, dt: float, limits: VehicleLimits) -> float:
    """Infinity-norm gap between z_next and the step from z under the clipped inferred input"""
    u = np.clip(infer_input(z, z_next, dt), limits.input_lower, limits.input_upper)
    return float(np.max(np.abs(rk4_step(z, u, dt, limits.wheelbase) - z_next)))


def comfort_braking_input(z: np.ndarray, decel: float, dt: float, limits: VehicleLimits, reuse: Optional[np.ndarray] = None) -> np.ndarray:
    """
    Jerk that drives the acceleration toward ``-decel`` (or to 0 once stopped),
    keeping the steering rate and virtual speed of ``reuse`` when given
    """
    target = 0.0 if z[V] <= 0.1 else -decel
    j = float(np.clip((target - z[A]) / dt, limits.j_min, limits.j_max))
    delta_dot, theta_dot = (0.0, max(float(z[V]), 0.0)) if reuse is None else (float(reuse[DDELTA]), float(reuse[DTHETA]))
    delta_dot = float(np.clip(delta_dot, limits.delta_dot_min, limits.delta_dot_max))
    theta_dot = float(np.clip(theta_dot, 0.0, limits.virtual_speed_max))
    return np.array([j, delta_dot, theta_dot])


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO)
    limits = VehicleLimits()
    state = EgoState(v=10.0, delta=0.1)
    logger.info(f"yaw rate: {continuous_dynamics(state, ControlInput(), limits)[PSI]:.5f} rad/s")
    for _ in range(10):
        state = discrete_step(state, ControlInput(theta_dot=10.0), 0.1, limits)
    logger.info(f"state after 1 s: {state}")
    logger.info(f"accel residuals: {accel_constraint_residuals(state, limits)}")
