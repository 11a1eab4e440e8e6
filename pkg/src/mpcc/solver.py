"""
SQP solver for branch problems: condensed multiple shooting, Gauss-Newton Hessian,
augmented-Lagrangian inequalities and a backtracking line search on an l1 merit function
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Protocol

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from src.errors import ConfigurationError, ContractError
from src.selection.scenario_selection import PlanTrajectory

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"


class BranchProblem(Protocol):
    """What the solver needs from a problem; evaluators are batched over leading axes"""

    n_scenarios: int
    horizon: int
    n_x: int
    n_u: int
    n_slots: int
    slot_index: np.ndarray
    z0: np.ndarray
    input_lower: np.ndarray
    input_upper: np.ndarray

    def dynamics(self, Z: np.ndarray, U: np.ndarray, jacobians: bool = False): ...

    def stage_residuals(self, Z: np.ndarray, jacobians: bool = False): ...

    def stage_inequalities(self, Z: np.ndarray, jacobians: bool = False): ...

    def input_cost(self, U_slots: np.ndarray): ...


@dataclass(frozen=True)
class SolverConfig:
    max_iter: int = 30
    kkt_tol: float = 1e-4
    feasibility_tol: float = 1e-3
    infeasible_tol: float = 5e-2
    rho_init: float = 50.0
    rho_growth: float = 5.0
    rho_max: float = 1e4
    inner_iters: int = 5
    merit_penalty: float = 1e3
    mu_init: float = 1e-10
    mu_min: float = 1e-12
    mu_max: float = 1e8
    min_step: float = 1.0 / 32.0

    def __post_init__(self):
        if self.max_iter < 1:
            raise ConfigurationError("solver.max_iter", "must be >= 1")
        if self.inner_iters < 1:
            raise ConfigurationError("solver.inner_iters", "must be >= 1")
        for name in ("kkt_tol", "feasibility_tol", "infeasible_tol", "rho_init", "merit_penalty", "mu_init"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"solver.{name}", "must be > 0")
        if not self.rho_growth > 1:
            raise ConfigurationError("solver.rho_growth", "must be > 1")
        if not 0 < self.min_step <= 1:
            raise ConfigurationError("solver.min_step", "must lie in (0, 1]")


@dataclass
class PlanTree:
    """
    Optimized branches: states (S, N, 7) and inputs (S, N-1, 3) with inputs of steps
    k <= b shared by all branches
    """

    states: np.ndarray
    inputs: np.ndarray
    branching_index: int
    weights: np.ndarray
    scenario_ids: List[int]
    costs: np.ndarray
    objective: float
    status: str
    iterations: int = 0
    kkt: float = float("nan")
    violation: float = 0.0
    solve_time: float = 0.0
    history: List[dict] = field(default_factory=list, repr=False)

    @property
    def n_scenarios(self) -> int:
        return int(self.states.shape[0])

    @property
    def horizon(self) -> int:
        return int(self.states.shape[1])

    def first_input(self) -> np.ndarray:
        return self.inputs[0, 0].copy()

    def main_branch(self) -> int:
        """Index of the highest-weight branch (lowest index on ties)"""
        return int(np.argmax(self.weights))

    def consensus(self, dt: float) -> PlanTrajectory:
        """Single-branch plan: the shared trunk followed by the highest-weight branch"""
        return PlanTrajectory(self.states[self.main_branch()], dt)

    def shared_inputs_identical(self) -> bool:
        b = min(self.branching_index, self.inputs.shape[1] - 1)
        trunk = self.inputs[:, : b + 1]
        return bool(np.all(trunk == trunk[:1]))

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "iterations": self.iterations,
            "kkt": self.kkt,
            "violation": self.violation,
            "objective": self.objective,
            "solve_time": self.solve_time,
            "branching_index": self.branching_index,
            "weights": self.weights.tolist(),
            "scenario_ids": list(self.scenario_ids),
            "costs": self.costs.tolist(),
        }


def _al_value(g: np.ndarray, lam: np.ndarray, rho: float) -> float:
    t = np.maximum(lam + rho * g, 0.0)
    return float(np.sum(t * t - lam * lam) / (2.0 * rho))


class SQPSolver:
    def __init__(self, config: Optional[SolverConfig] = None):
        """
        Args:
            config (SolverConfig): Iteration caps, tolerances and penalty schedule
        """
        self.config = config or SolverConfig()

    def rollout(self, problem: BranchProblem, U_slots: np.ndarray) -> np.ndarray:
        U = U_slots[problem.slot_index]
        Z = np.empty((problem.n_scenarios, problem.horizon, problem.n_x))
        Z[:, 0] = problem.z0
        for k in range(problem.horizon - 1):
            Z[:, k + 1] = problem.dynamics(Z[:, k], U[:, k])
        return Z

    def initial_inputs(self, problem: BranchProblem, warm_start: Optional[np.ndarray]) -> np.ndarray:
        """Slot values from per-branch inputs (S, N-1, nu), averaged with the scenario weights"""
        if warm_start is None:
            U = np.zeros((problem.n_slots, problem.n_u))
        else:
            warm = np.asarray(warm_start, dtype=float)
            if warm.shape != problem.slot_index.shape + (problem.n_u,):
                raise ContractError(f"warm start shape {warm.shape} does not match {problem.slot_index.shape + (problem.n_u,)}")
            omega = np.asarray(getattr(problem, "omega", np.full(problem.n_scenarios, 1.0 / problem.n_scenarios)))
            acc = np.zeros((problem.n_slots, problem.n_u))
            total = np.zeros(problem.n_slots)
            w = np.broadcast_to(omega[:, None], problem.slot_index.shape)
            np.add.at(acc, problem.slot_index, w[..., None] * warm)
            np.add.at(total, problem.slot_index, w)
            U = acc / np.maximum(total, 1e-12)[:, None]
        return np.clip(U, problem.input_lower, problem.input_upper)

    @staticmethod
    def slot_selector(problem: BranchProblem) -> np.ndarray:
        """One-hot map (S, N-1, nu, nv) from the stacked slot variables to the input of each (branch, step)"""
        S, nu = problem.n_scenarios, problem.n_u
        steps = problem.slot_index.shape[1]
        select = np.zeros((S, steps, nu, problem.n_slots * nu))
        cols = problem.slot_index[..., None] * nu + np.arange(nu)
        select[np.arange(S)[:, None, None], np.arange(steps)[None, :, None], np.arange(nu)[None, None, :], cols] = 1.0
        return select

    def _sensitivities(self, A: np.ndarray, B: np.ndarray, select: np.ndarray, defects: np.ndarray, c0: np.ndarray):
        S, N, nx = A.shape[0], A.shape[1] + 1, A.shape[2]
        sens = np.zeros((S, N, nx, select.shape[-1]))
        c = np.zeros((S, N, nx))
        c[:, 0] = c0
        BE = B @ select
        for k in range(N - 1):
            sens[:, k + 1] = A[:, k] @ sens[:, k] + BE[:, k]
            c[:, k + 1] = (A[:, k] @ c[:, k, :, None])[..., 0] + defects[:, k]
        return sens, c

    def _merit_value(self, r, in_val, g, g_u, defects, lam_g, lam_u, rho) -> float:
        value = float(np.sum(r * r)) + in_val + _al_value(g, lam_g, rho) + _al_value(g_u, lam_u, rho)
        return value + self.config.merit_penalty * float(np.sum(np.abs(defects)))

    def _merit(self, problem, Z, U, lam_g, lam_u, rho) -> float:
        defects = problem.dynamics(Z[:, :-1], U[problem.slot_index]) - Z[:, 1:]
        return self._merit_value(
            problem.stage_residuals(Z), problem.input_cost(U)[0], problem.stage_inequalities(Z),
            self._input_bounds(problem, U), defects, lam_g, lam_u, rho,
        )

    @staticmethod
    def _input_bounds(problem, U):
        with np.errstate(invalid="ignore"):
            return np.stack([U - problem.input_upper, problem.input_lower - U], axis=-1)

    def _score(self, problem, Z, U):
        """(objective, worst violation, states, inputs) of a defect-free iterate ``Z`` = rollout(U)"""
        r = problem.stage_residuals(Z)
        objective = float(np.sum(r * r)) + problem.input_cost(U)[0]
        g = problem.stage_inequalities(Z)
        viol = max(float(np.max(g, initial=0.0)), float(np.max(self._input_bounds(problem, U), initial=0.0)), 0.0)
        return objective, viol, Z, U.copy()

    def solve(self, problem: BranchProblem, warm_start: Optional[np.ndarray] = None) -> PlanTree:
        """
        Solve a branch problem

        Args:
            problem (BranchProblem): Problem to solve
            warm_start (np.ndarray): Initial inputs per branch (S, N-1, nu), zeros when None

        Returns:
            PlanTree: Best feasible iterate found (least-violating one if none is feasible),
            polished by integrating its inputs from z0
        """
        cfg = self.config
        start = time.perf_counter()
        S, nu = problem.n_scenarios, problem.n_u
        nv = problem.n_slots * nu
        slots = np.arange(problem.n_slots)

        U = self.initial_inputs(problem, warm_start)
        Z = self.rollout(problem, U)
        best = self._score(problem, Z, U)
        select = self.slot_selector(problem)
        lam_g = np.zeros_like(problem.stage_inequalities(Z))
        lam_u = np.zeros(U.shape + (2,))
        rho = cfg.rho_init
        mu = cfg.mu_init
        prev_violation = np.inf
        status = MAX_ITER
        kkt = np.inf
        history = []
        iteration = 0
        scored = True

        for iteration in range(1, cfg.max_iter + 1):
            # Linearize dynamics, residuals and active inequalities around the iterate
            F, A, B = problem.dynamics(Z[:, :-1], U[problem.slot_index], jacobians=True)
            defects = F - Z[:, 1:]
            r, Jr = problem.stage_residuals(Z, jacobians=True)
            g, Jg = problem.stage_inequalities(Z, jacobians=True)
            g_u = self._input_bounds(problem, U)

            t = lam_g + rho * g
            active = t > 0
            r_al = np.where(active, t, 0.0) / np.sqrt(2.0 * rho)
            J_al = np.where(active, np.sqrt(rho / 2.0), 0.0)[..., None] * Jg
            rows = np.concatenate([r, r_al], axis=-1)
            J_rows = np.concatenate([Jr, J_al], axis=-2)

            # Condense the state steps onto the shared input slots; rows without
            # a state Jacobian only shift the merit
            sens, c = self._sensitivities(A, B, select, defects, problem.z0 - Z[:, 0])
            live = np.any(J_rows != 0.0, axis=-1)
            M = np.matmul(J_rows, sens)[live]
            a = (rows + (J_rows @ c[..., None])[..., 0])[live]

            in_val, in_grad, in_hess = problem.input_cost(U)
            t_u = lam_u + rho * g_u
            act_u = t_u > 0
            # d/du of the input-bound AL term: +t on the upper row, -t on the lower row
            al_u_grad = np.where(act_u[..., 0], t_u[..., 0], 0.0) - np.where(act_u[..., 1], t_u[..., 1], 0.0)
            al_u_curv = rho * (act_u[..., 0].astype(float) + act_u[..., 1])

            grad = 2.0 * M.T @ a + (in_grad + al_u_grad).reshape(-1)
            H = 2.0 * M.T @ M
            H4 = H.reshape(problem.n_slots, nu, problem.n_slots, nu)
            H4[slots, :, slots, :] += in_hess
            H[np.diag_indices(nv)] += al_u_curv.reshape(-1)

            merit0 = self._merit_value(r, in_val, g, g_u, defects, lam_g, lam_u, rho)
            violation = max(float(np.max(g, initial=0.0)), float(np.max(g_u, initial=0.0)), 0.0)
            defect = float(np.max(np.abs(defects), initial=0.0))
            stationarity = float(np.max(np.abs(grad), initial=0.0)) / (1.0 + abs(merit0))
            kkt = max(stationarity, violation, defect)
            history.append({"iter": iteration, "merit": merit0, "kkt": kkt, "violation": violation, "rho": rho, "mu": mu})
            logger.debug(f"SQP iter {iteration}: merit={merit0:.4f} kkt={kkt:.2e} viol={violation:.2e} rho={rho:g} mu={mu:.1e}")
            if kkt <= cfg.kkt_tol:
                status = CONVERGED
                break

            try:
                factor = cho_factor(H + mu * np.eye(nv), check_finite=False)
                du = -cho_solve(factor, grad, check_finite=False)
            except (LinAlgError, ValueError):
                mu = min(mu * 10.0, cfg.mu_max)
                continue
            dz = (sens @ du) + c
            pred = -(grad @ du + 0.5 * du @ (H @ du))
            decrease = max(pred, 0.0) + cfg.merit_penalty * float(np.sum(np.abs(defects)))

            # Backtracking line search on the l1 merit
            dU = du.reshape(problem.n_slots, nu)
            alpha = 1.0
            accepted = False
            while alpha >= cfg.min_step:
                Zt, Ut = Z + alpha * dz, U + alpha * dU
                if self._merit(problem, Zt, Ut, lam_g, lam_u, rho) <= merit0 - 1e-4 * alpha * decrease:
                    Z, U = Zt, Ut
                    accepted = True
                    scored = False
                    break
                alpha *= 0.5
            if accepted:
                mu = max(mu / 10.0, cfg.mu_min) if alpha == 1.0 else mu
            else:
                mu = min(mu * 10.0, cfg.mu_max)

            # Multiplier and penalty update; the rolled-out iterate is scored here
            small_step = accepted and float(np.max(np.abs(alpha * dU), initial=0.0)) < 1e-6
            if iteration % cfg.inner_iters == 0 or small_step:
                if not scored:
                    best = self._better(best, self._score(problem, self.rollout(problem, U), U))
                    scored = True
                g_now = problem.stage_inequalities(Z)
                g_u_now = self._input_bounds(problem, U)
                lam_g = np.maximum(lam_g + rho * g_now, 0.0)
                lam_u = np.maximum(lam_u + rho * np.nan_to_num(g_u_now, neginf=-1e9), 0.0)
                viol_now = max(float(np.max(g_now, initial=0.0)), float(np.max(g_u_now, initial=0.0)), 0.0)
                if viol_now > 0.25 * prev_violation:
                    rho = min(rho * cfg.rho_growth, cfg.rho_max)
                prev_violation = viol_now

        final = self._score(problem, self.rollout(problem, U), U) if not scored else None
        if final is not None:
            best = self._better(best, final)
        objective, viol, Z_best, U_best = best
        if viol > cfg.infeasible_tol:
            status = INFEASIBLE
        elif status == CONVERGED and viol > cfg.feasibility_tol:
            status = MAX_ITER

        U_sk = U_best[problem.slot_index]
        costs = problem.scenario_costs(Z_best, U_best) if hasattr(problem, "scenario_costs") else np.full(S, objective)
        tree = getattr(problem, "tree", None)
        plan = PlanTree(
            states=Z_best,
            inputs=U_sk,
            branching_index=int(getattr(problem, "branching_index", 0)),
            weights=np.asarray(getattr(problem, "omega", np.full(S, 1.0 / S)), dtype=float),
            scenario_ids=[s.scenario_id for s in tree.scenarios] if tree is not None else list(range(S)),
            costs=np.asarray(costs, dtype=float),
            objective=objective,
            status=status,
            iterations=iteration,
            kkt=float(kkt),
            violation=viol,
            solve_time=time.perf_counter() - start,
            history=history,
        )
        logger.debug(f"SQP finished: {status} after {iteration} iterations, objective={objective:.3f}, violation={viol:.2e}")
        return plan

    def _better(self, best, candidate):
        """Feasible beats infeasible, then lower objective; among infeasible, lower violation"""
        if best is None:
            return candidate
        tol = self.config.feasibility_tol
        b_feas, c_feas = best[1] <= tol, candidate[1] <= tol
        if c_feas and not b_feas:
            return candidate
        if b_feas and not c_feas:
            return best
        if c_feas:
            return candidate if candidate[0] < best[0] else best
        return candidate if candidate[1] < best[1] else best


def solve(problem: BranchProblem, warm_start: Optional[np.ndarray] = None, config: Optional[SolverConfig] = None) -> PlanTree:
    """Solve ``problem`` with a fresh solver; see ``SQPSolver.solve``"""
    return SQPSolver(config).solve(problem, warm_start)
