"""Offline nonlinear-MPC planner for the Y-shaped loading cycle.

Each leg is a multiple-shooting NLP over states ``x(0..N)`` and inputs
``u(0..N-1)`` minimizing input effort and input increments, subject to the
Euler dynamics, fixed boundary poses/inputs, articulation and input limits,
and a squared clearance constraint against rectangular obstacles.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .sqp import NlpProblem, SqpConfig, SqpSolver, SqpStatus
from .trajectory import Trajectory
from .vehicle import (
    NU,
    NX,
    ControlInput,
    Frame,
    VehicleParams,
    VehicleState,
    euler,
    front_to_rear_array,
    jacobians,
    joint_position,
    rear_to_front_array,
)

log = logging.getLogger(__name__)


class PlannerInfeasible(RuntimeError):
    """The SQP could not reach a feasible trajectory; ``best`` holds its last iterate."""

    def __init__(self, message, best: Optional[Trajectory] = None, solution=None):
        super().__init__(message)
        self.best = best
        self.solution = solution


@dataclass(frozen=True)
class RectObstacle:
    center: tuple
    half_extents: tuple
    rotation: float = 0.0

    def __post_init__(self):
        if not (self.half_extents[0] > 0 and self.half_extents[1] > 0):
            raise ValueError(f"half_extents must be > 0, got {self.half_extents}")


@dataclass
class Scenario:
    params: VehicleParams
    loading_pose: VehicleState
    unloading_pose: VehicleState
    obstacles: list = field(default_factory=list)
    d_safe: float = 0.5
    ts: float = 0.2
    n_plan: int = 100

    def __post_init__(self):
        if self.n_plan < 2:
            raise ValueError(f"n_plan must be >= 2, got {self.n_plan}")
        if not self.ts > 0:
            raise ValueError(f"ts must be > 0, got {self.ts}")
        if self.d_safe < 0:
            raise ValueError(f"d_safe must be >= 0, got {self.d_safe}")
        for name, pose in (("loading_pose", self.loading_pose), ("unloading_pose", self.unloading_pose)):
            clear = math.sqrt(obstacle_clearance_sq(pose, self.obstacles, self.params))
            if clear < self.d_safe:
                raise ValueError(f"{name} has obstacle clearance {clear:.3g} < d_safe {self.d_safe}")


@dataclass
class PlannerConfig:
    r: np.ndarray = field(default_factory=lambda: np.diag([1.0, 1.0]))
    r_d: np.ndarray = field(default_factory=lambda: 8.0 * np.diag([1.0, 3.0]))
    terminal_tol: float = 1e-3
    # the NLP uses a tighter terminal box and a clearance margin so that the
    # exact input replay stays inside the audited tolerances
    terminal_tol_internal: float = 5e-4
    clearance_margin: float = 5e-3
    gamma_margin: float = 1e-9
    fd_step: float = 1e-6
    sqp: SqpConfig = field(default_factory=lambda: SqpConfig(max_iter=300))


def _check_points(xs_rear, params):
    """Rear axle, joint and front axle positions, shape ``(..., 3, 2)``."""
    xs_rear = np.asarray(xs_rear, dtype=float)
    rear = xs_rear[..., :2]
    joint = joint_position(xs_rear, params)
    front = rear_to_front_array(xs_rear, params)[..., :2]
    return np.stack([rear, joint, front], axis=-2)


def point_rect_dist_sq(points, obstacle: RectObstacle) -> np.ndarray:
    p = np.asarray(points, dtype=float) - np.asarray(obstacle.center, dtype=float)
    c, s = math.cos(obstacle.rotation), math.sin(obstacle.rotation)
    local_x = c * p[..., 0] + s * p[..., 1]
    local_y = -s * p[..., 0] + c * p[..., 1]
    hx, hy = obstacle.half_extents
    dx = local_x - np.clip(local_x, -hx, hx)
    dy = local_y - np.clip(local_y, -hy, hy)
    return dx * dx + dy * dy


def clearance_sq_array(xs_rear, obstacles: Sequence[RectObstacle], params: VehicleParams) -> np.ndarray:
    """Batched squared clearance for rear-frame states ``(..., 4)``."""
    xs_rear = np.asarray(xs_rear, dtype=float)
    if not obstacles:
        return np.full(xs_rear.shape[:-1], np.inf)
    pts = _check_points(xs_rear, params)
    d = np.stack([point_rect_dist_sq(pts, ob) for ob in obstacles], axis=-1)
    return d.min(axis=(-1, -2))


def _signed_clearance_sq(xs_rear, obstacles: Sequence[RectObstacle], params: VehicleParams) -> np.ndarray:
    """Like :func:`clearance_sq_array` but ``-depth**2`` for points inside a rectangle.

    Used for the planner constraint rows: the clamp distance is flat inside an
    obstacle, which leaves the linearized constraint without a direction out.
    """
    pts = _check_points(xs_rear, params)
    out = []
    for ob in obstacles:
        p = pts - np.asarray(ob.center, dtype=float)
        c, s = math.cos(ob.rotation), math.sin(ob.rotation)
        lx = c * p[..., 0] + s * p[..., 1]
        ly = -s * p[..., 0] + c * p[..., 1]
        hx, hy = ob.half_extents
        dx = np.abs(lx) - hx
        dy = np.abs(ly) - hy
        outside = np.maximum(dx, 0.0) ** 2 + np.maximum(dy, 0.0) ** 2
        depth = np.minimum(-dx, -dy)
        out.append(np.where((dx < 0) & (dy < 0), -(depth**2), outside))
    return np.stack(out, axis=-1).min(axis=(-1, -2))


def obstacle_clearance_sq(state: VehicleState, obstacles: Sequence[RectObstacle], params: VehicleParams) -> float:
    """Minimum squared distance from axle centers and joint to any obstacle."""
    x = state.as_array()
    if state.frame is Frame.FRONT:
        x = front_to_rear_array(x, params)
    return float(clearance_sq_array(x, obstacles, params))


class _LegNlp:
    """Multiple-shooting transcription of one planning leg."""

    def __init__(self, scenario: Scenario, x0, xf, u0, uf, cfg: PlannerConfig):
        self.sc = scenario
        self.p = scenario.params
        self.cfg = cfg
        self.n = scenario.n_plan
        self.ts = scenario.ts
        self.x0 = np.asarray(x0, float)
        self.xf = np.asarray(xf, float)
        self.u0 = np.asarray(u0, float)
        self.uf = np.asarray(uf, float)
        n = self.n
        self.nx_tot = NX * (n + 1)
        self.nz = self.nx_tot + NU * n

        wr = cfg.r.T @ cfg.r
        wd = cfg.r_d.T @ cfg.r_d
        diff = np.eye(NU * n) - np.eye(NU * n, k=-NU)
        wr_bar = np.kron(np.eye(n), wr)
        wd_bar = np.kron(np.eye(n), wd)
        self._diff = diff
        self._wr_bar = wr_bar
        self._wd_bar = wd_bar
        e = np.zeros(NU * n)
        e[:NU] = self.u0
        self._e = e
        hess = np.zeros((self.nz, self.nz))
        hess[self.nx_tot :, self.nx_tot :] = 2.0 * (wr_bar + diff.T @ wd_bar @ diff)
        self.hess = hess
        self.r_safe_sq = (scenario.d_safe + cfg.clearance_margin) ** 2

    def split(self, z):
        return z[: self.nx_tot].reshape(self.n + 1, NX), z[self.nx_tot :].reshape(self.n, NU)

    def objective(self, z):
        u = z[self.nx_tot :]
        du = self._diff @ u - self._e
        f = float(u @ self._wr_bar @ u + du @ self._wd_bar @ du)
        g = np.zeros(self.nz)
        g[self.nx_tot :] = 2.0 * (self._wr_bar @ u + self._diff.T @ (self._wd_bar @ du))
        return f, g

    def dynamics(self, z):
        xs, us = self.split(z)
        n = self.n
        c = (xs[1:] - euler(xs[:-1], us, self.p, self.ts)).ravel()
        jx, ju = jacobians(xs[:-1], us, self.p)
        jac = np.zeros((NX * n, self.nz))
        eye = np.eye(NX)
        for i in range(n):
            r = slice(NX * i, NX * i + NX)
            jac[r, NX * i : NX * i + NX] = -eye - self.ts * jx[i]
            jac[r, NX * (i + 1) : NX * (i + 1) + NX] = eye
            jac[r, self.nx_tot + NU * i : self.nx_tot + NU * i + NU] = -self.ts * ju[i]
        return c, jac

    def clearance(self, z):
        xs, _ = self.split(z)
        obs = self.sc.obstacles
        c = self.r_safe_sq - _signed_clearance_sq(xs, obs, self.p)
        h = self.cfg.fd_step
        grads = np.empty((self.n + 1, NX))
        for j in range(NX):
            xp = xs.copy()
            xm = xs.copy()
            xp[:, j] += h
            xm[:, j] -= h
            grads[:, j] = -(_signed_clearance_sq(xp, obs, self.p) - _signed_clearance_sq(xm, obs, self.p)) / (2 * h)
        jac = np.zeros((self.n + 1, self.nz))
        for i in range(self.n + 1):
            jac[i, NX * i : NX * i + NX] = grads[i]
        return c, jac

    def bounds(self):
        p = self.p
        n = self.n
        tol = self.cfg.terminal_tol_internal
        g_max = p.gamma_max - self.cfg.gamma_margin
        xl = np.tile([-np.inf, -np.inf, -np.inf, -g_max], (n + 1, 1))
        xu = np.tile([np.inf, np.inf, np.inf, g_max], (n + 1, 1))
        xl[0] = xu[0] = self.x0
        xl[n] = self.xf - tol
        xu[n] = self.xf + tol
        xl[n, 3] = max(xl[n, 3], -g_max)
        xu[n, 3] = min(xu[n, 3], g_max)
        ul = np.tile(p.u_lower, (n, 1))
        uu = np.tile(p.u_upper, (n, 1))
        ul[0] = uu[0] = self.u0
        ul[n - 1] = uu[n - 1] = self.uf
        return np.concatenate([xl.ravel(), ul.ravel()]), np.concatenate([xu.ravel(), uu.ravel()])

    def initial_guess(self):
        s = np.linspace(0.0, 1.0, self.n + 1)[:, None]
        xs = (1 - s) * self.x0 + s * self.xf
        us = np.zeros((self.n, NU))
        return np.concatenate([xs.ravel(), us.ravel()])

    def problem(self, z0=None) -> NlpProblem:
        lb, ub = self.bounds()
        return NlpProblem(
            objective=self.objective,
            z0=self.initial_guess() if z0 is None else z0,
            eq_constraints=self.dynamics,
            ineq_constraints=self.clearance if self.sc.obstacles else None,
            lower=lb,
            upper=ub,
            hessian=lambda z, ye, yi: self.hess,
        )


def rollout(x0, inputs, params: VehicleParams, ts: float) -> np.ndarray:
    xs = np.empty((len(inputs) + 1, NX))
    xs[0] = x0
    for i, u in enumerate(inputs):
        xs[i + 1] = euler(xs[i], u, params, ts)
    return xs


def plan_segment(
    scenario: Scenario,
    x0: VehicleState,
    xf: VehicleState,
    u0: ControlInput = ControlInput(0.0, 0.0),
    uf: ControlInput = ControlInput(0.0, 0.0),
    config: Optional[PlannerConfig] = None,
    leg: int = 1,
) -> Trajectory:
    """Plan one leg from ``x0`` to ``xf`` (rear-frame poses)."""
    cfg = config or PlannerConfig()
    p = scenario.params
    for name, st in (("x0", x0), ("xf", xf)):
        if st.frame is not Frame.REAR:
            raise ValueError(f"{name} must be given in the REAR frame")
        if abs(st.gamma) > p.gamma_max:
            raise ValueError(f"{name} articulation {st.gamma} exceeds gamma_max")
    nlp = _LegNlp(scenario, x0.as_array(), xf.as_array(), u0.as_array(), uf.as_array(), cfg)
    sol = SqpSolver(cfg.sqp).solve(nlp.problem())
    xs_opt, us = nlp.split(sol.z)
    # close the shooting defects exactly so the inputs replay the states
    xs = rollout(nlp.x0, us, p, scenario.ts)
    inputs = np.vstack([us, nlp.uf])
    traj = Trajectory(ts=scenario.ts, states=xs, inputs=inputs, leg=leg)
    if sol.status is not SqpStatus.CONVERGED:
        raise PlannerInfeasible(
            f"planner did not converge ({sol.status.value}, violation {sol.constraint_violation:.3g}, "
            f"{sol.iterations} iterations)",
            best=traj,
            solution=sol,
        )
    log.info("leg %d planned in %d SQP iterations, cost %.4f", leg, sol.iterations, sol.objective)
    return traj


def plan_cycle(scenario: Scenario, config: Optional[PlannerConfig] = None):
    """Plan pile -> truck and truck -> pile, both starting and ending at rest.

    The second leg starts from the state where the first one actually ends
    (within the terminal tolerance of the unloading pose), so the cycle is
    continuous.
    """
    rest = ControlInput(0.0, 0.0)
    leg1 = plan_segment(scenario, scenario.loading_pose, scenario.unloading_pose, rest, rest, config, leg=1)
    turn = VehicleState.from_array(leg1.states[-1], Frame.REAR)
    leg2 = plan_segment(scenario, turn, scenario.loading_pose, rest, rest, config, leg=2)
    return leg1, leg2


def audit(traj: Trajectory, scenario: Scenario, x0=None, xf=None) -> dict:
    """Post-hoc constraint audit of a planned leg."""
    p = scenario.params
    clear = clearance_sq_array(traj.states, scenario.obstacles, p)
    replay = rollout(traj.states[0], traj.inputs[:-1], p, traj.ts)
    out = {
        "max_abs_gamma": float(np.max(np.abs(traj.states[:, 3]))),
        "min_clearance": float(np.sqrt(np.min(clear))),
        "max_abs_v": float(np.max(np.abs(traj.inputs[:, 0]))),
        "max_abs_gamma_rate": float(np.max(np.abs(traj.inputs[:, 1]))),
        "replay_error": float(np.max(np.abs(replay - traj.states))),
        "switches": len(traj.switches),
    }
    if x0 is not None:
        out["initial_error"] = float(np.max(np.abs(traj.states[0] - np.asarray(x0, float))))
    if xf is not None:
        out["terminal_error"] = float(np.max(np.abs(traj.states[-1] - np.asarray(xf, float))))
    return out
