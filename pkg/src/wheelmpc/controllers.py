"""Receding-horizon tracking controllers.

All three controllers minimize the same quadratic tracking cost

    x_e(N)' Qf x_e(N) + sum_i x_e(i)' Q x_e(i) + u_e(i)' R u_e(i)

and differ only in the prediction model:

* LPV-MPC: deviation dynamics scheduled along the nominal trajectory.
* LTI-MPC: one linearization at the measured state and current nominal input,
  frozen over the horizon.
* NL-MPC: the full nonlinear Euler model, solved by SQP.

The position part of ``x_e`` is measured at the front axle while driving
forward and at the rear axle while reversing.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .lpv import embed_horizon_arrays
from .qp import QpConfig, QpProblem, QpSolver, QpStatus
from .sqp import NlpProblem, SqpConfig, SqpSolver, SqpStatus
from .trajectory import Trajectory, select_frame
from .vehicle import NU, NX, ControlInput, Frame, VehicleParams, VehicleState, euler, jacobians, to_frame

log = logging.getLogger(__name__)

__all__ = [
    "ControllerKind",
    "TrackingWeights",
    "DeviationBounds",
    "ControllerOutput",
    "ControllerError",
    "select_frame",
    "nearest_index",
    "lpv_mpc_step",
    "lti_mpc_step",
    "nl_mpc_step",
    "make_controller",
]

SLACK_PENALTY = 1e6


class ControllerKind(str, Enum):
    LPV = "lpv"
    LTI = "lti"
    NL = "nl"


@dataclass
class TrackingWeights:
    q: np.ndarray = field(default_factory=lambda: 8.0 * np.diag([4.0, 4.0, 3.0, 2.0]))
    q_f: np.ndarray = None
    r: np.ndarray = field(default_factory=lambda: np.diag([0.1, 0.5]))
    n: int = 10
    ts: float = 0.2

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float)
        self.r = np.asarray(self.r, dtype=float)
        self.q_f = 10.0 * self.q if self.q_f is None else np.asarray(self.q_f, dtype=float)
        for name in ("q", "q_f", "r"):
            m = getattr(self, name)
            if not np.allclose(m, m.T):
                raise ValueError(f"{name} must be symmetric")
            if np.min(np.linalg.eigvalsh(m)) < -1e-12:
                raise ValueError(f"{name} must be positive semidefinite")
        if np.min(np.linalg.eigvalsh(self.r)) <= 0:
            raise ValueError("r must be positive definite")
        if self.n < 1:
            raise ValueError(f"horizon n must be >= 1, got {self.n}")
        if not self.ts > 0:
            raise ValueError(f"ts must be > 0, got {self.ts}")


@dataclass
class DeviationBounds:
    """Symmetric box on the tracking error ``(pos, pos, heading, articulation)``."""

    state_box: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 0.5, 0.3]))

    def __post_init__(self):
        self.state_box = np.asarray(self.state_box, dtype=float).reshape(NX)
        if np.any(self.state_box <= 0):
            raise ValueError("state_box entries must be positive")


@dataclass
class ControllerOutput:
    input: ControlInput
    predicted_error: np.ndarray
    solve_time: float
    status: str
    frame: Frame
    index: int
    u_e: np.ndarray = None
    # full NLP iterate (NL-MPC only), reused as the next warm start
    solution: np.ndarray = field(default=None, repr=False)


class ControllerError(RuntimeError):
    def __init__(self, message, status=None, diagnostics=None):
        super().__init__(message)
        self.status = status
        self.diagnostics = diagnostics or {}


def nearest_index(trajectory: Trajectory, position, frame: Frame, window_hint: int, params: VehicleParams,
                  window: int = 5, previous: Optional[int] = None) -> int:
    """Closest trajectory sample (same-frame position) near ``window_hint``.

    The search covers ``window_hint +- window`` and never returns an index
    below ``previous``. Ties go to the larger index.
    """
    pts = trajectory.states_in(frame, params)[:, :2]
    last = len(trajectory) - 1
    lo = max(0, window_hint - window)
    if previous is not None:
        lo = max(lo, previous)
    lo = min(lo, last)
    hi = min(last, max(window_hint + window, lo))
    seg = pts[lo : hi + 1]
    d = np.sum((seg - np.asarray(position, dtype=float)[:2]) ** 2, axis=1)
    # last occurrence of the minimum
    return int(lo + len(d) - 1 - np.argmin(d[::-1]))


def _window(trajectory: Trajectory, k: int, n: int):
    idx = np.minimum(np.arange(k, k + n + 1), len(trajectory) - 1)
    return idx


def condense(a_seq, b_seq, x_e0, weights: TrackingWeights):
    """Eliminate predicted deviations; returns ``(H, g, Sx, Su)``.

    ``x_e(1..N) = Sx x_e0 + Su U`` stacked row-wise.
    """
    n = len(a_seq)
    sx = np.zeros((NX * n, NX))
    su = np.zeros((NX * n, NU * n))
    phi = np.eye(NX)
    prev = np.zeros((NX, NU * n))
    for i in range(n):
        phi = a_seq[i] @ phi
        cur = a_seq[i] @ prev
        cur[:, NU * i : NU * i + NU] = b_seq[i]
        sx[NX * i : NX * i + NX] = phi
        su[NX * i : NX * i + NX] = cur
        prev = cur
    qbar = np.kron(np.eye(n), weights.q)
    qbar[-NX:, -NX:] = weights.q_f
    rbar = np.kron(np.eye(n), weights.r)
    qsu = qbar @ su
    h = 2.0 * (su.T @ qsu + rbar)
    g = 2.0 * qsu.T @ (sx @ x_e0)
    return h, g, sx, su


def _tracking_qp(a_seq, b_seq, x_e0, u_nom, gamma_nom, weights, bounds, params, solver: QpSolver):
    """Condensed deviation QP with one slack retry on the state box."""
    n = len(a_seq)
    h, g, sx, su = condense(a_seq, b_seq, x_e0, weights)
    u_lo = (params.u_lower - u_nom).ravel()
    u_hi = (params.u_upper - u_nom).ravel()
    box = np.tile(bounds.state_box, (n, 1))
    x_lo = -box.copy()
    x_hi = box.copy()
    x_lo[:, 3] = np.maximum(x_lo[:, 3], -params.gamma_max - gamma_nom)
    x_hi[:, 3] = np.minimum(x_hi[:, 3], params.gamma_max - gamma_nom)
    free = sx @ x_e0
    x_lo = x_lo.ravel() - free
    x_hi = x_hi.ravel() - free
    nu_tot = NU * n
    prob = QpProblem(
        h=h,
        g=g,
        c_in=np.vstack([np.eye(nu_tot), su]),
        lower=np.concatenate([u_lo, x_lo]),
        upper=np.concatenate([u_hi, x_hi]),
    )
    sol = solver.solve(prob)
    if sol.status is QpStatus.OPTIMAL:
        return sol.z, "OPTIMAL", su, sx
    ns = NX * n
    hs = np.zeros((nu_tot + ns, nu_tot + ns))
    hs[:nu_tot, :nu_tot] = h
    hs[nu_tot:, nu_tot:] = 1e-6 * np.eye(ns)
    gs = np.concatenate([g, np.full(ns, SLACK_PENALTY)])
    c = np.zeros((nu_tot + 2 * ns + ns, nu_tot + ns))
    c[:nu_tot, :nu_tot] = np.eye(nu_tot)
    c[nu_tot : nu_tot + ns, :nu_tot] = su
    c[nu_tot : nu_tot + ns, nu_tot:] = -np.eye(ns)
    c[nu_tot + ns : nu_tot + 2 * ns, :nu_tot] = su
    c[nu_tot + ns : nu_tot + 2 * ns, nu_tot:] = np.eye(ns)
    c[nu_tot + 2 * ns :, nu_tot:] = np.eye(ns)
    lower = np.concatenate([u_lo, np.full(ns, -np.inf), x_lo, np.zeros(ns)])
    upper = np.concatenate([u_hi, x_hi, np.full(ns, np.inf), np.full(ns, np.inf)])
    sol = solver.solve(QpProblem(hs, gs, c_in=c, lower=lower, upper=upper))
    if sol.status is QpStatus.OPTIMAL:
        return sol.z[:nu_tot], "SLACK", su, sx
    raise ControllerError(
        f"tracking QP infeasible after slack retry ({sol.status.value})",
        status=sol.status.value,
        diagnostics={"x_e0": x_e0.tolist(), "kkt_residual": sol.kkt_residual},
    )


def _deviation_setup(measured: VehicleState, trajectory: Trajectory, index: int, weights, params):
    frame = measured.frame
    nominal = trajectory.states_in(frame, params)
    idx = _window(trajectory, index, weights.n)
    x_e0 = measured.as_array() - nominal[idx[0]]
    u_nom = trajectory.inputs[idx[:-1]]
    gamma_nom = trajectory.states[idx[1:], 3]
    return frame, idx, x_e0, u_nom, gamma_nom


def _linear_step(measured, trajectory, index, weights, bounds, params, a_seq, b_seq, solver):
    frame, idx, x_e0, u_nom, gamma_nom = _deviation_setup(measured, trajectory, index, weights, params)
    t0 = time.perf_counter()
    u_e, status, su, sx = _tracking_qp(a_seq, b_seq, x_e0, u_nom, gamma_nom, weights, bounds, params, solver)
    solve_time = time.perf_counter() - t0
    pred = np.vstack([x_e0, (sx @ x_e0 + su @ u_e).reshape(-1, NX)])
    u_e = u_e.reshape(-1, NU)
    return ControllerOutput(
        input=ControlInput.from_array(u_nom[0] + u_e[0]),
        predicted_error=pred,
        solve_time=solve_time,
        status=status,
        frame=frame,
        index=index,
        u_e=u_e,
    )


def lpv_mpc_step(measured: VehicleState, trajectory: Trajectory, index: int, weights: TrackingWeights,
                 bounds: DeviationBounds, params: VehicleParams, solver: Optional[QpSolver] = None) -> ControllerOutput:
    """One LPV-MPC step; ``measured`` must already be in the controller frame."""
    solver = solver or QpSolver()
    a_seq, b_seq = embed_horizon_arrays(trajectory, index, weights.n, params, weights.ts, measured.frame)
    return _linear_step(measured, trajectory, index, weights, bounds, params, a_seq, b_seq, solver)


def lti_mpc_step(measured: VehicleState, trajectory: Trajectory, index: int, weights: TrackingWeights,
                 bounds: DeviationBounds, params: VehicleParams, solver: Optional[QpSolver] = None) -> ControllerOutput:
    """One adaptive LTI-MPC step (model frozen at the current operating point)."""
    solver = solver or QpSolver()
    k = min(index, len(trajectory) - 1)
    jx, ju = jacobians(measured.as_array(), trajectory.inputs[k], params, measured.frame)
    a = np.eye(NX) + weights.ts * jx
    b = weights.ts * ju
    a_seq = np.repeat(a[None], weights.n, axis=0)
    b_seq = np.repeat(b[None], weights.n, axis=0)
    return _linear_step(measured, trajectory, index, weights, bounds, params, a_seq, b_seq, solver)


class _TrackingNlp:
    """Multiple-shooting tracking NLP over ``x(1..N)`` and ``u(0..N-1)``.

    Prediction uses the rear-axle Euler model (the planner's model); the cost
    penalizes deviations expressed in the controller frame.
    """

    def __init__(self, x0_rear, x_nom_rear, u_nom, frame, weights: TrackingWeights, params: VehicleParams):
        self.n = weights.n
        self.frame = Frame(frame)
        self.p = params
        self.w = weights
        self.x0 = np.asarray(x0_rear, float)
        self.x_nom = to_frame(x_nom_rear[1:], Frame.REAR, self.frame, params)
        self.u_nom = np.asarray(u_nom, float)
        n = self.n
        self.nxs = NX * n
        self.nz = self.nxs + NU * n
        wq = np.repeat(weights.q[None], n, axis=0)
        wq[-1] = weights.q_f
        self.wq = wq

    def split(self, z):
        return z[: self.nxs].reshape(self.n, NX), z[self.nxs :].reshape(self.n, NU)

    def _frame_map(self, xs):
        """Frame-converted states and their Jacobians ``(n, 4, 4)``."""
        y = to_frame(xs, Frame.REAR, self.frame, self.p)
        jac = np.repeat(np.eye(NX)[None], len(xs), axis=0)
        if self.frame is Frame.FRONT:
            th, ga = xs[:, 2], xs[:, 3]
            lr, lf = self.p.l_rear, self.p.l_front
            jac[:, 0, 2] = -lr * np.sin(th) - lf * np.sin(th + ga)
            jac[:, 0, 3] = -lf * np.sin(th + ga)
            jac[:, 1, 2] = lr * np.cos(th) + lf * np.cos(th + ga)
            jac[:, 1, 3] = lf * np.cos(th + ga)
        return y, jac

    def objective(self, z):
        xs, us = self.split(z)
        y, jm = self._frame_map(xs)
        ex = y - self.x_nom
        eu = us - self.u_nom
        wex = np.einsum("nij,nj->ni", self.wq, ex)
        f = float(np.sum(ex * wex) + np.sum(eu * (eu @ self.w.r.T)))
        g = np.empty(self.nz)
        g[: self.nxs] = 2.0 * np.einsum("nji,nj->ni", jm, wex).ravel()
        g[self.nxs :] = 2.0 * (eu @ self.w.r).ravel()
        return f, g

    def hessian(self, z, y_eq=None, y_in=None):
        """Lagrangian Hessian, shifted until it is positive definite on the
        null space of the linearized dynamics.

        The dynamics curvature is a central difference of ``J(w)' y`` per
        stage; the frame-map curvature is analytic.
        """
        xs, us = self.split(z)
        y, jm = self._frame_map(xs)
        wex = np.einsum("nij,nj->ni", self.wq, y - self.x_nom)
        n, nxs = self.n, self.nxs
        h = np.zeros((self.nz, self.nz))
        blocks = 2.0 * np.einsum("nki,nkl,nlj->nij", jm, self.wq, jm)
        if self.frame is Frame.FRONT:
            lr, lf = self.p.l_rear, self.p.l_front
            th, ga = xs[:, 2], xs[:, 3]
            c1, c2 = np.cos(th), np.cos(th + ga)
            s1, s2 = np.sin(th), np.sin(th + ga)
            # d2(front position)/d(theta, gamma)^2 contracted with the residual
            wx, wy = 2.0 * wex[:, 0], 2.0 * wex[:, 1]
            blocks[:, 2, 2] += -wx * (lr * c1 + lf * c2) - wy * (lr * s1 + lf * s2)
            off = -wx * lf * c2 - wy * lf * s2
            blocks[:, 2, 3] += off
            blocks[:, 3, 2] += off
            blocks[:, 3, 3] += off
        for i in range(n):
            h[NX * i : NX * i + NX, NX * i : NX * i + NX] = blocks[i]
        h[nxs:, nxs:] = np.kron(np.eye(n), 2.0 * self.w.r)
        if y_eq is not None and np.any(y_eq):
            lam = np.asarray(y_eq, float).reshape(n, NX)
            prev = np.vstack([self.x0, xs[:-1]])
            w = np.hstack([prev, us])
            step = 1e-6
            curv = np.zeros((n, NX + NU, NX + NU))
            for j in range(NX + NU):
                dw = np.zeros(NX + NU)
                dw[j] = step
                jp = np.concatenate(jacobians((w + dw)[:, :NX], (w + dw)[:, NX:], self.p), axis=2)
                jn = np.concatenate(jacobians((w - dw)[:, :NX], (w - dw)[:, NX:], self.p), axis=2)
                curv[:, :, j] = np.einsum("nkj,nk->nj", jp - jn, lam) / (2 * step)
            curv = -self.w.ts * 0.5 * (curv + curv.transpose(0, 2, 1))
            for i in range(n):
                cols = np.r_[np.arange(NX * (i - 1), NX * i) if i > 0 else np.zeros(0, int),
                             np.arange(nxs + NU * i, nxs + NU * i + NU)]
                blk = curv[i] if i > 0 else curv[i][NX:, NX:]
                h[np.ix_(cols, cols)] += blk
        h = 0.5 * (h + h.T)
        return self._convexify(h, z)

    def _convexify(self, h, z):
        """Make ``h`` positive definite on the null space of the dynamics.

        Curvature is first added on variables resting on a bound (a Newton
        step leaves those unchanged while they stay active) and only then on
        every coordinate.
        """
        nxs, n = self.nxs, self.n
        _, jac = self.dynamics(z)
        zmap = np.vstack([-np.linalg.solve(jac[:, :nxs], jac[:, nxs:]), np.eye(NU * n)])

        def min_eig(hh):
            return float(np.linalg.eigvalsh(zmap.T @ hh @ zmap)[0])

        scale = max(1.0, float(np.max(np.abs(np.diag(h)))))
        floor = 1e-8 * scale
        low = min_eig(h)
        if low >= floor:
            return h
        lb, ub = self.bounds()
        pinned = np.flatnonzero((z <= lb + 1e-9) | (z >= ub - 1e-9))
        if pinned.size:
            rho = floor - low
            for _ in range(6):
                trial = h.copy()
                trial[pinned, pinned] += rho
                if min_eig(trial) >= floor:
                    return trial
                rho *= 10.0
        return h + (floor - low) * np.eye(self.nz)
        reduced = np.linalg.eigvalsh(zmap.T @ h @ zmap)
        floor = 1e-8 * max(1.0, float(np.max(np.abs(reduced))))
        if reduced[0] < floor:
            h += (floor - reduced[0]) * np.eye(self.nz)
        return h

    def dynamics(self, z):
        xs, us = self.split(z)
        prev = np.vstack([self.x0, xs[:-1]])
        c = (xs - euler(prev, us, self.p, self.w.ts)).ravel()
        jx, ju = jacobians(prev, us, self.p)
        jac = np.zeros((self.nxs, self.nz))
        eye = np.eye(NX)
        ts = self.w.ts
        for i in range(self.n):
            r = slice(NX * i, NX * i + NX)
            jac[r, NX * i : NX * i + NX] = eye
            if i > 0:
                jac[r, NX * (i - 1) : NX * i] = -eye - ts * jx[i]
            jac[r, self.nxs + NU * i : self.nxs + NU * i + NU] = -ts * ju[i]
        return c, jac

    def merit(self, z, penalty):
        return self.objective(z)[0] + penalty * float(np.sum(np.abs(self.dynamics(z)[0])))

    def bounds(self):
        p = self.p
        n = self.n
        xl = np.tile([-np.inf, -np.inf, -np.inf, -p.gamma_max], (n, 1))
        xu = np.tile([np.inf, np.inf, np.inf, p.gamma_max], (n, 1))
        ul = np.tile(p.u_lower, (n, 1))
        uu = np.tile(p.u_upper, (n, 1))
        return np.concatenate([xl.ravel(), ul.ravel()]), np.concatenate([xu.ravel(), uu.ravel()])


def nl_mpc_step(measured: VehicleState, trajectory: Trajectory, index: int, weights: TrackingWeights,
                bounds: DeviationBounds, params: VehicleParams, solver: Optional[SqpSolver] = None,
                warm_start=None) -> ControllerOutput:
    """One nonlinear MPC step, warm-started from ``warm_start`` or the nominal window.

    Falls back to LPV-MPC when the SQP does not converge.
    """
    solver = solver or SqpSolver(SqpConfig(max_iter=50))
    frame = measured.frame
    idx = _window(trajectory, index, weights.n)
    x_nom = trajectory.states[idx]
    u_nom = trajectory.inputs[idx[:-1]]
    x0_rear = to_frame(measured.as_array(), frame, Frame.REAR, params)
    nlp = _TrackingNlp(x0_rear, x_nom, u_nom, frame, weights, params)
    z0 = np.concatenate([x_nom[1:].ravel(), u_nom.ravel()])
    if warm_start is not None and np.size(warm_start) == nlp.nz:
        # keep whichever start point has the lower l1 merit
        z_warm = np.asarray(warm_start, float)
        if nlp.merit(z_warm, solver.config.elastic_penalty) < nlp.merit(z0, solver.config.elastic_penalty):
            z0 = z_warm
    lb, ub = nlp.bounds()
    problem = NlpProblem(
        objective=nlp.objective,
        z0=z0,
        eq_constraints=nlp.dynamics,
        lower=lb,
        upper=ub,
        hessian=nlp.hessian,
    )
    t0 = time.perf_counter()
    sol = solver.solve(problem)
    solve_time = time.perf_counter() - t0
    if sol.status is not SqpStatus.CONVERGED:
        log.info("NL-MPC SQP %s at index %d; falling back to LPV-MPC", sol.status.value, index)
        out = lpv_mpc_step(measured, trajectory, index, weights, bounds, params)
        out.solve_time += solve_time
        out.status = "FALLBACK_LPV"
        return out
    xs, us = nlp.split(sol.z)
    xs_frame = to_frame(np.vstack([x0_rear, xs]), Frame.REAR, frame, params)
    nominal_frame = to_frame(x_nom, Frame.REAR, frame, params)
    out = ControllerOutput(
        input=ControlInput.from_array(us[0]),
        predicted_error=xs_frame - nominal_frame,
        solve_time=solve_time,
        status="OPTIMAL",
        frame=frame,
        index=index,
        u_e=us - u_nom,
        solution=sol.z,
    )
    return out


class Controller:
    """Stateful wrapper: owns the solver workspace, frame memory and warm start."""

    def __init__(self, kind, weights: TrackingWeights, bounds: DeviationBounds, params: VehicleParams):
        self.kind = ControllerKind(kind)
        self.weights = weights
        self.bounds = bounds
        self.params = params
        self.qp = QpSolver(QpConfig())
        self.sqp = SqpSolver(SqpConfig(max_iter=50))
        self._warm = None
        self._warm_key = None

    def reset(self):
        self._warm = None
        self._warm_key = None

    def step(self, measured: VehicleState, trajectory: Trajectory, index: int) -> ControllerOutput:
        if self.kind is ControllerKind.LPV:
            return lpv_mpc_step(measured, trajectory, index, self.weights, self.bounds, self.params, self.qp)
        if self.kind is ControllerKind.LTI:
            return lti_mpc_step(measured, trajectory, index, self.weights, self.bounds, self.params, self.qp)
        warm = None
        if self._warm is not None and self._warm_key == (id(trajectory), index - 1):
            warm = _shift(self._warm, self.weights.n)
        out = nl_mpc_step(measured, trajectory, index, self.weights, self.bounds, self.params, self.sqp, warm)
        sol = out.solution
        self._warm = sol
        self._warm_key = (id(trajectory), index) if sol is not None else None
        return out


def _shift(z, n):
    xs = z[: NX * n].reshape(n, NX)
    us = z[NX * n :].reshape(n, NU)
    xs = np.vstack([xs[1:], xs[-1:]])
    us = np.vstack([us[1:], us[-1:]])
    return np.concatenate([xs.ravel(), us.ravel()])


def make_controller(kind, weights=None, bounds=None, params=None) -> Controller:
    return Controller(kind, weights or TrackingWeights(), bounds or DeviationBounds(), params or VehicleParams())
