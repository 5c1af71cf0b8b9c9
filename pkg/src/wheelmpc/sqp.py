"""Line-search SQP for smooth nonlinear programs.

Problem form::

    min f(z)  s.t.  c_eq(z) = 0,  c_in(z) <= 0,  lower <= z <= upper

Each iteration solves a convex QP subproblem (see :mod:`wheelmpc.qp`) and
globalizes with a backtracking line search on the l1 merit function
``f + nu * (|c_eq|_1 + |max(c_in, 0)|_1)``. The Hessian model is either a
user callback (exact or Gauss-Newton) or a Powell-damped BFGS matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .qp import QpConfig, QpProblem, QpSolver, QpStatus

log = logging.getLogger(__name__)


class SqpStatus(str, Enum):
    CONVERGED = "CONVERGED"
    MAX_ITER = "MAX_ITER"
    QP_FAILED = "QP_FAILED"
    LINE_SEARCH_FAILED = "LINE_SEARCH_FAILED"


@dataclass
class NlpProblem:
    """Callbacks return ``(value, gradient)`` and ``(values, jacobian)``.

    ``hessian(z, y_eq, y_in)`` is optional; without it damped BFGS is used.
    """

    objective: Callable
    z0: np.ndarray
    eq_constraints: Optional[Callable] = None
    ineq_constraints: Optional[Callable] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    hessian: Optional[Callable] = None

    def __post_init__(self):
        self.z0 = np.asarray(self.z0, dtype=float).ravel()
        if not np.all(np.isfinite(self.z0)):
            raise ValueError("z0 must be finite")
        n = self.z0.size
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)


@dataclass
class NlpSolution:
    z: np.ndarray
    objective: float
    status: SqpStatus
    constraint_violation: float
    iterations: int
    y_eq: np.ndarray = field(default=None, repr=False)
    y_in: np.ndarray = field(default=None, repr=False)
    # (merit before, merit after, penalty) for every accepted step
    merit_history: list = field(default_factory=list, repr=False)


@dataclass
class SqpConfig:
    tol_feas: float = 1e-5
    tol_step: float = 1e-6
    max_iter: int = 200
    armijo: float = 1e-4
    min_alpha: float = 1e-10
    elastic_penalty: float = 1e4
    check_derivatives: bool = False
    qp: QpConfig = field(default_factory=QpConfig)


def _empty(n):
    return np.zeros(0), np.zeros((0, n))


class SqpSolver:
    def __init__(self, config: Optional[SqpConfig] = None):
        self.config = config or SqpConfig()
        self._qp = QpSolver(self.config.qp)

    def solve(self, problem: NlpProblem) -> NlpSolution:
        cfg = self.config
        pr = problem
        n = pr.z0.size
        lb, ub = pr.lower, pr.upper
        z = np.clip(pr.z0, lb, ub)
        if cfg.check_derivatives:
            _check_derivatives(pr, z)

        def evaluate(zz):
            f, gf = pr.objective(zz)
            ce, je = pr.eq_constraints(zz) if pr.eq_constraints else _empty(n)
            ci, ji = pr.ineq_constraints(zz) if pr.ineq_constraints else _empty(n)
            return float(f), np.asarray(gf, float), np.asarray(ce, float), np.atleast_2d(je), np.asarray(ci, float), np.atleast_2d(ji)

        f, gf, ce, je, ci, ji = evaluate(z)
        je = je.reshape(ce.size, n)
        ji = ji.reshape(ci.size, n)
        y_eq = np.zeros(ce.size)
        y_in = np.zeros(ci.size)
        bfgs = None if pr.hessian else np.eye(n)
        nu = 1.0
        history = []
        finite_lb = np.isfinite(lb)
        finite_ub = np.isfinite(ub)
        bound_rows = np.flatnonzero(finite_lb | finite_ub)
        best = None
        status = SqpStatus.MAX_ITER
        it = 0

        for it in range(cfg.max_iter + 1):
            viol = _violation(ce, ci)
            if best is None or (viol, f) < best[0]:
                best = ((viol, f), z.copy(), f, y_eq.copy(), y_in.copy())

            b = pr.hessian(z, y_eq, y_in) if pr.hessian else bfgs
            c_rows = np.vstack([ji, np.eye(n)[bound_rows]])
            lower = np.concatenate([np.full(ci.size, -np.inf), (lb - z)[bound_rows]])
            upper = np.concatenate([-ci, (ub - z)[bound_rows]])
            qp = QpProblem(h=b, g=gf, a_eq=je, b_eq=-ce, c_in=c_rows, lower=lower, upper=upper)
            sol = self._qp.solve(qp)
            elastic = False
            if sol.status is not QpStatus.OPTIMAL:
                sol = self._elastic(qp, ce.size, ci.size, max(nu, cfg.elastic_penalty))
                elastic = True
                if sol is None:
                    status = SqpStatus.QP_FAILED
                    break
            d = sol.z
            qy_eq = sol.y_eq
            qy_in = sol.y_in[: ci.size]

            if np.max(np.abs(d), initial=0.0) <= cfg.tol_step and viol <= cfg.tol_feas:
                y_eq, y_in = qy_eq, qy_in
                status = SqpStatus.CONVERGED
                break
            if it == cfg.max_iter:
                break

            mult = max(np.max(np.abs(qy_eq), initial=0.0), np.max(np.abs(qy_in), initial=0.0))
            if nu < mult * 1.1 + 1e-6:
                nu = mult * 1.5 + 1e-3
            phi0 = f + nu * _l1(ce, ci)
            dphi = float(gf @ d) - nu * _l1(ce, ci)
            if elastic:
                lin = _l1(ce + je @ d, ci + ji @ d)
                dphi = float(gf @ d) + nu * (lin - _l1(ce, ci))

            alpha = 1.0
            accepted = False
            while alpha >= cfg.min_alpha:
                zt = np.clip(z + alpha * d, lb, ub)
                ft, gt, cet, jet, cit, jit = evaluate(zt)
                phit = ft + nu * _l1(cet, cit)
                if phit <= phi0 + cfg.armijo * alpha * min(dphi, 0.0):
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                log.debug("SQP line search stalled at iteration %d", it)
                status = SqpStatus.LINE_SEARCH_FAILED
                break
            history.append((phi0, phit, nu))

            if bfgs is not None:
                grad_l_old = gf + je.T @ qy_eq + ji.T @ qy_in
                grad_l_new = gt + jet.reshape(cet.size, n).T @ qy_eq + jit.reshape(cit.size, n).T @ qy_in
                bfgs = _damped_bfgs(bfgs, zt - z, grad_l_new - grad_l_old)

            z, f, gf, ce, ci = zt, ft, gt, cet, cit
            je = jet.reshape(ce.size, n)
            ji = jit.reshape(ci.size, n)
            y_eq, y_in = qy_eq, qy_in

        viol = _violation(ce, ci)
        if status is not SqpStatus.CONVERGED and best is not None and best[0] < (viol, f):
            _, z, f, y_eq, y_in = best
            ce = pr.eq_constraints(z)[0] if pr.eq_constraints else np.zeros(0)
            ci = pr.ineq_constraints(z)[0] if pr.ineq_constraints else np.zeros(0)
            viol = _violation(ce, ci)
        return NlpSolution(
            z=z,
            objective=f,
            status=status,
            constraint_violation=viol,
            iterations=it,
            y_eq=y_eq,
            y_in=y_in,
            merit_history=history,
        )

    def _elastic(self, qp: QpProblem, me: int, mi: int, penalty: float):
        """l1-relaxed subproblem: slacks on the linearized nonlinear rows only."""
        n = qp.n
        ns = 2 * me + mi
        h = np.zeros((n + ns, n + ns))
        h[:n, :n] = qp.h
        h[n:, n:] = 1e-8 * np.eye(ns)
        g = np.concatenate([qp.g, np.full(ns, penalty)])
        a = np.hstack([qp.a_eq, np.eye(me), -np.eye(me), np.zeros((me, mi))])
        c = np.hstack([qp.c_in, np.zeros((qp.c_in.shape[0], ns))])
        c[:mi, n + 2 * me :] = -np.eye(mi)
        c = np.vstack([c, np.hstack([np.zeros((ns, n)), np.eye(ns)])])
        lower = np.concatenate([qp.lower, np.zeros(ns)])
        upper = np.concatenate([qp.upper, np.full(ns, np.inf)])
        sol = self._qp.solve(QpProblem(h, g, a, qp.b_eq, c, lower, upper))
        if sol.status is not QpStatus.OPTIMAL:
            return None
        sol.z = sol.z[:n]
        sol.y_in = sol.y_in[: qp.c_in.shape[0]]
        return sol


def _l1(ce, ci) -> float:
    return float(np.sum(np.abs(ce)) + np.sum(np.maximum(ci, 0.0)))


def _violation(ce, ci) -> float:
    return float(max(np.max(np.abs(ce), initial=0.0), np.max(ci, initial=0.0), 0.0))


def _damped_bfgs(b, s, y):
    bs = b @ s
    sbs = float(s @ bs)
    if sbs <= 1e-14:
        return b
    sy = float(s @ y)
    if sy < 0.2 * sbs:
        theta = 0.8 * sbs / (sbs - sy)
        y = theta * y + (1 - theta) * bs
        sy = float(s @ y)
    return b - np.outer(bs, bs) / sbs + np.outer(y, y) / sy


def finite_difference_jacobian(fun, z, h=1e-6):
    """Central differences of a vector function; returns ``(m, n)``."""
    z = np.asarray(z, dtype=float)
    f0 = np.atleast_1d(fun(z))
    jac = np.empty((f0.size, z.size))
    for j in range(z.size):
        e = np.zeros_like(z)
        e[j] = h
        jac[:, j] = (np.atleast_1d(fun(z + e)) - np.atleast_1d(fun(z - e))) / (2 * h)
    return jac


def _check_derivatives(pr: NlpProblem, z, tol=1e-4):
    fd = finite_difference_jacobian(lambda zz: pr.objective(zz)[0], z)
    err = np.max(np.abs(fd.ravel() - pr.objective(z)[1]), initial=0.0)
    if err > tol:
        log.warning("objective gradient differs from finite differences by %.3g", err)
    for name, cb in (("equality", pr.eq_constraints), ("inequality", pr.ineq_constraints)):
        if cb is None:
            continue
        fd = finite_difference_jacobian(lambda zz: cb(zz)[0], z)
        err = np.max(np.abs(fd - np.atleast_2d(cb(z)[1])), initial=0.0)
        if err > tol:
            log.warning("%s Jacobian differs from finite differences by %.3g", name, err)


def sqp_solve(problem: NlpProblem, config: Optional[SqpConfig] = None) -> NlpSolution:
    return SqpSolver(config).solve(problem)
