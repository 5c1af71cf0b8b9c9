"""Dense convex QP solver.

Solves::

    min  0.5 z'Hz + g'z
    s.t. A_eq z = b_eq
         lower <= C z <= upper

with a Mehrotra predictor-corrector interior-point method followed by an
active-set polish step that recovers the exact solution of the identified
active set. Two-sided rows with ``lower == upper`` are treated as equalities.
Large, mostly-zero KKT systems are factorized through SuperLU; everything else
goes through dense LU.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class QpStatus(str, Enum):
    OPTIMAL = "OPTIMAL"
    MAX_ITER = "MAX_ITER"
    INFEASIBLE = "INFEASIBLE"


@dataclass
class QpProblem:
    h: np.ndarray
    g: np.ndarray
    a_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    c_in: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        self.h = np.atleast_2d(np.asarray(self.h, dtype=float))
        self.g = np.atleast_1d(np.asarray(self.g, dtype=float))
        n = self.g.size
        if self.h.shape != (n, n):
            raise ValueError(f"h has shape {self.h.shape}, expected {(n, n)}")
        if self.a_eq is None:
            self.a_eq = np.zeros((0, n))
            self.b_eq = np.zeros(0)
        self.a_eq = np.asarray(self.a_eq, dtype=float).reshape(-1, n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        if self.a_eq.shape[0] != self.b_eq.size:
            raise ValueError("a_eq and b_eq row counts differ")
        if self.c_in is None:
            self.c_in = np.zeros((0, n))
        self.c_in = np.asarray(self.c_in, dtype=float).reshape(-1, n)
        m = self.c_in.shape[0]
        self.lower = np.full(m, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float).reshape(-1)
        self.upper = np.full(m, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float).reshape(-1)
        if self.lower.size != m or self.upper.size != m:
            raise ValueError("lower/upper must have one entry per c_in row")

    @property
    def n(self) -> int:
        return self.g.size

    def objective(self, z) -> float:
        return float(0.5 * z @ self.h @ z + self.g @ z)


@dataclass
class QpSolution:
    z: np.ndarray
    objective: float
    status: QpStatus
    kkt_residual: float
    iterations: int
    y_eq: np.ndarray = field(repr=False, default=None)
    # multiplier per c_in row, positive when the upper side is active,
    # negative when the lower side is
    y_in: np.ndarray = field(repr=False, default=None)


@dataclass
class QpConfig:
    tol_kkt: float = 1e-6
    max_iter: int = 4000
    polish: bool = True
    sparse_threshold: int = 300  # KKT size above which sparse factorization is tried


def kkt_residuals(problem: QpProblem, z, y_eq, y_in):
    """Stationarity, primal feasibility and complementarity (inf-norms).

    ``y_in`` uses the signed convention of :class:`QpSolution`.
    """
    p = problem
    stat = p.h @ z + p.g + p.a_eq.T @ y_eq + p.c_in.T @ y_in
    cz = p.c_in @ z
    feas = 0.0
    if p.a_eq.shape[0]:
        feas = float(np.max(np.abs(p.a_eq @ z - p.b_eq)))
    if cz.size:
        feas = max(feas, float(np.max(np.maximum(cz - p.upper, 0.0))), float(np.max(np.maximum(p.lower - cz, 0.0))))
    lam_u = np.maximum(y_in, 0.0)
    lam_l = np.maximum(-y_in, 0.0)
    with np.errstate(invalid="ignore"):
        cu = np.where(lam_u > 0, lam_u * np.abs(p.upper - cz), 0.0)
        cl = np.where(lam_l > 0, lam_l * np.abs(cz - p.lower), 0.0)
    comp = float(max(np.max(cu, initial=0.0), np.max(cl, initial=0.0)))
    return float(np.max(np.abs(stat), initial=0.0)), feas, comp


class _Kkt:
    """Factorization of [[M, A'], [A, -delta I]] with a dense or sparse backend."""

    def __init__(self, m_mat, a_eq, delta, use_sparse):
        n = m_mat.shape[0]
        me = a_eq.shape[0]
        self.n = n
        if use_sparse:
            k = sp.bmat([[m_mat, a_eq.T], [a_eq, -delta * sp.identity(me)]], format="csc")
            self._lu = spla.splu(k, permc_spec="COLAMD")
            self._solve = self._lu.solve
            self._mat = k
        else:
            k = np.zeros((n + me, n + me))
            k[:n, :n] = m_mat
            k[:n, n:] = a_eq.T
            k[n:, :n] = a_eq
            k[n:, n:] = -delta * np.eye(me)
            self._lu = sla.lu_factor(k, check_finite=False)
            self._solve = lambda r: sla.lu_solve(self._lu, r, check_finite=False)
            self._mat = k

    def solve(self, r1, r2, refine=1):
        rhs = np.concatenate([r1, r2])
        sol = self._solve(rhs)
        for _ in range(refine):
            sol = sol + self._solve(rhs - self._mat @ sol)
        return sol[: self.n], sol[self.n :]


class QpSolver:
    """Interior-point QP solver; one instance holds one workspace."""

    def __init__(self, config: Optional[QpConfig] = None):
        self.config = config or QpConfig()

    def solve(self, problem: QpProblem, z0=None) -> QpSolution:
        cfg = self.config
        p = problem
        n = p.n
        h = p.h
        asym = float(np.max(np.abs(h - h.T), initial=0.0))
        if asym > 1e-10:
            log.warning("QP cost matrix asymmetric by %.3g; symmetrizing", asym)
        h = 0.5 * (h + h.T)

        if np.any(p.lower > p.upper):
            return self._fail(p, np.zeros(n) if z0 is None else np.asarray(z0, float), QpStatus.INFEASIBLE, 0)

        # zero linear term: the origin is optimal whenever it is feasible
        if not np.any(p.g) and not np.any(p.b_eq) and np.all(p.lower <= 0.0) and np.all(p.upper >= 0.0):
            zero = np.zeros(n)
            return self._package(p, zero, np.zeros(p.a_eq.shape[0]), np.zeros(p.c_in.shape[0]), QpStatus.OPTIMAL, 0)

        # split c_in rows into equalities and one-sided inequalities g_mat z <= h_vec
        eq_rows = np.isfinite(p.lower) & (p.lower == p.upper)
        a_eq = np.vstack([p.a_eq, p.c_in[eq_rows]])
        b_eq = np.concatenate([p.b_eq, p.lower[eq_rows]])
        up_idx = np.flatnonzero(~eq_rows & np.isfinite(p.upper))
        lo_idx = np.flatnonzero(~eq_rows & np.isfinite(p.lower))
        g_mat = np.vstack([p.c_in[up_idx], -p.c_in[lo_idx]])
        h_vec = np.concatenate([p.upper[up_idx], -p.lower[lo_idx]])
        m = h_vec.size
        me = b_eq.size

        kkt_size = n + me
        density = (np.count_nonzero(h) + 2 * np.count_nonzero(a_eq) + np.count_nonzero(g_mat)) / max(kkt_size**2, 1)
        use_sparse = kkt_size > cfg.sparse_threshold and density < 0.05

        z = np.zeros(n) if z0 is None else np.array(z0, dtype=float)
        y = np.zeros(me)
        s = np.maximum(h_vec - g_mat @ z, 1.0)
        lam = np.ones(m)

        tol = 0.1 * cfg.tol_kkt
        delta_p, delta_d = 1e-10, 1e-10
        status = QpStatus.MAX_ITER
        it = 0
        best = None
        g_sp = sp.csr_matrix(g_mat) if use_sparse else None
        a_sp = sp.csc_matrix(a_eq) if use_sparse else None
        for it in range(1, cfg.max_iter + 1):
            r_d = h @ z + p.g + a_eq.T @ y + g_mat.T @ lam
            r_e = a_eq @ z - b_eq
            r_i = g_mat @ z + s - h_vec
            mu = float(s @ lam / m) if m else 0.0
            res = max(np.max(np.abs(r_d), initial=0.0), np.max(np.abs(r_e), initial=0.0), np.max(np.abs(r_i), initial=0.0))
            comp = float(np.max(s * lam, initial=0.0))
            score = max(res, comp)
            if best is None or score < best[0]:
                best = (score, z.copy(), y.copy(), lam.copy())
            if res <= tol and comp <= tol:
                status = QpStatus.OPTIMAL
                break
            if self._certificate(a_eq, b_eq, g_mat, h_vec, y, lam):
                status = QpStatus.INFEASIBLE
                break

            w = lam / s
            if not np.all(np.isfinite(w)) or np.max(w, initial=0.0) > 1e200:
                log.debug("QP barrier weights overflowed at iteration %d", it)
                break
            kkt = None
            for reg in (1.0, 1e3, 1e6):
                try:
                    if use_sparse:
                        m_mat = sp.csc_matrix(h) + g_sp.T @ sp.diags(w) @ g_sp + reg * delta_p * sp.identity(n)
                        kkt = _Kkt(m_mat, a_sp, reg * delta_d, True)
                    else:
                        m_mat = h + (g_mat.T * w) @ g_mat + reg * delta_p * np.eye(n)
                        kkt = _Kkt(m_mat, a_eq, reg * delta_d, False)
                    break
                except (RuntimeError, np.linalg.LinAlgError, ValueError):
                    continue
            if kkt is None:
                log.debug("QP KKT factorization failed at iteration %d", it)
                break

            def direction(r_c):
                rhs1 = -r_d - g_mat.T @ ((lam * r_i - r_c) / s)
                dz, dy = kkt.solve(rhs1, -r_e)
                ds = -r_i - g_mat @ dz
                dlam = -(r_c + lam * ds) / s
                return dz, dy, ds, dlam

            # predictor
            dz, dy, ds, dlam = direction(s * lam)
            a_aff = min(_max_step(s, ds), _max_step(lam, dlam))
            if m:
                mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dlam) / m)
                sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
                r_c = s * lam + ds * dlam - sigma * mu
                dz, dy, ds, dlam = direction(r_c)
            tau = min(max(0.99, 1.0 - mu), 1.0 - 1e-8) if m else 1.0
            a_p = min(1.0, tau * _max_step(s, ds))
            a_d = min(1.0, tau * _max_step(lam, dlam))
            alpha = min(a_p, a_d)
            z = z + alpha * dz
            y = y + alpha * dy
            s = np.maximum(s + alpha * ds, 1e-300)
            lam = np.maximum(lam + alpha * dlam, 1e-300)
            if not (np.all(np.isfinite(z)) and np.all(np.isfinite(lam))):
                break

        if status is QpStatus.MAX_ITER and best is not None:
            _, z, y, lam = best

        # map inequality multipliers back to signed per-row c_in multipliers
        y_in = np.zeros(p.c_in.shape[0])
        n_up = up_idx.size
        y_in[up_idx] += lam[:n_up]
        y_in[lo_idx] -= lam[n_up:]
        y_in[eq_rows] = y[p.a_eq.shape[0] :]
        y_eq = y[: p.a_eq.shape[0]]

        if status is QpStatus.INFEASIBLE:
            return self._fail(p, z, QpStatus.INFEASIBLE, it)

        sol = self._package(p, z, y_eq, y_in, status, it)
        if cfg.polish and status is QpStatus.OPTIMAL:
            polished = self._polish(p, h, z, y_in, eq_rows, it)
            # the active-set solve is exact where the interior point is only
            # close; keep it whenever it certifies
            if polished is not None and polished.kkt_residual <= max(sol.kkt_residual, cfg.tol_kkt):
                sol = polished
        if sol.status is QpStatus.OPTIMAL and sol.kkt_residual > cfg.tol_kkt:
            sol.status = QpStatus.MAX_ITER
        return sol

    @staticmethod
    def _certificate(a_eq, b_eq, g_mat, h_vec, y, lam):
        nrm = max(np.max(np.abs(y), initial=0.0), np.max(lam, initial=0.0))
        if nrm < 1e6:
            return False
        yh, lh = y / nrm, lam / nrm
        ray = a_eq.T @ yh + g_mat.T @ lh
        return float(np.max(np.abs(ray), initial=0.0)) < 1e-7 and float(b_eq @ yh + h_vec @ lh) < -1e-7

    def _package(self, p, z, y_eq, y_in, status, it):
        stat, feas, comp = kkt_residuals(p, z, y_eq, y_in)
        return QpSolution(
            z=z,
            objective=p.objective(z),
            status=status,
            kkt_residual=max(stat, feas, comp),
            iterations=it,
            y_eq=y_eq,
            y_in=y_in,
        )

    def _fail(self, p, z, status, it):
        return QpSolution(
            z=z,
            objective=p.objective(z),
            status=status,
            kkt_residual=float("inf"),
            iterations=it,
            y_eq=np.zeros(p.a_eq.shape[0]),
            y_in=np.zeros(p.c_in.shape[0]),
        )

    def _polish(self, p, h, z, y_in, eq_rows, it, rounds=5):
        cz = p.c_in @ z
        act_u = ~eq_rows & (y_in > 0) & (y_in > p.upper - cz)
        act_l = ~eq_rows & (y_in < 0) & (-y_in > cz - p.lower)
        tol = self.config.tol_kkt
        n = p.n
        # the multiplier/slack test can miss weakly active rows; correct the
        # guess by adding violated rows and dropping wrong-sign multipliers
        for _ in range(rounds):
            rows = np.flatnonzero(eq_rows | act_u | act_l)
            a = np.vstack([p.a_eq, p.c_in[rows]])
            rhs_c = np.concatenate([p.b_eq, np.where(act_l[rows], p.lower[rows], p.upper[rows])])
            k = np.zeros((n + a.shape[0], n + a.shape[0]))
            k[:n, :n] = h
            k[:n, n:] = a.T
            k[n:, :n] = a
            rhs = np.concatenate([-p.g, rhs_c])
            try:
                sol = np.linalg.lstsq(k, rhs, rcond=None)[0] if a.shape[0] > n else np.linalg.solve(k, rhs)
            except np.linalg.LinAlgError:
                return None
            zp = sol[:n]
            if not np.all(np.isfinite(zp)):
                return None
            mult = sol[n:]
            y_eq = mult[: p.a_eq.shape[0]]
            y_new = np.zeros_like(y_in)
            y_new[rows] = mult[p.a_eq.shape[0] :]
            czp = p.c_in @ zp
            over = ~eq_rows & ~act_u & (czp > p.upper + tol)
            under = ~eq_rows & ~act_l & (czp < p.lower - tol)
            wrong_u = act_u & (y_new < -tol)
            wrong_l = act_l & (y_new > tol)
            if not (over.any() or under.any() or wrong_u.any() or wrong_l.any()):
                return self._package(p, zp, y_eq, y_new, QpStatus.OPTIMAL, it)
            act_u = (act_u & ~wrong_u) | over
            act_l = (act_l & ~wrong_l) | under
        return None


def _max_step(v, dv):
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def qp_solve(problem: QpProblem, config: Optional[QpConfig] = None, z0=None) -> QpSolution:
    return QpSolver(config).solve(problem, z0=z0)
