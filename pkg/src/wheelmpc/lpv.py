"""Trajectory-scheduled LPV embedding of the discrete kinematics.

Along a nominal trajectory ``(x*, u*)`` the deviation ``x_e = x - x*`` obeys,
to first order, ``x_e+ = A(rho) x_e + B(rho) u_e`` with
``A = I + ts * df/dx`` and ``B = ts * df/du`` evaluated at the scheduling
point ``rho = (theta*, gamma*, v*, gamma_rate*)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .trajectory import Trajectory
from .vehicle import NX, Frame, VehicleParams, jacobians


@dataclass(frozen=True)
class SchedulingPoint:
    theta_nom: float
    gamma_nom: float
    v_nom: float
    gamma_rate_nom: float
    frame: Frame = Frame.REAR

    def state_input(self):
        return np.array([0.0, 0.0, self.theta_nom, self.gamma_nom]), np.array([self.v_nom, self.gamma_rate_nom])


@dataclass
class LpvMatrices:
    a: np.ndarray
    b: np.ndarray


def embed_at(rho: SchedulingPoint, params: VehicleParams, ts: float) -> LpvMatrices:
    if not ts > 0:
        raise ValueError(f"ts must be > 0, got {ts}")
    x, u = rho.state_input()
    jx, ju = jacobians(x, u, params, rho.frame)
    return LpvMatrices(a=np.eye(NX) + ts * jx, b=ts * ju)


def scheduling_points(trajectory: Trajectory, start_index: int, n: int, frame=None) -> list:
    """``rho`` for ``start_index .. start_index + n - 1`` with terminal hold."""
    idx = np.minimum(np.arange(start_index, start_index + n), len(trajectory) - 1)
    if frame is None:
        tags = {trajectory.frames[i] for i in idx}
        if len(tags) > 1:
            raise ValueError("horizon spans a direction switch; pass an explicit frame")
        frame = tags.pop()
    xs = trajectory.states[idx]
    us = trajectory.inputs[idx]
    return [SchedulingPoint(x[2], x[3], u[0], u[1], Frame(frame)) for x, u in zip(xs, us)]


def embed_horizon_arrays(trajectory: Trajectory, start_index: int, n: int, params: VehicleParams, ts: float, frame):
    """Stacked ``(n, 4, 4)`` and ``(n, 4, 2)`` matrices (terminal hold past the end)."""
    if len(trajectory) == 0:
        raise ValueError("no nominal trajectory")
    idx = np.minimum(np.arange(start_index, start_index + n), len(trajectory) - 1)
    jx, ju = jacobians(trajectory.states[idx], trajectory.inputs[idx], params, frame)
    return np.eye(NX) + ts * jx, ts * ju


def embed_horizon(trajectory: Trajectory, start_index: int, n: int, params: VehicleParams, ts: float, frame=None) -> list:
    if trajectory is None or len(trajectory) == 0:
        raise ValueError("no nominal trajectory")
    if not 0 <= start_index < len(trajectory):
        raise IndexError(f"start_index {start_index} outside trajectory of length {len(trajectory)}")
    rhos = scheduling_points(trajectory, start_index, n, frame)
    a, b = embed_horizon_arrays(trajectory, start_index, n, params, ts, rhos[0].frame)
    return [LpvMatrices(a[i], b[i]) for i in range(n)]


def predict(mats, x_e0, u_e) -> np.ndarray:
    """Roll the deviation recursion forward; returns ``(n + 1, 4)``."""
    xs = [np.asarray(x_e0, dtype=float)]
    for m, u in zip(mats, np.asarray(u_e, dtype=float)):
        xs.append(m.a @ xs[-1] + m.b @ u)
    return np.array(xs)
