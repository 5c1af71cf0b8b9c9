"""Kinematic model of an articulated wheel loader.

State ``[x, y, theta, gamma]`` where ``(x, y)`` is either the rear or the
front axle center (see :class:`Frame`), ``theta`` is the rear body heading and
``gamma`` the articulation angle. Input ``[v, gamma_rate]``.

The array-level helpers (``derivative``, ``jacobians``, ...) accept a single
point of shape ``(4,)``/``(2,)`` or a batch ``(n, 4)``/``(n, 2)`` and are what
the optimizers use. The dataclass-level functions wrap them for callers that
prefer named fields.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

NX = 4
NU = 2


class Frame(str, Enum):
    REAR = "REAR"
    FRONT = "FRONT"


@dataclass(frozen=True)
class VehicleParams:
    """Geometry and actuation limits.

    ``l_front``/``l_rear`` are the distances from the articulation joint to
    the front/rear axle centers.
    """

    l_front: float = 1.6
    l_rear: float = 1.7
    gamma_max: float = 0.40
    v_max: float = 2.0
    gamma_rate_max: float = 0.35

    def __post_init__(self):
        if not self.l_front > 0:
            raise ValueError(f"l_front must be > 0, got {self.l_front}")
        if not self.l_rear > 0:
            raise ValueError(f"l_rear must be > 0, got {self.l_rear}")
        if not 0 < self.gamma_max < math.pi / 2:
            raise ValueError(f"gamma_max must lie in (0, pi/2), got {self.gamma_max}")
        if not self.v_max > 0:
            raise ValueError(f"v_max must be > 0, got {self.v_max}")
        if not self.gamma_rate_max > 0:
            raise ValueError(f"gamma_rate_max must be > 0, got {self.gamma_rate_max}")

    @property
    def u_lower(self) -> np.ndarray:
        return np.array([-self.v_max, -self.gamma_rate_max])

    @property
    def u_upper(self) -> np.ndarray:
        return np.array([self.v_max, self.gamma_rate_max])


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    theta: float
    gamma: float
    frame: Frame = Frame.REAR

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta, self.gamma], dtype=float)

    @classmethod
    def from_array(cls, arr, frame: Frame = Frame.REAR) -> "VehicleState":
        x, y, theta, gamma = (float(a) for a in arr)
        return cls(x, y, theta, gamma, Frame(frame))


@dataclass(frozen=True)
class ControlInput:
    v: float
    gamma_rate: float

    def as_array(self) -> np.ndarray:
        return np.array([self.v, self.gamma_rate], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "ControlInput":
        return cls(float(arr[0]), float(arr[1]))


@dataclass(frozen=True)
class StateDerivative:
    dx: float
    dy: float
    dtheta: float
    dgamma: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta, self.dgamma], dtype=float)


def wrap_angle(a):
    """Wrap to (-pi, pi]. Only used for reporting."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def _heading_arg(xs, frame):
    theta = xs[..., 2]
    return theta + xs[..., 3] if Frame(frame) is Frame.FRONT else theta


def derivative(xs, us, params: VehicleParams, frame=Frame.REAR) -> np.ndarray:
    """Continuous-time state derivative for one point or a batch."""
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    gamma = xs[..., 3]
    v = us[..., 0]
    rate = us[..., 1]
    phi = _heading_arg(xs, frame)
    cg, sg = np.cos(gamma), np.sin(gamma)
    den = params.l_front * cg + params.l_rear
    out = np.empty(np.broadcast_shapes(xs.shape[:-1], us.shape[:-1]) + (NX,))
    out[..., 0] = v * np.cos(phi)
    out[..., 1] = v * np.sin(phi)
    out[..., 2] = (v * sg - params.l_rear * rate * cg) / den
    out[..., 3] = rate
    return out


def euler(xs, us, params: VehicleParams, ts: float, frame=Frame.REAR) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    return xs + ts * derivative(xs, us, params, frame)


def jacobians(xs, us, params: VehicleParams, frame=Frame.REAR):
    """Analytic ``(df/dx, df/du)`` for one point or a batch.

    Returns arrays of shape ``(..., 4, 4)`` and ``(..., 4, 2)``.
    """
    xs = np.asarray(xs, dtype=float)
    us = np.asarray(us, dtype=float)
    batch = np.broadcast_shapes(xs.shape[:-1], us.shape[:-1])
    gamma = xs[..., 3]
    v = us[..., 0]
    rate = us[..., 1]
    phi = _heading_arg(xs, frame)
    cp, sp = np.cos(phi), np.sin(phi)
    cg, sg = np.cos(gamma), np.sin(gamma)
    lf, lr = params.l_front, params.l_rear
    den = lf * cg + lr
    num = v * sg - lr * rate * cg
    f4 = (v * cg + lr * rate * sg) / den + lf * sg * num / den**2

    jx = np.zeros(batch + (NX, NX))
    jx[..., 0, 2] = -v * sp
    jx[..., 1, 2] = v * cp
    jx[..., 2, 3] = f4
    if Frame(frame) is Frame.FRONT:
        jx[..., 0, 3] = -v * sp
        jx[..., 1, 3] = v * cp

    ju = np.zeros(batch + (NX, NU))
    ju[..., 0, 0] = cp
    ju[..., 1, 0] = sp
    ju[..., 2, 0] = sg / den
    ju[..., 2, 1] = -lr * cg / den
    ju[..., 3, 1] = 1.0
    return jx, ju


def rear_to_front_array(xs, params: VehicleParams) -> np.ndarray:
    xs = np.array(xs, dtype=float)
    theta, gamma = xs[..., 2], xs[..., 3]
    xs[..., 0] += params.l_rear * np.cos(theta) + params.l_front * np.cos(theta + gamma)
    xs[..., 1] += params.l_rear * np.sin(theta) + params.l_front * np.sin(theta + gamma)
    return xs


def front_to_rear_array(xs, params: VehicleParams) -> np.ndarray:
    xs = np.array(xs, dtype=float)
    theta, gamma = xs[..., 2], xs[..., 3]
    xs[..., 0] -= params.l_rear * np.cos(theta) + params.l_front * np.cos(theta + gamma)
    xs[..., 1] -= params.l_rear * np.sin(theta) + params.l_front * np.sin(theta + gamma)
    return xs


def to_frame(xs, src, dst, params: VehicleParams) -> np.ndarray:
    """Re-express rear- or front-axle states in another frame."""
    src, dst = Frame(src), Frame(dst)
    if src is dst:
        return np.array(xs, dtype=float)
    if dst is Frame.FRONT:
        return rear_to_front_array(xs, params)
    return front_to_rear_array(xs, params)


def joint_position(xs_rear, params: VehicleParams) -> np.ndarray:
    """Articulation joint position for rear-frame states."""
    xs_rear = np.asarray(xs_rear, dtype=float)
    theta = xs_rear[..., 2]
    return np.stack(
        [xs_rear[..., 0] + params.l_rear * np.cos(theta), xs_rear[..., 1] + params.l_rear * np.sin(theta)],
        axis=-1,
    )


# dataclass-level API


def dynamics_continuous(state: VehicleState, inp: ControlInput, params: VehicleParams) -> StateDerivative:
    d = derivative(state.as_array(), inp.as_array(), params, state.frame)
    return StateDerivative(*(float(c) for c in d))


def step_euler(state: VehicleState, inp: ControlInput, params: VehicleParams, ts: float) -> VehicleState:
    if not ts > 0:
        raise ValueError(f"ts must be > 0, got {ts}")
    nxt = euler(state.as_array(), inp.as_array(), params, ts, state.frame)
    return VehicleState.from_array(nxt, state.frame)


def jacobian_state(state: VehicleState, inp: ControlInput, params: VehicleParams) -> np.ndarray:
    return jacobians(state.as_array(), inp.as_array(), params, state.frame)[0]


def jacobian_control(state: VehicleState, inp: ControlInput, params: VehicleParams) -> np.ndarray:
    return jacobians(state.as_array(), inp.as_array(), params, state.frame)[1]


def rear_to_front(state: VehicleState, params: VehicleParams) -> VehicleState:
    if state.frame is not Frame.REAR:
        raise ValueError("rear_to_front expects a REAR-frame state")
    return VehicleState.from_array(rear_to_front_array(state.as_array(), params), Frame.FRONT)


def front_to_rear(state: VehicleState, params: VehicleParams) -> VehicleState:
    if state.frame is not Frame.FRONT:
        raise ValueError("front_to_rear expects a FRONT-frame state")
    return VehicleState.from_array(front_to_rear_array(state.as_array(), params), Frame.REAR)
