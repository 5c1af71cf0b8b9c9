"""Nominal state/input trajectories shared by the planner and the trackers."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .vehicle import ControlInput, Frame, VehicleParams, VehicleState, to_frame

# speeds below this are treated as "stopped" when classifying direction
V_DEADBAND = 1e-6


def select_frame(nominal_v: float, previous_frame: Frame) -> Frame:
    """Front axle when driving forward, rear axle when reversing."""
    if nominal_v > V_DEADBAND:
        return Frame.FRONT
    if nominal_v < -V_DEADBAND:
        return Frame.REAR
    return Frame(previous_frame)


def direction_switches(v) -> list:
    """Indices where the sign of ``v`` flips, ignoring near-zero samples.

    The returned index is the first sample of the new direction.
    """
    switches = []
    last = 0
    for i, vi in enumerate(np.asarray(v, dtype=float)):
        sgn = 1 if vi > V_DEADBAND else -1 if vi < -V_DEADBAND else 0
        if sgn == 0:
            continue
        if last and sgn != last:
            switches.append(i)
        last = sgn
    return switches


def frame_tags(v) -> list:
    v = np.asarray(v, dtype=float)
    moving = np.flatnonzero(np.abs(v) > V_DEADBAND)
    prev = select_frame(v[moving[0]], Frame.REAR) if moving.size else Frame.REAR
    tags = []
    for vi in v:
        prev = select_frame(vi, prev)
        tags.append(prev)
    return tags


@dataclass
class Trajectory:
    """Time-indexed nominal trajectory in the rear-axle frame.

    ``states`` has ``n + 1`` rows and ``inputs`` the same number: the last
    input is the terminal hold command (the requested final input), so every
    state has an associated command.
    """

    ts: float
    states: np.ndarray
    inputs: np.ndarray
    leg: int = 1
    frames: list = field(default=None)
    switches: list = field(default=None)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, 4)
        self.inputs = np.asarray(self.inputs, dtype=float).reshape(-1, 2)
        if self.states.shape[0] != self.inputs.shape[0]:
            raise ValueError("states and inputs must have the same number of rows")
        if self.frames is None:
            self.frames = frame_tags(self.inputs[:, 0])
        self.frames = [Frame(f) for f in self.frames]
        if self.switches is None:
            self.switches = direction_switches(self.inputs[:, 0])

    def __len__(self):
        return self.states.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.ts * np.arange(len(self))

    def states_in(self, frame: Frame, params: VehicleParams) -> np.ndarray:
        return to_frame(self.states, Frame.REAR, frame, params)

    def step(self, k: int, frame: Optional[Frame] = None, params: Optional[VehicleParams] = None):
        """``(VehicleState, ControlInput)`` at index ``k``."""
        x = self.states[k]
        frame = Frame.REAR if frame is None else Frame(frame)
        if frame is not Frame.REAR:
            x = to_frame(x, Frame.REAR, frame, params)
        return VehicleState.from_array(x, frame), ControlInput.from_array(self.inputs[k])
