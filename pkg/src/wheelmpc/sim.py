"""Closed-loop simulation, tracking metrics and the horizon benchmark."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .controllers import (
    ControllerError,
    ControllerKind,
    ControllerOutput,
    DeviationBounds,
    TrackingWeights,
    make_controller,
    nearest_index,
)
from .trajectory import Trajectory, select_frame
from .vehicle import NX, ControlInput, Frame, VehicleParams, VehicleState, derivative, to_frame

log = logging.getLogger(__name__)

NOMINAL_FALLBACK = "FALLBACK_NOMINAL"


@dataclass
class DisturbanceConfig:
    speed_lag_tau: float = 0.0
    meas_noise_std: np.ndarray = field(default_factory=lambda: np.zeros(NX))
    initial_offset: np.ndarray = field(default_factory=lambda: np.zeros(NX))
    rng_seed: int = 42

    def __post_init__(self):
        if self.speed_lag_tau < 0:
            raise ValueError(f"speed_lag_tau must be >= 0, got {self.speed_lag_tau}")
        self.meas_noise_std = np.asarray(self.meas_noise_std, dtype=float).reshape(NX)
        self.initial_offset = np.asarray(self.initial_offset, dtype=float).reshape(NX)
        if np.any(self.meas_noise_std < 0):
            raise ValueError("meas_noise_std must be non-negative")

    @classmethod
    def reference(cls, seed: int = 42) -> "DisturbanceConfig":
        """Frozen regression disturbance: lagged speed, light noise, 0.5 m lateral offset."""
        return cls(
            speed_lag_tau=0.4,
            meas_noise_std=np.array([0.01, 0.01, 0.005, 0.005]),
            initial_offset=np.array([0.0, 0.5, 0.0, 0.0]),
            rng_seed=seed,
        )


@dataclass
class StepRecord:
    time: float
    leg: int
    k: int
    true_state: np.ndarray
    measured: np.ndarray
    nominal_index: int
    frame: Frame
    commanded: np.ndarray
    applied: np.ndarray
    solve_time: float
    status: str
    error: float


@dataclass
class RunLog:
    controller: str
    records: list = field(default_factory=list)
    final_state: Optional[np.ndarray] = None
    final_target: Optional[np.ndarray] = None
    aborted: bool = False
    abort_reason: str = ""

    def errors(self) -> np.ndarray:
        return np.array([r.error for r in self.records])

    def solve_times(self) -> np.ndarray:
        return np.array([r.solve_time for r in self.records])

    def frame_switches(self) -> int:
        frames = [r.frame for r in self.records]
        return sum(1 for a, b in zip(frames, frames[1:]) if a != b)

    def switch_steps(self) -> list:
        return [i for i in range(1, len(self.records)) if self.records[i].frame != self.records[i - 1].frame]

    def summary(self) -> dict:
        err = self.errors()
        st = self.solve_times()
        terminal = float("nan")
        if self.final_state is not None and self.final_target is not None:
            terminal = float(np.hypot(*(self.final_state[:2] - self.final_target[:2])))
        return {
            "controller": self.controller,
            "steps": len(self.records),
            "mean_abs_err_m": float(np.mean(err)) if err.size else float("nan"),
            "max_err_m": float(np.max(err)) if err.size else float("nan"),
            "terminal_pos_err_m": terminal,
            "infeasible_count": sum(1 for r in self.records if r.status == NOMINAL_FALLBACK),
            "slack_count": sum(1 for r in self.records if r.status == "SLACK"),
            "nl_fallback_count": sum(1 for r in self.records if r.status == "FALLBACK_LPV"),
            "frame_switches": self.frame_switches(),
            "median_solve_ms": float(np.median(st) * 1e3) if st.size else float("nan"),
            "mean_solve_ms": float(np.mean(st) * 1e3) if st.size else float("nan"),
            "aborted": self.aborted,
        }


class SimulationAborted(RuntimeError):
    def __init__(self, message, log_: RunLog):
        super().__init__(message)
        self.log = log_


def path_error(trajectory: Trajectory, position, index: int) -> float:
    """Distance from ``position`` to the rear-axle polyline around ``index``."""
    pts = trajectory.states[:, :2]
    p = np.asarray(position, dtype=float)[:2]
    best = float(np.hypot(*(pts[index] - p)))
    for a, b in ((index - 1, index), (index, index + 1)):
        if a < 0 or b >= len(pts):
            continue
        seg = pts[b] - pts[a]
        den = float(seg @ seg)
        if den <= 0.0:
            continue
        t = min(1.0, max(0.0, float((p - pts[a]) @ seg) / den))
        best = min(best, float(np.hypot(*(pts[a] + t * seg - p))))
    return best


class Plant:
    """Kinematic plant with Euler substeps and a first-order speed lag."""

    def __init__(self, x0, params: VehicleParams, ts: float, substeps: int = 10, tau: float = 0.0, v0: float = 0.0):
        self.x = np.array(x0, dtype=float)
        self.p = params
        self.ts = ts
        self.substeps = int(substeps)
        self.tau = tau
        self.v = v0

    def advance(self, cmd) -> np.ndarray:
        """Integrate one control period; returns the mean applied input."""
        dt = self.ts / self.substeps
        decay = 1.0 - math.exp(-dt / self.tau) if self.tau > 0 else 1.0
        v_sum = 0.0
        for _ in range(self.substeps):
            if self.tau <= 0:
                self.v = cmd[0]
            u = np.array([self.v, cmd[1]])
            v_sum += self.v
            self.x = self.x + dt * derivative(self.x, u, self.p)
            if self.tau > 0:
                self.v += decay * (cmd[0] - self.v)
        return np.array([v_sum / self.substeps, cmd[1]])


def simulate(
    legs: Sequence[Trajectory],
    controller_kind,
    weights: Optional[TrackingWeights] = None,
    bounds: Optional[DeviationBounds] = None,
    disturbance: Optional[DisturbanceConfig] = None,
    params: Optional[VehicleParams] = None,
    substeps: int = 10,
    fallback_budget: int = 10,
) -> RunLog:
    """Run one loading cycle (all legs back to back) in closed loop."""
    weights = weights or TrackingWeights()
    bounds = bounds or DeviationBounds()
    dist = disturbance or DisturbanceConfig()
    params = params or VehicleParams()
    kind = ControllerKind(controller_kind)
    ctrl = make_controller(kind, weights, bounds, params)
    rng = np.random.default_rng(dist.rng_seed)
    ts = legs[0].ts
    plant = Plant(legs[0].states[0] + dist.initial_offset, params, ts, substeps, dist.speed_lag_tau, legs[0].inputs[0, 0])
    run = RunLog(controller=kind.value)
    t = 0.0
    fails = 0
    for leg in legs:
        ctrl.reset()
        frame = leg.frames[0]
        prev_idx = None
        for k in range(len(leg) - 1):
            noise = rng.normal(0.0, 1.0, NX) * dist.meas_noise_std
            meas_rear = plant.x + noise
            frame = select_frame(leg.inputs[k, 0], frame)
            measured = VehicleState.from_array(to_frame(meas_rear, Frame.REAR, frame, params), frame)
            try:
                out = ctrl.step(measured, leg, k)
                cmd = out.input.as_array()
                status, solve_time = out.status, out.solve_time
                fails = 0
            except ControllerError as exc:
                log.info("controller infeasible at leg %d step %d: %s", leg.leg, k, exc)
                cmd = leg.inputs[k].copy()
                status, solve_time = NOMINAL_FALLBACK, 0.0
                fails += 1
            idx = nearest_index(leg, plant.x, Frame.REAR, k, params, previous=prev_idx)
            prev_idx = idx
            err = path_error(leg, plant.x, idx)
            x_true = plant.x.copy()
            applied = plant.advance(cmd)
            run.records.append(
                StepRecord(t, leg.leg, k, x_true, meas_rear, idx, frame, cmd, applied, solve_time, status, err)
            )
            t += ts
            if fails >= fallback_budget:
                run.aborted = True
                run.abort_reason = f"{fails} consecutive infeasible steps at leg {leg.leg} step {k}"
                run.final_state = plant.x.copy()
                raise SimulationAborted(run.abort_reason, run)
    run.final_state = plant.x.copy()
    run.final_target = legs[-1].states[-1].copy()
    return run


def compare_controllers(
    legs: Sequence[Trajectory],
    weights: Optional[TrackingWeights] = None,
    bounds: Optional[DeviationBounds] = None,
    disturbance: Optional[DisturbanceConfig] = None,
    params: Optional[VehicleParams] = None,
    kinds=(ControllerKind.NL, ControllerKind.LPV, ControllerKind.LTI),
    substeps: int = 10,
) -> list:
    """One row per controller on identical trajectory, seed and disturbance."""
    rows = []
    for kind in kinds:
        kind = ControllerKind(kind)
        try:
            run = simulate(legs, kind, weights, bounds, disturbance, params, substeps)
            s = run.summary()
            status = "ok"
        except SimulationAborted as exc:
            s = exc.log.summary()
            status = f"aborted: {exc}"
        rows.append(
            {
                "controller": kind.value,
                "mean_abs_err_m": s["mean_abs_err_m"],
                "max_err_m": s["max_err_m"],
                "median_solve_ms": s["median_solve_ms"],
                "mean_solve_ms": s["mean_solve_ms"],
                "infeasible_count": s["infeasible_count"],
                "status": status,
            }
        )
    return rows


@dataclass
class LoggedState:
    leg: int
    k: int
    measured: np.ndarray
    frame: Frame


def logged_states(run: RunLog, count: int = 50) -> list:
    """Evenly spaced measured states from a reference run."""
    idx = np.unique(np.linspace(0, len(run.records) - 1, count).round().astype(int))
    return [LoggedState(run.records[i].leg, run.records[i].k, run.records[i].measured, run.records[i].frame) for i in idx]


def bench_horizon_sweep(
    legs: Sequence[Trajectory],
    states: Sequence[LoggedState],
    horizons=(5, 10, 15, 20, 25),
    repetitions: int = 1,
    weights: Optional[TrackingWeights] = None,
    bounds: Optional[DeviationBounds] = None,
    params: Optional[VehicleParams] = None,
    kinds=(ControllerKind.NL, ControllerKind.LPV, ControllerKind.LTI),
) -> list:
    """Per-step solver wall-clock per controller and horizon."""
    base = weights or TrackingWeights()
    bounds = bounds or DeviationBounds()
    params = params or VehicleParams()
    by_leg = {leg.leg: leg for leg in legs}
    kinds = [ControllerKind(k) for k in kinds]
    times = {(k, int(n)): [] for k in kinds for n in horizons}
    failures = {key: 0 for key in times}
    # controllers are interleaved per state so that machine-speed drift over
    # the sweep affects every controller alike
    for n in horizons:
        w = TrackingWeights(q=base.q, q_f=base.q_f, r=base.r, n=int(n), ts=base.ts)
        for _ in range(repetitions):
            ctrls = {k: make_controller(k, w, bounds, params) for k in kinds}
            for ls in states:
                meas = VehicleState.from_array(to_frame(ls.measured, Frame.REAR, ls.frame, params), ls.frame)
                for k, ctrl in ctrls.items():
                    try:
                        out: ControllerOutput = ctrl.step(meas, by_leg[ls.leg], ls.k)
                        times[k, int(n)].append(out.solve_time)
                    except ControllerError:
                        failures[k, int(n)] += 1
    rows = []
    for k in kinds:
        for n in horizons:
            arr = np.array(times[k, int(n)]) * 1e3
            rows.append(
                {
                    "controller": k.value,
                    "horizon": int(n),
                    "samples": int(arr.size),
                    "mean_ms": float(arr.mean()) if arr.size else float("nan"),
                    "var_ms2": float(arr.var()) if arr.size else float("nan"),
                    "median_ms": float(np.median(arr)) if arr.size else float("nan"),
                    "failures": failures[k, int(n)],
                }
            )
    return rows


def now_stamp() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S")
