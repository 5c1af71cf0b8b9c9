"""Delimited-text formats for trajectories, run logs and result tables."""

from __future__ import annotations

import csv
import io as _io
from pathlib import Path

import numpy as np

from .sim import RunLog, now_stamp
from .trajectory import Trajectory
from .vehicle import Frame, VehicleParams, rear_to_front_array

TRAJECTORY_COLUMNS = ["k", "t", "x_r", "y_r", "x_f", "y_f", "theta", "gamma", "v", "gamma_rate", "frame", "leg"]
RUNLOG_COLUMNS = [
    "step", "t", "leg", "k", "nominal_index", "frame",
    "x_meas", "y_meas", "theta_meas", "gamma_meas",
    "x_true", "y_true", "theta_true", "gamma_true",
    "v_cmd", "gamma_rate_cmd", "v_applied", "gamma_rate_applied",
    "status", "error_m",
]


def fmt(x) -> str:
    return "%.9g" % x


def _write_text(path, text: str):
    with open(path, "w", newline="") as fh:
        fh.write(text)


def trajectory_text(traj: Trajectory, params: VehicleParams) -> str:
    # front columns are derived from the serialized rear values so that a
    # write -> read -> write cycle reproduces the file byte for byte
    rounded = np.vectorize(lambda v: float(fmt(v)))(traj.states)
    front = rear_to_front_array(rounded, params)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_COLUMNS)
    for k in range(len(traj)):
        x = traj.states[k]
        u = traj.inputs[k]
        w.writerow(
            [k, fmt(k * traj.ts), fmt(x[0]), fmt(x[1]), fmt(front[k, 0]), fmt(front[k, 1]),
             fmt(x[2]), fmt(x[3]), fmt(u[0]), fmt(u[1]), traj.frames[k].name, traj.leg]
        )
    return buf.getvalue()


def write_trajectory(path, traj: Trajectory, params: VehicleParams):
    _write_text(path, trajectory_text(traj, params))


def read_trajectory(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no trajectory rows")
    missing = set(TRAJECTORY_COLUMNS) - set(rows[0])
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    states = np.array([[float(r[c]) for c in ("x_r", "y_r", "theta", "gamma")] for r in rows])
    inputs = np.array([[float(r["v"]), float(r["gamma_rate"])] for r in rows])
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least two samples to recover ts")
    # t is written with limited precision; recover ts from the last sample
    ts = float(rows[-1]["t"]) / int(rows[-1]["k"])
    frames = [Frame[r["frame"]] for r in rows]
    return Trajectory(ts=ts, states=states, inputs=inputs, leg=int(rows[0]["leg"]), frames=frames)


def runlog_text(run: RunLog, meta: dict = None) -> str:
    """CSV body without timing, then ``#`` footer lines with summary and timing."""
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RUNLOG_COLUMNS)
    for i, r in enumerate(run.records):
        w.writerow(
            [i, fmt(r.time), r.leg, r.k, r.nominal_index, r.frame.name]
            + [fmt(v) for v in r.measured]
            + [fmt(v) for v in r.true_state]
            + [fmt(v) for v in r.commanded]
            + [fmt(v) for v in r.applied]
            + [r.status, fmt(r.error)]
        )
    summary = run.summary()
    lines = ["# summary"]
    for key in ("controller", "steps", "mean_abs_err_m", "max_err_m", "terminal_pos_err_m",
                "infeasible_count", "slack_count", "nl_fallback_count", "frame_switches", "aborted"):
        v = summary[key]
        lines.append(f"# {key}={fmt(v) if isinstance(v, float) else v}")
    lines.append("# timing")
    for key in ("median_solve_ms", "mean_solve_ms"):
        lines.append(f"# {key}={fmt(summary[key])}")
    for key, v in (meta or {}).items():
        lines.append(f"# {key}={v}")
    lines.append(f"# written={now_stamp()}")
    return buf.getvalue() + "\n".join(lines) + "\n"


def write_runlog(path, run: RunLog, meta: dict = None):
    _write_text(path, runlog_text(run, meta))


def data_section(text: str) -> str:
    """Everything except ``#`` comment lines (the deterministic part of a file)."""
    return "".join(line for line in text.splitlines(True) if not line.startswith("#"))


def read_runlog_summary(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.startswith("# ") and "=" in line:
            k, v = line[2:].split("=", 1)
            out[k] = v
    return out


def table_text(rows: list, columns: list) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([fmt(r[c]) if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue() + f"# written={now_stamp()}\n"


def write_table(path, rows, columns):
    _write_text(path, table_text(rows, columns))


def read_table(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))
