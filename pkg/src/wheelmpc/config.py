"""TOML run configuration with documented defaults and strict key checking."""

from __future__ import annotations

import copy
import logging
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

from .controllers import DeviationBounds, TrackingWeights
from .planner import PlannerConfig, RectObstacle, Scenario
from .sim import DisturbanceConfig
from .sqp import SqpConfig
from .vehicle import VehicleParams, VehicleState

log = logging.getLogger(__name__)

DEFAULTS = {
    "vehicle": {
        "l_front": 1.6,
        "l_rear": 1.7,
        "gamma_max": 0.40,
        "v_max": 2.0,
        "gamma_rate_max": 0.35,
    },
    "scenario": {
        # rear-axle poses (x, y, theta, gamma)
        "loading_pose": [0.0, 0.0, 0.0, 0.0],
        "unloading_pose": [-3.0, 4.0, 1.5707963267948966, 0.0],
        "d_safe": 0.5,
        "ts": 0.2,
        "n_plan": 100,
        "obstacles": [
            {"name": "pile", "center": [6.1, 0.0], "half_extents": [2.0, 3.0], "rotation": 0.0},
            {"name": "truck", "center": [-3.0, 9.35], "half_extents": [3.0, 1.25], "rotation": 0.0},
        ],
    },
    "planner": {
        "r": [1.0, 1.0],
        "r_d": [8.0, 24.0],
        "terminal_tol": 1e-3,
        "max_iter": 300,
    },
    "controller": {
        "q": [32.0, 32.0, 24.0, 16.0],
        "q_f": [320.0, 320.0, 240.0, 160.0],
        "r": [0.1, 0.5],
        "horizon": 10,
        "state_box": [1.0, 1.0, 0.5, 0.3],
    },
    "disturbance": {
        "speed_lag_tau": 0.4,
        "meas_noise_std": [0.01, 0.01, 0.005, 0.005],
        "initial_offset": [0.0, 0.5, 0.0, 0.0],
        "rng_seed": 42,
        "plant_substeps": 10,
        "fallback_budget": 10,
    },
}

OBSTACLE_KEYS = {"name", "center", "half_extents", "rotation"}


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key or invariant."""


@dataclass
class RunConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @property
    def params(self) -> VehicleParams:
        return VehicleParams(**self.raw["vehicle"])

    @property
    def ts(self) -> float:
        return float(self.raw["scenario"]["ts"])

    def scenario(self) -> Scenario:
        s = self.raw["scenario"]
        obstacles = [
            RectObstacle(tuple(o["center"]), tuple(o["half_extents"]), float(o.get("rotation", 0.0)))
            for o in s["obstacles"]
        ]
        return Scenario(
            params=self.params,
            loading_pose=VehicleState(*map(float, s["loading_pose"])),
            unloading_pose=VehicleState(*map(float, s["unloading_pose"])),
            obstacles=obstacles,
            d_safe=float(s["d_safe"]),
            ts=self.ts,
            n_plan=int(s["n_plan"]),
        )

    def planner(self) -> PlannerConfig:
        p = self.raw["planner"]
        return PlannerConfig(
            r=np.diag(np.asarray(p["r"], float)),
            r_d=np.diag(np.asarray(p["r_d"], float)),
            terminal_tol=float(p["terminal_tol"]),
            sqp=SqpConfig(max_iter=int(p["max_iter"])),
        )

    def weights(self, horizon=None) -> TrackingWeights:
        c = self.raw["controller"]
        return TrackingWeights(
            q=np.diag(np.asarray(c["q"], float)),
            q_f=np.diag(np.asarray(c["q_f"], float)),
            r=np.diag(np.asarray(c["r"], float)),
            n=int(c["horizon"] if horizon is None else horizon),
            ts=self.ts,
        )

    def bounds(self) -> DeviationBounds:
        return DeviationBounds(np.asarray(self.raw["controller"]["state_box"], float))

    def disturbance(self) -> DisturbanceConfig:
        d = self.raw["disturbance"]
        return DisturbanceConfig(
            speed_lag_tau=float(d["speed_lag_tau"]),
            meas_noise_std=np.asarray(d["meas_noise_std"], float),
            initial_offset=np.asarray(d["initial_offset"], float),
            rng_seed=int(d["rng_seed"]),
        )

    @property
    def substeps(self) -> int:
        return int(self.raw["disturbance"]["plant_substeps"])

    @property
    def fallback_budget(self) -> int:
        return int(self.raw["disturbance"]["fallback_budget"])

    def with_seed(self, seed) -> "RunConfig":
        if seed is None:
            return self
        raw = copy.deepcopy(self.raw)
        raw["disturbance"]["rng_seed"] = int(seed)
        return RunConfig(raw)

    def validate(self) -> "RunConfig":
        """Build every derived object once so invariant violations surface early."""
        try:
            self.scenario()
            self.planner()
            self.weights()
            self.bounds()
            self.disturbance()
            if self.substeps < 1:
                raise ValueError(f"plant_substeps must be >= 1, got {self.substeps}")
            if self.fallback_budget < 1:
                raise ValueError(f"fallback_budget must be >= 1, got {self.fallback_budget}")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def dumps(self) -> str:
        return tomli_w.dumps(self.raw)


def merge(user: dict, defaults: dict = DEFAULTS) -> dict:
    """Overlay ``user`` on the defaults, rejecting unknown sections and keys."""
    out = copy.deepcopy(defaults)
    for section, values in user.items():
        if section not in defaults:
            raise ConfigError(f"unknown section [{section}]")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in values.items():
            if key not in defaults[section]:
                raise ConfigError(f"unknown key '{key}' in [{section}]")
            if key == "obstacles":
                for i, ob in enumerate(value):
                    extra = set(ob) - OBSTACLE_KEYS
                    if extra:
                        raise ConfigError(f"unknown key '{sorted(extra)[0]}' in [scenario].obstacles[{i}]")
            out[section][key] = value
        for key in defaults[section]:
            if key not in values:
                log.info("config: [%s] %s not set, using default %r", section, key, defaults[section][key])
    for section in defaults:
        if section not in user:
            log.info("config: section [%s] not set, using defaults", section)
    return out


def loads(text: str) -> RunConfig:
    try:
        user = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return RunConfig(merge(user)).validate()


def load(path) -> RunConfig:
    with open(path, "rb") as fh:
        data = fh.read()
    return loads(data.decode("utf-8"))
