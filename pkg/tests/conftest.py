import copy
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from wheelmpc.config import RunConfig  # noqa: E402
from wheelmpc.planner import plan_cycle  # noqa: E402

ACCEPTANCE_LINES = []
_CACHE = {}


def reference_config() -> RunConfig:
    return RunConfig().validate()


def reference_legs():
    """The planned reference cycle, computed once per session (~40 s)."""
    if "legs" not in _CACHE:
        cfg = reference_config()
        _CACHE["legs"] = plan_cycle(cfg.scenario(), cfg.planner())
    return copy.deepcopy(_CACHE["legs"])


def reference_runs():
    """Closed-loop runs of all three controllers under the reference disturbance."""
    if "runs" not in _CACHE:
        from wheelmpc.sim import simulate

        cfg = reference_config()
        legs = reference_legs()
        _CACHE["runs"] = {
            kind: simulate(legs, kind, cfg.weights(), cfg.bounds(), cfg.disturbance(), cfg.params, cfg.substeps)
            for kind in ("nl", "lpv", "lti")
        }
    return _CACHE["runs"]


@pytest.fixture(scope="session")
def ref_runs():
    return reference_runs()


@pytest.fixture(scope="session")
def ref_config():
    return reference_config()


@pytest.fixture(scope="session")
def ref_legs():
    return reference_legs()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cli_plan_dir(tmp_path_factory):
    """Output directory of one ``wheelmpc plan`` run with the default config."""
    from wheelmpc.cli import main

    out = tmp_path_factory.mktemp("plan")
    assert main(["plan", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def ref_leg_files(tmp_path_factory, ref_legs, ref_config):
    from wheelmpc.io import write_trajectory

    out = tmp_path_factory.mktemp("legs")
    paths = []
    for leg in ref_legs:
        p = out / f"leg{leg.leg}.csv"
        write_trajectory(p, leg, ref_config.params)
        paths.append(str(p))
    return paths
