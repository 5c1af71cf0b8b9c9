import numpy as np
import pytest

from oracles import nearest_bruteforce, quadratic_minimizer_by_probing
from wheelmpc.controllers import (
    ControllerError,
    ControllerKind,
    DeviationBounds,
    TrackingWeights,
    condense,
    lpv_mpc_step,
    lti_mpc_step,
    make_controller,
    nearest_index,
    nl_mpc_step,
)
from wheelmpc.lpv import embed_horizon_arrays
from wheelmpc.qp import QpSolution, QpStatus
from wheelmpc.sqp import SqpConfig, SqpSolver
from wheelmpc.trajectory import Trajectory
from wheelmpc.vehicle import Frame, VehicleParams, VehicleState, euler, to_frame

P = VehicleParams()
W = TrackingWeights()
B = DeviationBounds()
STEPS = (lpv_mpc_step, lti_mpc_step, nl_mpc_step)


def straight(n=60, v=1.0, ts=0.2):
    xs = np.zeros((n + 1, 4))
    xs[:, 0] = v * ts * np.arange(n + 1)
    return Trajectory(ts, xs, np.tile([v, 0.0], (n + 1, 1)))


def turning(v=1.0, n=40, ts=0.2):
    us = np.column_stack([np.full(n + 1, v), 0.08 * np.cos(np.linspace(0, 3, n + 1))])
    xs = [np.array([0.0, 0.0, 0.0, 0.05])]
    for k in range(n):
        xs.append(euler(xs[-1], us[k], P, ts))
    return Trajectory(ts, np.array(xs), us)


def measured_at(traj, k, frame, offset=(0, 0, 0, 0)):
    x = traj.states_in(frame, P)[k] + np.asarray(offset, float)
    return VehicleState.from_array(x, frame)


def tight_sqp():
    return SqpSolver(SqpConfig(tol_step=1e-11, tol_feas=1e-11, max_iter=100))


@pytest.mark.parametrize("step", STEPS)
@pytest.mark.parametrize("v, frame", [(1.0, Frame.FRONT), (-1.0, Frame.REAR)])
def test_zero_error_returns_nominal_input(step, v, frame):
    traj = turning(v)
    out = step(measured_at(traj, 7, frame), traj, 7, W, B, P)
    assert out.status == "OPTIMAL"
    np.testing.assert_array_equal(out.input.as_array(), traj.inputs[7])


def test_condensed_hessian_and_gradient_match_explicit_cost(rng):
    a = np.eye(4) + 0.1 * rng.normal(size=(3, 4, 4))
    b = 0.2 * rng.normal(size=(3, 4, 2))
    x0 = rng.normal(size=4)
    w = TrackingWeights(n=3)
    h, g, sx, su = condense(a, b, x0, w)

    def cost(u):
        u = u.reshape(3, 2)
        x, total = x0, 0.0
        for i in range(3):
            x = a[i] @ x + b[i] @ u[i]
            q = w.q_f if i == 2 else w.q
            total += x @ q @ x + u[i] @ w.r @ u[i]
        return total

    u = rng.normal(size=6)
    c0 = cost(np.zeros(6))
    np.testing.assert_allclose(0.5 * u @ h @ u + g @ u + c0, cost(u), rtol=1e-12)


def test_two_step_horizon_matches_batch_least_squares():
    traj = turning()
    w = TrackingWeights(n=2)
    k = 6
    x_e0 = np.array([0.01, -0.02, 0.005, 0.003])
    out = lpv_mpc_step(measured_at(traj, k, Frame.FRONT, x_e0), traj, k, w, B, P)
    a, b = embed_horizon_arrays(traj, k, 2, P, 0.2, Frame.FRONT)

    def cost(u):
        x1 = a[0] @ x_e0 + b[0] @ u[:2]
        x2 = a[1] @ x1 + b[1] @ u[2:]
        return x1 @ w.q @ x1 + x2 @ w.q_f @ x2 + u[:2] @ w.r @ u[:2] + u[2:] @ w.r @ u[2:]

    ref = quadratic_minimizer_by_probing(cost, 4)
    np.testing.assert_allclose(out.u_e.ravel(), ref, atol=1e-8)


def test_lateral_offset_steers_toward_path():
    traj = straight()
    meas = measured_at(traj, 0, Frame.FRONT, (0.0, 0.5, 0.0, 0.0))
    out = lpv_mpc_step(meas, traj, 0, W, B, P)
    rate = out.input.gamma_rate
    assert rate < 0
    # one model step: the front body heading theta + gamma turns toward y = 0
    x_rear = to_frame(meas.as_array(), Frame.FRONT, Frame.REAR, P)
    nxt = euler(x_rear, out.input.as_array(), P, 0.2)
    assert nxt[2] + nxt[3] < x_rear[2] + x_rear[3]


def test_lateral_offset_decays_in_closed_loop():
    traj = straight()
    x = np.array([0.0, 0.5, 0.0, 0.0])
    ys = []
    for k in range(30):
        meas = VehicleState.from_array(to_frame(x, Frame.REAR, Frame.FRONT, P), Frame.FRONT)
        out = lpv_mpc_step(meas, traj, k, W, B, P)
        x = euler(x, out.input.as_array(), P, 0.2)
        ys.append(abs(meas.y))
    assert ys[-1] < 0.01


def test_inputs_within_global_box(rng):
    traj = turning()
    for step in STEPS:
        for _ in range(5):
            off = rng.normal(size=4) * [0.3, 0.3, 0.1, 0.05]
            out = step(measured_at(traj, 4, Frame.FRONT, off), traj, 4, W, B, P)
            u = out.input.as_array()
            assert np.all(u >= P.u_lower - 1e-9) and np.all(u <= P.u_upper + 1e-9)


def test_lpv_equals_lti_when_schedule_constant():
    traj = straight()
    meas = measured_at(traj, 3, Frame.FRONT, (0.05, -0.2, 0.0, 0.0))
    a = lpv_mpc_step(meas, traj, 3, W, B, P)
    b = lti_mpc_step(meas, traj, 3, W, B, P)
    np.testing.assert_allclose(a.input.as_array(), b.input.as_array(), atol=1e-8)


def test_lti_prediction_differs_on_turns():
    traj = turning()
    meas = measured_at(traj, 3, Frame.FRONT, (0.05, -0.2, 0.02, 0.01))
    a = lpv_mpc_step(meas, traj, 3, W, B, P)
    b = lti_mpc_step(meas, traj, 3, W, B, P)
    np.testing.assert_array_equal(a.predicted_error[0], b.predicted_error[0])
    assert np.max(np.abs(a.predicted_error[2:] - b.predicted_error[2:])) > 1e-6


def _nl_lpv_gaps(v, frame):
    traj = turning(v)
    direction = np.array([0.3, -0.5, 0.2, 0.1])
    gaps = []
    for eps in (0.04, 0.02, 0.01):
        meas = measured_at(traj, 5, frame, eps * direction)
        lin = lpv_mpc_step(meas, traj, 5, W, B, P).input.as_array()
        out = nl_mpc_step(meas, traj, 5, W, B, P, solver=tight_sqp())
        assert out.status == "OPTIMAL"
        gaps.append(np.linalg.norm(out.input.as_array() - lin))
    return gaps


def test_nl_agrees_with_lpv_to_first_order_when_reversing():
    g = _nl_lpv_gaps(-1.0, Frame.REAR)
    for ratio in (g[0] / g[1], g[1] / g[2]):
        assert 3.2 <= ratio <= 4.8


@pytest.mark.xfail(strict=True, reason="FRONT-frame linear model uses the shared-speed front-axle equations, "
                   "which differ to first order from the rear-frame plant the NL controller predicts with")
def test_nl_agrees_with_lpv_to_first_order_when_driving_forward():
    g = _nl_lpv_gaps(1.0, Frame.FRONT)
    for ratio in (g[0] / g[1], g[1] / g[2]):
        assert 3.2 <= ratio <= 4.8


def test_nearest_index_examples():
    traj = straight(n=40)
    assert nearest_index(traj, traj.states[7, :2], Frame.REAR, 9, P) == 7
    assert nearest_index(traj, (1.03, 0.3), Frame.REAR, 5, P) == 5
    # monotone: never goes back below the previous index
    assert nearest_index(traj, (1.03, 0.3), Frame.REAR, 5, P, previous=8) == 8


def test_nearest_index_matches_bruteforce(rng):
    traj = turning(n=60)
    for frame in Frame:
        pts = traj.states_in(frame, P)
        for _ in range(200):
            hint = int(rng.integers(0, len(traj)))
            q = pts[hint, :2] + rng.normal(size=2) * 0.5
            lo, hi = max(0, hint - 5), min(len(traj) - 1, hint + 5)
            assert nearest_index(traj, q, frame, hint, P) == nearest_bruteforce(pts[:, :2], q, lo, hi)


class _FailingSolver:
    def solve(self, problem, z0=None):
        return QpSolution(np.zeros(problem.n), 0.0, QpStatus.INFEASIBLE, np.inf, 0,
                          np.zeros(0), np.zeros(problem.c_in.shape[0]))


def test_controller_error_when_qp_fails():
    traj = straight()
    with pytest.raises(ControllerError) as info:
        lpv_mpc_step(measured_at(traj, 0, Frame.FRONT), traj, 0, W, B, P, solver=_FailingSolver())
    assert info.value.status == "INFEASIBLE"
    assert "x_e0" in info.value.diagnostics


def test_state_box_violation_uses_slack():
    traj = straight()
    meas = measured_at(traj, 0, Frame.FRONT, (0.0, 1.5, 0.0, 0.0))
    out = lpv_mpc_step(meas, traj, 0, W, B, P)
    assert out.status == "SLACK"


def test_zero_error_at_direction_switch_in_both_frames(ref_legs):
    for leg in ref_legs:
        for k in leg.switches:
            for frame in Frame:
                for step in STEPS:
                    out = step(measured_at(leg, k, frame), leg, k, W, B, P)
                    np.testing.assert_array_equal(out.input.as_array(), leg.inputs[k])


def test_controller_wrapper_reuses_warm_start():
    traj = turning()
    ctrl = make_controller(ControllerKind.NL, W, B, P)
    first = ctrl.step(measured_at(traj, 3, Frame.FRONT, (0, 0.1, 0, 0)), traj, 3)
    assert ctrl._warm_key == (id(traj), 3)
    second = ctrl.step(measured_at(traj, 4, Frame.FRONT, (0, 0.08, 0, 0)), traj, 4)
    assert first.status == second.status == "OPTIMAL"
    ctrl.reset()
    assert ctrl._warm is None


@pytest.mark.parametrize("kwargs, word", [({"n": 0}, "horizon"), ({"ts": 0.0}, "ts"),
                                          ({"r": np.zeros((2, 2))}, "r must be positive definite"),
                                          ({"q": np.array([[1.0, 2.0], [0.0, 1.0]])}, "symmetric")])
def test_weight_validation(kwargs, word):
    with pytest.raises(ValueError, match=word):
        TrackingWeights(**kwargs)


def test_bounds_validation():
    with pytest.raises(ValueError, match="positive"):
        DeviationBounds(state_box=[1.0, 1.0, 0.0, 0.3])
