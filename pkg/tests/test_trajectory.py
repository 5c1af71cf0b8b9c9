import numpy as np
import pytest

from wheelmpc.trajectory import Trajectory, direction_switches, frame_tags, select_frame
from wheelmpc.vehicle import Frame, VehicleParams, rear_to_front_array


def test_select_frame_rules():
    assert select_frame(1.0, Frame.REAR) is Frame.FRONT
    assert select_frame(-1.0, Frame.FRONT) is Frame.REAR
    assert select_frame(0.0, Frame.FRONT) is Frame.FRONT
    assert select_frame(0.0, Frame.REAR) is Frame.REAR


def test_direction_switches_skip_rest_samples():
    v = [0.0, 1.0, 0.5, 0.0, 0.0, -0.3, -1.0, 0.0, 0.2]
    assert direction_switches(v) == [5, 8]


def test_frame_tags_hold_through_rest_and_start_with_first_motion():
    v = [0.0, 0.0, -1.0, 0.0, 1.0, 0.0]
    assert frame_tags(v) == [Frame.REAR, Frame.REAR, Frame.REAR, Frame.REAR, Frame.FRONT, Frame.FRONT]
    assert frame_tags([0.0, 0.0, 1.0])[0] is Frame.FRONT


def test_trajectory_requires_matching_rows():
    with pytest.raises(ValueError, match="same number of rows"):
        Trajectory(0.2, np.zeros((3, 4)), np.zeros((2, 2)))


def test_step_in_front_frame():
    p = VehicleParams()
    xs = np.array([[0.0, 0.0, 0.3, 0.1], [1.0, 0.0, 0.3, 0.1]])
    traj = Trajectory(0.2, xs, np.array([[1.0, 0.0], [1.0, 0.0]]))
    state, inp = traj.step(1, Frame.FRONT, p)
    np.testing.assert_allclose(state.as_array(), rear_to_front_array(xs[1], p))
    assert state.frame is Frame.FRONT
    assert inp.v == 1.0
    np.testing.assert_allclose(traj.times, [0.0, 0.2])
