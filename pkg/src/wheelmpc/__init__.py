"""Trajectory planning and tracking MPC for an articulated wheel loader."""

from .vehicle import ControlInput, Frame, VehicleParams, VehicleState
from .trajectory import Trajectory

__all__ = ["ControlInput", "Frame", "VehicleParams", "VehicleState", "Trajectory"]
__version__ = "0.1.0"
