"""Rotation-averaging SLAM back-end: relative rotations, robust rotation
averaging with certified pruning, l1 translation averaging and loop closure."""

from .backend import Backend, BackendConfig, Frame
from .evaluate import Trajectory, evaluate_rmse
from .geometry import CameraIntrinsics, Pose
from .rotavg import RotAvgParams, RotEdge, RotGraph, rotation_averaging
from .simulate import SceneSpec, simulate_scene
from .transavg import AdmmParams, admm_solve, translation_averaging

__version__ = "0.1.0"

__all__ = [
    "AdmmParams", "Backend", "BackendConfig", "CameraIntrinsics", "Frame", "Pose", "RotAvgParams",
    "RotEdge", "RotGraph", "SceneSpec", "Trajectory", "admm_solve", "evaluate_rmse",
    "rotation_averaging", "simulate_scene", "translation_averaging",
]
