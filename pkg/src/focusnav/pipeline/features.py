"""Network inputs built from walker state and navigation command."""

from __future__ import annotations

import numpy as np

from ..world import NavigationCommand, WalkerState

TIME_SCALE = 25.0  # remaining time is divided by the longest episode budget
PROPRIO_DIM = 15
GOAL_DIM = 3


def proprio_vector(state: WalkerState, cmd: NavigationCommand) -> np.ndarray:
    """Body velocity (3), roll/pitch (2), angular rates (3), previous action (3), command (4)."""
    return np.array([
        state.vx, state.vy, state.vz,
        state.roll, state.pitch,
        state.wx, state.wy, state.wyaw,
        *state.prev_action,
        cmd.p_xy[0], cmd.p_xy[1], cmd.e_yaw, cmd.remaining / TIME_SCALE,
    ], dtype=np.float64)


def goal_vector(cmd: NavigationCommand) -> np.ndarray:
    """Robot-centric goal position and normalised remaining time."""
    return np.array([cmd.p_xy[0], cmd.p_xy[1], cmd.remaining / TIME_SCALE], dtype=np.float64)
