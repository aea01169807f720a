from .events import EventLog, episode_returns, read_events
from .grid import (MOVES, GridAction, GridConfig, GridState, GridVecEnv, grid_observation, grid_reset,
                   grid_step)
from .pointmass import (PointMassConfig, PointMassState, PointMassVecEnv, pm_observation, pm_reset, pm_step,
                        wrap_angle)
from .tabular import TabularVecEnv

__all__ = [
    "EventLog", "episode_returns", "read_events", "MOVES", "GridAction", "GridConfig", "GridState",
    "GridVecEnv", "grid_observation", "grid_reset", "grid_step", "PointMassConfig", "PointMassState",
    "PointMassVecEnv", "pm_observation", "pm_reset", "pm_step", "wrap_angle", "TabularVecEnv",
]
