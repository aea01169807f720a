"""Go-to-target grid world with n-step bodies.

A body with step size n keeps a 2-D internal coordinate in [-(n-1), n-1]^2.
Each primitive action nudges one internal axis; only when that axis would
leave its range does the agent attempt a one-cell move, and the axis resets
to zero. With n = 1 every action is an immediate move.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .. import kernels
from ..errors import ConfigError, EpisodeDoneError
from ..policy import ObservationBundle


class GridAction(enum.IntEnum):
    UP = 0
    DOWN = 1
    LEFT = 2
    RIGHT = 3


# (dx, dy) per action, matching the kernel's axis/sign table
MOVES = {GridAction.UP: (0, 1), GridAction.DOWN: (0, -1), GridAction.LEFT: (-1, 0), GridAction.RIGHT: (1, 0)}


@dataclass(frozen=True)
class GridConfig:
    size: int = 8
    goal_reward: float = 1.0
    step_penalty: float = 0.1
    wall_penalty: float = 0.2
    cap: int = 400
    n: int = 1

    def __post_init__(self):
        if self.size < 2 or self.n < 1 or self.cap < 1:
            raise ConfigError("grid needs size >= 2, body step n >= 1 and cap >= 1")

    @property
    def obs_dims(self) -> dict[str, int]:
        return {"global": 4, "internal": 2}


@dataclass
class GridState:
    agent: np.ndarray
    goal: np.ndarray
    internal: np.ndarray = field(default_factory=lambda: np.zeros(2, dtype=np.int64))
    steps: int = 0
    done: bool = False
    reached: bool = False

    def copy(self) -> "GridState":
        return replace(self, agent=self.agent.copy(), goal=self.goal.copy(), internal=self.internal.copy())


def grid_reset(cfg: GridConfig, rng: np.random.Generator) -> GridState:
    """Uniform agent and goal cells with agent != goal."""
    cells = cfg.size * cfg.size
    a = int(rng.integers(cells))
    g = int(rng.integers(cells - 1))
    g = g + 1 if g >= a else g
    agent = np.array([a % cfg.size, a // cfg.size], dtype=np.int64)
    goal = np.array([g % cfg.size, g // cfg.size], dtype=np.int64)
    return GridState(agent, goal)


def grid_observation(cfg: GridConfig, agent, goal, internal) -> ObservationBundle:
    """Works on single states or batches (leading axes)."""
    scale = float(cfg.size - 1)
    agent = np.asarray(agent, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    internal = np.asarray(internal, dtype=np.float64)
    inner = internal / (cfg.n - 1) if cfg.n > 1 else np.zeros_like(internal)
    return ObservationBundle({"global": np.concatenate([agent / scale, goal / scale], axis=-1), "internal": inner})


def grid_step(cfg: GridConfig, state: GridState, action: int):
    """Returns ``(new_state, reward, done, obs)``; the input state is untouched."""
    if state.done:
        raise EpisodeDoneError("grid episode already finished; call grid_reset")
    act = int(action)
    if act not in (0, 1, 2, 3):
        raise ConfigError(f"grid action must be 0..3, got {action}")
    s = state.copy()
    agent, goal, internal = s.agent[None].copy(), s.goal[None].copy(), s.internal[None].copy()
    steps = np.array([s.steps], dtype=np.int64)
    r, reached, trunc, _ = kernels.grid_step_batch(agent, goal, internal, steps, np.array([act], dtype=np.int64),
                                                   np.ones(1, dtype=np.uint8), cfg.n, cfg.size, cfg.cap,
                                                   cfg.goal_reward, cfg.step_penalty, cfg.wall_penalty)
    s.agent, s.internal, s.steps = agent[0], internal[0], int(steps[0])
    s.reached = bool(reached[0])
    s.done = bool(reached[0] or trunc[0])
    return s, float(r[0]), s.done, grid_observation(cfg, s.agent, s.goal, s.internal)


class GridVecEnv:
    """N independent grid episodes stepped together; finished episodes reset
    automatically on the next ``step``."""

    def __init__(self, cfg: GridConfig, num: int, rng: np.random.Generator):
        self.cfg, self.num, self.rng = cfg, num, rng
        self.agent = np.zeros((num, 2), dtype=np.int64)
        self.goal = np.zeros((num, 2), dtype=np.int64)
        self.internal = np.zeros((num, 2), dtype=np.int64)
        self.steps = np.zeros(num, dtype=np.int64)
        for i in range(num):
            self._reset(i)

    def _reset(self, i: int):
        s = grid_reset(self.cfg, self.rng)
        self.agent[i], self.goal[i] = s.agent, s.goal
        self.internal[i] = 0
        self.steps[i] = 0

    def observe(self) -> ObservationBundle:
        return grid_observation(self.cfg, self.agent, self.goal, self.internal)

    def step(self, actions):
        """Advance all episodes. Returns ``(reward, reached, truncated, obs_after)``
        where ``obs_after`` is the observation reached by the step (before any
        reset). Finished episodes are reset in place afterwards."""
        actions = np.asarray(actions, dtype=np.int64)
        active = np.ones(self.num, dtype=np.uint8)
        r, reached, trunc, _ = kernels.grid_step_batch(self.agent, self.goal, self.internal, self.steps, actions,
                                                       active, self.cfg.n, self.cfg.size, self.cfg.cap,
                                                       self.cfg.goal_reward, self.cfg.step_penalty,
                                                       self.cfg.wall_penalty)
        obs_after = self.observe()
        for i in np.flatnonzero(reached | trunc):
            self._reset(i)
        return r, reached, trunc, obs_after
