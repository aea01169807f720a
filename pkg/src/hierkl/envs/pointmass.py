"""2-D point-mass analogs of the locomotion and manipulation tasks.

The body is a disc with a heading: action[0] drives forward/backward along
the heading, action[1] turns. Kinematics only, no dynamics. A box, when
present, is an axis-aligned square pushed out of the way by the minimal
penetration of the agent disc.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import ConfigError, EpisodeDoneError
from ..policy import ObservationBundle

TASKS = ("goto", "movebox", "and")


@dataclass(frozen=True)
class PointMassConfig:
    task: str = "goto"
    n_targets: int = 3
    arena: float | None = None  # half-extent; defaults by task
    k_fwd: float = 0.05
    k_turn: float = 0.2
    target_radius: float = 0.3
    agent_radius: float = 0.1
    box_half: float = 0.15
    cap: int = 400
    success_reward: float = 60.0
    subtask_reward: float = 10.0
    bonus_reward: float = 50.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.n_targets < 1:
            raise ConfigError("need at least one target")
        if self.arena is None:
            object.__setattr__(self, "arena", 4.0 if self.task == "goto" else 1.5)

    @property
    def has_box(self) -> bool:
        return self.task in ("movebox", "and")

    @property
    def obs_dims(self) -> dict[str, int]:
        task = 3 * self.n_targets + (2 if self.has_box else 0)
        return {"proprio": 4, "task": task}


@dataclass
class PointMassState:
    pos: np.ndarray
    heading: float
    targets: np.ndarray
    selected: int
    box: np.ndarray | None = None
    box_target: int = 0
    steps: int = 0
    done: bool = False
    reached: bool = False
    goal_done: bool = False
    box_done: bool = False

    def copy(self) -> "PointMassState":
        return replace(self, pos=self.pos.copy(), targets=self.targets.copy(),
                       box=None if self.box is None else self.box.copy())


def wrap_angle(theta: float) -> float:
    """Map to (-pi, pi]."""
    out = np.pi - np.mod(np.pi - theta, 2.0 * np.pi)
    return float(out)


def pm_reset(cfg: PointMassConfig, rng: np.random.Generator) -> PointMassState:
    lim = cfg.arena - 0.5
    for _ in range(1000):
        pos = rng.uniform(-lim, lim, size=2)
        targets = rng.uniform(-lim, lim, size=(cfg.n_targets, 2))
        if np.min(np.linalg.norm(targets - pos, axis=1)) > 3 * cfg.target_radius:
            break
    selected = int(rng.integers(cfg.n_targets))
    box, box_target = None, 0
    if cfg.has_box:
        box_target = selected if cfg.task == "movebox" else (selected + 1) % cfg.n_targets
        for _ in range(1000):
            box = rng.uniform(-lim + 0.2, lim - 0.2, size=2)
            if (np.linalg.norm(box - pos) > 3 * cfg.box_half
                    and np.linalg.norm(box - targets[box_target]) > 2 * cfg.target_radius):
                break
    heading = float(rng.uniform(-np.pi, np.pi))
    return PointMassState(pos, wrap_angle(heading), targets, selected, box, box_target)


def _push_box(cfg: PointMassConfig, pos, box):
    """Displace the box by the agent's penetration along the minimal axis."""
    d = box - pos
    reach = cfg.agent_radius + cfg.box_half
    pen = reach - np.abs(d)
    if np.all(pen > 0):
        axis = int(np.argmin(pen))
        box = box.copy()
        box[axis] += np.sign(d[axis]) * pen[axis] if d[axis] != 0 else pen[axis]
        lim = cfg.arena - cfg.box_half
        box = np.clip(box, -lim, lim)
    return box


def pm_observation(cfg: PointMassConfig, state: PointMassState) -> ObservationBundle:
    c, s = np.cos(state.heading), np.sin(state.heading)
    rot = np.array([[c, s], [-s, c]])

    def ego(p):
        return rot @ (np.asarray(p) - state.pos)

    task = [ego(t) for t in state.targets]
    onehot = np.zeros(cfg.n_targets)
    onehot[state.selected] = 1.0
    parts = [np.concatenate(task) / cfg.arena, onehot]
    if cfg.has_box:
        parts.append(ego(state.box) / cfg.arena)
    proprio = np.array([c, s, state.pos[0] / cfg.arena, state.pos[1] / cfg.arena])
    return ObservationBundle({"proprio": proprio, "task": np.concatenate(parts)})


def pm_step(cfg: PointMassConfig, state: PointMassState, action):
    """Returns ``(new_state, reward, done, obs)``; deterministic in (state, action)."""
    if state.done:
        raise EpisodeDoneError("point-mass episode already finished; call pm_reset")
    a = np.clip(np.asarray(action, dtype=np.float64).reshape(2), -1.0, 1.0)
    s = state.copy()
    s.heading = wrap_angle(s.heading + cfg.k_turn * a[1])
    step = cfg.k_fwd * a[0] * np.array([np.cos(s.heading), np.sin(s.heading)])
    lim = cfg.arena - cfg.agent_radius
    s.pos = np.clip(s.pos + step, -lim, lim)
    if s.box is not None:
        s.box = _push_box(cfg, s.pos, s.box)
    s.steps += 1
    reward = 0.0
    at_goal = np.linalg.norm(s.pos - s.targets[s.selected]) <= cfg.target_radius
    box_on = s.box is not None and np.linalg.norm(s.box - s.targets[s.box_target]) <= cfg.target_radius
    if cfg.task == "goto" and at_goal:
        reward, s.reached = cfg.success_reward, True
    elif cfg.task == "movebox" and box_on:
        reward, s.reached = cfg.success_reward, True
    elif cfg.task == "and":
        if at_goal and not s.goal_done:
            s.goal_done = True
            reward += cfg.subtask_reward
        if box_on and not s.box_done:
            s.box_done = True
            reward += cfg.subtask_reward
        if s.goal_done and s.box_done:
            reward += cfg.bonus_reward
            s.reached = True
    s.done = s.reached or s.steps >= cfg.cap
    return s, float(reward), s.done, pm_observation(cfg, s)


class PointMassVecEnv:
    """N point-mass episodes with automatic reset; same interface as GridVecEnv."""

    def __init__(self, cfg: PointMassConfig, num: int, rng: np.random.Generator):
        self.cfg, self.num, self.rng = cfg, num, rng
        self.states = [pm_reset(cfg, rng) for _ in range(num)]

    def observe(self) -> ObservationBundle:
        return ObservationBundle.stack([pm_observation(self.cfg, s) for s in self.states])

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.float64)
        r = np.zeros(self.num)
        reached = np.zeros(self.num, dtype=bool)
        trunc = np.zeros(self.num, dtype=bool)
        obs = []
        for i, s in enumerate(self.states):
            s2, r[i], done, o = pm_step(self.cfg, s, actions[i])
            obs.append(o)
            reached[i] = s2.reached
            trunc[i] = done and not s2.reached
            self.states[i] = pm_reset(self.cfg, self.rng) if done else s2
        return r, reached, trunc, ObservationBundle.stack(obs)
