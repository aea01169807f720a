"""Vectorised chains on a finite MDP with one-hot observations."""

from __future__ import annotations

import numpy as np

from ..oracles import TabularMDP
from ..policy import ObservationBundle


class TabularVecEnv:
    """N chains of a TabularMDP. There is no terminal state: episodes are
    truncated after ``cap`` steps (and bootstrapped) so that the start-state
    distribution keeps every state visited."""

    def __init__(self, mdp: TabularMDP, num: int, rng: np.random.Generator, cap: int = 50):
        self.mdp, self.num, self.rng, self.cap = mdp, num, rng, cap
        self.state = rng.integers(mdp.num_states, size=num)
        self.steps = np.zeros(num, dtype=np.int64)

    @property
    def obs_dims(self) -> dict[str, int]:
        return {"state": self.mdp.num_states}

    def _obs(self, s) -> ObservationBundle:
        return ObservationBundle({"state": np.eye(self.mdp.num_states)[s]})

    def observe(self) -> ObservationBundle:
        return self._obs(self.state)

    def step(self, actions):
        actions = np.asarray(actions, dtype=np.int64)
        r = self.mdp.r[self.state, actions]
        cdf = np.cumsum(self.mdp.P[self.state, actions], axis=-1)
        u = self.rng.random((self.num, 1))
        nxt = np.minimum((cdf < u).sum(-1), self.mdp.num_states - 1)
        self.steps += 1
        trunc = self.steps >= self.cap
        obs_after = self._obs(nxt)
        self.state = np.where(trunc, self.rng.integers(self.mdp.num_states, size=self.num), nxt)
        self.steps[trunc] = 0
        return r, np.zeros(self.num, dtype=bool), trunc, obs_after
