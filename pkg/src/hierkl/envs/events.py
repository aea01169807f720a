"""Line-delimited episode event logs (one JSON object per primitive step)."""

from __future__ import annotations

import json


class EventLog:
    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w")

    def record(self, episode: int, t: int, action, reward: float, done: bool, wall: bool | None = None):
        rec = {"episode": int(episode), "t": int(t), "action": _plain(action), "reward": float(reward),
               "done": bool(done)}
        if wall is not None:
            rec["wall"] = bool(wall)
        self._fh.write(json.dumps(rec) + "\n")

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _plain(action):
    try:
        return [float(a) for a in action]
    except TypeError:
        return int(action)


def read_events(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def episode_returns(path) -> dict[int, float]:
    """Undiscounted return per episode, summed from the log."""
    out: dict[int, float] = {}
    for rec in read_events(path):
        out[rec["episode"]] = out.get(rec["episode"], 0.0) + rec["reward"]
    return out
