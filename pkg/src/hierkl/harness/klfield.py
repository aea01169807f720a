"""KL-reward field of a pretrained HL policy/default pair on the grid world.

For each cell and direction, the field holds the negative KL the agent would
pay at the destination cell, KL(pi^H(.|x') || pi0^H(.|z_prev)), where z_prev
is drawn from the HL policy at the current cell.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..distributions import DiagGaussian, kl_diag_gaussian
from ..envs import MOVES, GridAction, GridConfig, grid_observation
from ..errors import ConfigError
from ..policy import AR1, ARLearned, IsoGaussian, PolicyStack, default_hl_step, hl_distribution

FIELD_HEADER = ("x", "y", "action", "dest_x", "dest_y", "kl_reward")


def destination(cfg: GridConfig, cell, action: int):
    dx, dy = MOVES[GridAction(action)]
    x, y = cell[0] + dx, cell[1] + dy
    if not (0 <= x < cfg.size and 0 <= y < cfg.size):
        return tuple(cell)
    return (x, y)


def _hl_at(stack: PolicyStack, cfg: GridConfig, cells: np.ndarray, goal) -> DiagGaussian:
    goal = np.broadcast_to(np.asarray(goal), cells.shape)
    obs = grid_observation(cfg, cells, goal, np.zeros_like(cells))
    return hl_distribution(stack, obs)


def kl_field(stack: PolicyStack, cfg: GridConfig, goal, samples: int = 256,
             rng: np.random.Generator | None = None) -> np.ndarray:
    """Array ``(size, size, 4)`` of expected negative KL, indexed ``[x, y, action]``."""
    if not stack.hierarchical or stack.action_space.n != 4 or "global" not in stack.obs_dims:
        raise ConfigError("the KL field needs a hierarchical grid-world stack")
    rng = rng if rng is not None else np.random.default_rng(0)
    n = cfg.size
    cells = np.array([(x, y) for x in range(n) for y in range(n)], dtype=np.int64)
    here = _hl_at(stack, cfg, cells, goal)
    out = np.zeros((n, n, 4))
    for a in range(4):
        dest = np.array([destination(cfg, c, a) for c in cells], dtype=np.int64)
        there = _hl_at(stack, cfg, dest, goal)
        prior = stack.prior
        if isinstance(prior, IsoGaussian):
            kl = kl_diag_gaussian(there, default_hl_step(prior, here.mean))
        elif isinstance(prior, AR1):
            # E_{z ~ pi^H(x)} KL(N(m, s^2) || N(a z, sig^2)) in closed form
            s2, sig2 = there.std ** 2, prior.stddev ** 2
            mean_term = (there.mean - prior.alpha * here.mean) ** 2 + prior.alpha ** 2 * here.std ** 2
            kl = np.sum(np.log(prior.stddev / there.std) + (s2 + mean_term) / (2.0 * sig2) - 0.5, axis=-1)
        elif isinstance(prior, ARLearned):
            eps = rng.standard_normal((samples,) + here.mean.shape)
            z_prev = here.mean + here.std * eps
            p0 = default_hl_step(prior, z_prev, stack.params["default_hl"])
            rep = DiagGaussian(np.broadcast_to(there.mean, z_prev.shape), np.broadcast_to(there.std, z_prev.shape))
            kl = kl_diag_gaussian(rep, p0).mean(axis=0)
        else:
            raise ConfigError(f"unsupported prior {prior!r}")
        out[cells[:, 0], cells[:, 1], a] = -kl
    return out


def field_rows(field: np.ndarray, cfg: GridConfig):
    n = field.shape[0]
    for x in range(n):
        for y in range(n):
            for a in range(4):
                dx, dy = destination(cfg, (x, y), a)
                yield (x, y, GridAction(a).name, dx, dy, float(field[x, y, a]))


def write_field(path, field: np.ndarray, cfg: GridConfig) -> int:
    rows = list(field_rows(field, cfg))
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(FIELD_HEADER)
        for r in rows:
            w.writerow(r[:5] + (f"{r[5]:.10g}",))
    return len(rows)


def goal_directed_fraction(field: np.ndarray, cfg: GridConfig, goal) -> float:
    """Share of non-goal cells whose highest-KL-reward action strictly reduces
    the Manhattan distance to ``goal``."""
    n = field.shape[0]
    good = total = 0
    for x in range(n):
        for y in range(n):
            if (x, y) == tuple(goal):
                continue
            total += 1
            best = int(np.argmax(field[x, y]))
            d0 = abs(x - goal[0]) + abs(y - goal[1])
            dx, dy = destination(cfg, (x, y), best)
            good += (abs(dx - goal[0]) + abs(dy - goal[1])) < d0
    return good / total
