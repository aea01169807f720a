"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np


def elu_forward(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z > 0.0, z, np.expm1(np.minimum(z, 0.0)))


def elu_backward(z, g):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z > 0.0, g, g * np.exp(np.minimum(z, 0.0)))


def backward_accumulate(deltas, coef):
    """acc[:, k] = deltas[:, k] + coef[:, k] * acc[:, k + 1], with acc[:, K] = 0."""
    d = np.atleast_2d(np.asarray(deltas, dtype=np.float64))
    c = np.atleast_2d(np.asarray(coef, dtype=np.float64))
    if d.shape != c.shape:
        raise ValueError("deltas and coef must have the same shape")
    acc = np.empty_like(d)
    run = np.zeros(d.shape[0])
    for k in range(d.shape[1] - 1, -1, -1):
        run = d[:, k] + c[:, k] * run
        acc[:, k] = run
    return acc.reshape(np.shape(deltas))


def soft_backup(q, log_pi0, alpha):
    """Row-wise alpha * log sum_a pi0(a|s) exp(q(s, a) / alpha), max-shifted."""
    v = np.asarray(q, dtype=np.float64) / alpha + np.asarray(log_pi0, dtype=np.float64)
    m = v.max(axis=1)
    return alpha * (m + np.log(np.exp(v - m[:, None]).sum(axis=1)))


_MOVES = {0: (1, 1), 1: (1, -1), 2: (0, -1), 3: (0, 1)}


def grid_step_batch(agent, goal, internal, steps, actions, active, n, size, cap,
                    goal_reward, step_penalty, wall_penalty):
    """Advance every active grid episode by one primitive action, in place.

    Returns (reward, reached, truncated, wall_hit) arrays of length N.
    """
    N = agent.shape[0]
    reward = np.zeros(N)
    reached = np.zeros(N, dtype=bool)
    truncated = np.zeros(N, dtype=bool)
    wall = np.zeros(N, dtype=bool)
    lim = n - 1
    for i in range(N):
        if not active[i]:
            continue
        act = int(actions[i])
        if act not in _MOVES:
            raise ValueError("grid action must be in 0..3")
        axis, sign = _MOVES[act]
        r = -step_penalty
        internal[i, axis] += sign
        if internal[i, axis] > lim or internal[i, axis] < -lim:
            internal[i, axis] = 0
            pos = agent[i, axis] + sign
            if pos < 0 or pos >= size:
                r -= wall_penalty
                wall[i] = True
            else:
                agent[i, axis] = pos
        steps[i] += 1
        if agent[i, 0] == goal[i, 0] and agent[i, 1] == goal[i, 1]:
            r += goal_reward
            reached[i] = True
        elif steps[i] >= cap:
            truncated[i] = True
        reward[i] = r
    return reward, reached, truncated, wall
