# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Signatures mirror ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, expm1

cnp.import_array()


def elu_forward(z):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] zf = np.ascontiguousarray(z, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(zf)
    cdef Py_ssize_t i, n = zf.shape[0]
    cdef double v
    for i in range(n):
        v = zf[i]
        out[i] = v if v > 0.0 else expm1(v)
    return out.reshape(np.shape(z))


def elu_backward(z, g):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] zf = np.ascontiguousarray(z, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] gf = np.ascontiguousarray(g, dtype=np.float64).ravel()
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(zf)
    cdef Py_ssize_t i, n = zf.shape[0]
    cdef double v
    for i in range(n):
        v = zf[i]
        out[i] = gf[i] if v > 0.0 else gf[i] * exp(v)
    return out.reshape(np.shape(z))


def backward_accumulate(deltas, coef):
    """acc[:, k] = deltas[:, k] + coef[:, k] * acc[:, k + 1], with acc[:, K] = 0."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] d = np.ascontiguousarray(np.atleast_2d(deltas), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] c = np.ascontiguousarray(np.atleast_2d(coef), dtype=np.float64)
    cdef Py_ssize_t b, k, nb = d.shape[0], nk = d.shape[1]
    if c.shape[0] != nb or c.shape[1] != nk:
        raise ValueError("deltas and coef must have the same shape")
    cdef cnp.ndarray[cnp.float64_t, ndim=2] acc = np.empty((nb, nk), dtype=np.float64)
    cdef double run
    for b in range(nb):
        run = 0.0
        for k in range(nk - 1, -1, -1):
            run = d[b, k] + c[b, k] * run
            acc[b, k] = run
    return acc.reshape(np.shape(deltas))


def soft_backup(q, log_pi0, double alpha):
    """Row-wise alpha * log sum_a pi0(a|s) exp(q(s, a) / alpha), max-shifted."""
    cdef cnp.ndarray[cnp.float64_t, ndim=2] Q = np.ascontiguousarray(q, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] L = np.ascontiguousarray(log_pi0, dtype=np.float64)
    cdef Py_ssize_t s, a, ns = Q.shape[0], na = Q.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(ns, dtype=np.float64)
    cdef double m, acc, v
    for s in range(ns):
        m = -1e308
        for a in range(na):
            v = Q[s, a] / alpha + L[s, a]
            if v > m:
                m = v
        acc = 0.0
        for a in range(na):
            acc += exp(Q[s, a] / alpha + L[s, a] - m)
        out[s] = alpha * (m + log(acc))
    return out


def grid_step_batch(cnp.int64_t[:, ::1] agent, cnp.int64_t[:, ::1] goal,
                    cnp.int64_t[:, ::1] internal, cnp.int64_t[::1] steps,
                    cnp.int64_t[::1] actions, cnp.uint8_t[::1] active,
                    int n, int size, int cap, double goal_reward,
                    double step_penalty, double wall_penalty):
    """Advance every active grid episode by one primitive action, in place.

    Returns (reward, reached, truncated, wall_hit) arrays of length N.
    """
    cdef Py_ssize_t i, N = agent.shape[0]
    cdef int axis, sign, lim = n - 1
    cdef long pos, act
    cdef cnp.ndarray[cnp.float64_t, ndim=1] reward = np.zeros(N, dtype=np.float64)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] reached = np.zeros(N, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] truncated = np.zeros(N, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] wall = np.zeros(N, dtype=np.uint8)
    cdef double r
    for i in range(N):
        if not active[i]:
            continue
        act = actions[i]
        if act == 0:
            axis = 1; sign = 1
        elif act == 1:
            axis = 1; sign = -1
        elif act == 2:
            axis = 0; sign = -1
        elif act == 3:
            axis = 0; sign = 1
        else:
            raise ValueError("grid action must be in 0..3")
        r = -step_penalty
        internal[i, axis] += sign
        if internal[i, axis] > lim or internal[i, axis] < -lim:
            internal[i, axis] = 0
            pos = agent[i, axis] + sign
            if pos < 0 or pos >= size:
                r -= wall_penalty
                wall[i] = 1
            else:
                agent[i, axis] = pos
        steps[i] += 1
        if agent[i, 0] == goal[i, 0] and agent[i, 1] == goal[i, 1]:
            r += goal_reward
            reached[i] = 1
        elif steps[i] >= cap:
            truncated[i] = 1
        reward[i] = r
    return reward, reached.astype(bool), truncated.astype(bool), wall.astype(bool)
