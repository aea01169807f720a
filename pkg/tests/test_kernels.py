import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierkl import kernels
from hierkl._kernels_py import backward_accumulate as py_accumulate

needs_ext = pytest.mark.skipif("cython" not in kernels.BACKENDS, reason="compiled extension not built")

seeds = st.integers(0, 2 ** 32 - 1)


def test_backend_is_reported():
    assert kernels.BACKEND in kernels.BACKENDS


def test_accumulate_matches_loop():
    d = np.array([[1.0, 2.0, 3.0]])
    c = np.array([[0.5, 0.5, 0.5]])
    # acc2 = 3, acc1 = 2 + 0.5*3, acc0 = 1 + 0.5*3.5
    np.testing.assert_allclose(py_accumulate(d, c), [[2.75, 3.5, 3.0]])


def test_accumulate_shape_mismatch():
    with pytest.raises(ValueError):
        py_accumulate(np.zeros((2, 3)), np.zeros((2, 4)))


@needs_ext
@settings(max_examples=50, deadline=None)
@given(seeds, st.integers(1, 6), st.integers(1, 12))
def test_backends_agree_accumulate(seed, B, K):
    rng = np.random.default_rng(seed)
    d, c = rng.normal(size=(B, K)), rng.random((B, K))
    a = kernels.BACKENDS["python"].backward_accumulate(d, c)
    b = kernels.BACKENDS["cython"].backward_accumulate(d, c)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


@needs_ext
@settings(max_examples=30, deadline=None)
@given(seeds)
def test_backends_agree_elu_and_backup(seed):
    rng = np.random.default_rng(seed)
    z, g = rng.normal(size=(7, 5)) * 3, rng.normal(size=(7, 5))
    py, cy = kernels.BACKENDS["python"], kernels.BACKENDS["cython"]
    np.testing.assert_allclose(py.elu_forward(z), cy.elu_forward(z), rtol=0, atol=1e-14)
    np.testing.assert_allclose(py.elu_backward(z, g), cy.elu_backward(z, g), rtol=0, atol=1e-14)
    q = rng.normal(size=(4, 3)) * 10
    lp = np.log(rng.dirichlet(np.ones(3), size=4))
    for alpha in (0.01, 1.0):
        np.testing.assert_allclose(py.soft_backup(q, lp, alpha), cy.soft_backup(q, lp, alpha), rtol=1e-12)


@needs_ext
@settings(max_examples=30, deadline=None)
@given(seeds, st.integers(1, 4))
def test_backends_agree_grid(seed, n):
    rng = np.random.default_rng(seed)
    N = 16
    state = dict(agent=rng.integers(0, 8, (N, 2)), goal=rng.integers(0, 8, (N, 2)),
                 internal=rng.integers(-(n - 1), n, (N, 2)), steps=rng.integers(0, 400, N))
    acts = rng.integers(0, 4, N)
    active = (rng.random(N) > 0.2).astype(np.uint8)
    outs = []
    for b in ("python", "cython"):
        s = {k: v.astype(np.int64).copy() for k, v in state.items()}
        res = kernels.BACKENDS[b].grid_step_batch(s["agent"], s["goal"], s["internal"], s["steps"], acts, active,
                                                  n, 8, 400, 1.0, 0.1, 0.2)
        outs.append((s, [np.asarray(r) for r in res]))
    (s0, r0), (s1, r1) = outs
    for k in s0:
        np.testing.assert_array_equal(s0[k], s1[k])
    for a, b in zip(r0, r1):
        np.testing.assert_array_equal(a.astype(float), b.astype(float))
