import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierkl.errors import ConfigError, ConvergenceError
from hierkl.oracles import (TabularMDP, discount_identity_check, discount_identity_sides, finite_diff_check,
                            marginal_kl_enumeration, random_latent_model, random_mdp, soft_value_iteration,
                            soft_vi_residual)

seeds = st.integers(0, 2 ** 32 - 1)


def test_soft_vi_single_state_closed_form(backend):
    mdp = TabularMDP(np.ones((1, 2, 1)), np.array([[1.0, 0.0]]), 0.0, np.full((1, 2), 0.5))
    Q, V, pi = soft_value_iteration(mdp, 1.0)
    np.testing.assert_allclose(Q, [[1.0, 0.0]], atol=1e-14)
    assert V[0] == pytest.approx(np.log((np.e + 1) / 2), abs=1e-14)
    assert pi[0, 0] == pytest.approx(np.e / (np.e + 1), abs=1e-14)


def test_soft_vi_zero_reward_returns_prior(rng):
    mdp = random_mdp(rng, 4, 3)
    mdp = TabularMDP(mdp.P, np.zeros_like(mdp.r), mdp.gamma, mdp.pi0)
    Q, V, pi = soft_value_iteration(mdp, 0.7)
    np.testing.assert_allclose(V, 0.0, atol=1e-12)
    np.testing.assert_allclose(pi, mdp.pi0, atol=1e-12)


@settings(max_examples=15, deadline=None)
@given(seeds)
def test_soft_vi_fixpoint(seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, 5, 3, gamma=0.9, pi0=rng.dirichlet(np.ones(3), size=5))
    Q, V, pi = soft_value_iteration(mdp, 0.5)
    assert soft_vi_residual(mdp, 0.5, Q, V) < 1e-8
    np.testing.assert_allclose(pi.sum(1), 1.0, atol=1e-12)


def test_soft_vi_large_alpha_approaches_prior(rng):
    mdp = random_mdp(rng, 5, 3)
    tv = [0.5 * np.abs(soft_value_iteration(mdp, a)[2] - mdp.pi0).sum(1).max() for a in (1.0, 10.0, 100.0)]
    assert tv[0] > tv[1] > tv[2] and tv[2] < 0.01


def test_soft_vi_iteration_cap(rng):
    with pytest.raises(ConvergenceError):
        soft_value_iteration(random_mdp(rng, 5, 3, gamma=0.99), 0.5, max_iter=3)


def test_mdp_validation():
    with pytest.raises(ConfigError):
        TabularMDP(np.full((1, 2, 1), 0.9), np.zeros((1, 2)), 0.5, np.full((1, 2), 0.5))
    with pytest.raises(ConfigError):
        TabularMDP(np.ones((1, 2, 1)), np.zeros((1, 2)), 1.0, np.full((1, 2), 0.5))


def test_marginal_kl_identical_models(rng):
    m = random_latent_model(rng, 3, 4)
    exact, bound = marginal_kl_enumeration(m, m)
    assert exact == pytest.approx(0.0, abs=1e-15) and bound == pytest.approx(0.0, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(1, 5), st.integers(1, 5))
def test_marginal_kl_bound_holds(seed, nz, na):
    rng = np.random.default_rng(seed)
    exact, bound = marginal_kl_enumeration(random_latent_model(rng, nz, na), random_latent_model(rng, nz, na))
    assert bound >= exact - 1e-9


def test_marginal_kl_degenerate_latent_is_tight(rng):
    (pz, paz), (_, qaz) = random_latent_model(rng, 1, 5), random_latent_model(rng, 1, 5)
    exact, bound = marginal_kl_enumeration((pz, paz), (pz, qaz))
    assert bound == pytest.approx(exact, abs=1e-12)


def test_marginal_kl_rejects_bad_tables():
    with pytest.raises(ConfigError):
        marginal_kl_enumeration((np.array([0.5, 0.6]), np.full((2, 2), 0.5)), (np.array([0.5, 0.5]),
                                                                                np.full((2, 2), 0.5)))


def test_discount_identity_hand_example():
    lhs, rhs = discount_identity_sides([1.0, 1.0, 1.0], 0.5)
    assert lhs == pytest.approx(0.875, abs=1e-15) and rhs == pytest.approx(0.875, abs=1e-15)
    assert discount_identity_sides([3.0, -1.0], 0.0) == (0.0, 0.0)


@settings(max_examples=100, deadline=None)
@given(seeds, st.integers(1, 100), st.floats(0.01, 0.99))
def test_discount_identity_random(seed, T, gamma):
    a = np.random.default_rng(seed).normal(size=T)
    assert discount_identity_check(a, gamma)


def test_finite_diff_quadratic():
    A = np.array([[2.0, 1.0], [1.0, 3.0]])
    x = np.array([0.3, -0.7])
    assert finite_diff_check(lambda v: float(v @ A @ v), x, grad=2 * A @ x) < 1e-9
    assert finite_diff_check(lambda v: float(v @ A @ v), x, grad=A @ x) > 0.1
