"""Independent reference computations used to check the learners and estimators.

None of these share code paths with the estimators they check, except where
noted: the Retrace/V-trace expansions are direct double loops, soft value
iteration is a plain fixpoint iteration, and the Gaussian KL is integrated
numerically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from . import distributions, kernels, objectives
from .errors import ConfigError, ConvergenceError, HierKLError

SOFT_VI_MAX_ITER = 100_000


@dataclass(frozen=True)
class TabularMDP:
    P: np.ndarray      # (S, A, S) transition probabilities
    r: np.ndarray      # (S, A) rewards
    gamma: float
    pi0: np.ndarray    # (S, A) default policy

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        pi0 = np.asarray(self.pi0, dtype=np.float64)
        S, A = r.shape
        if P.shape != (S, A, S) or pi0.shape != (S, A):
            raise ConfigError("transition, reward and default tables disagree on (S, A)")
        if np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1.0)) > 1e-12:
            raise ConfigError("transition rows must be distributions (sum to 1 within 1e-12)")
        if np.any(pi0 < 0) or np.max(np.abs(pi0.sum(-1) - 1.0)) > 1e-12:
            raise ConfigError("default policy rows must sum to 1")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError("discount must lie in [0, 1)")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "pi0", pi0)

    @property
    def num_states(self) -> int:
        return self.r.shape[0]

    @property
    def num_actions(self) -> int:
        return self.r.shape[1]


def random_mdp(rng: np.random.Generator, num_states: int = 5, num_actions: int = 3, gamma: float = 0.9,
               pi0=None) -> TabularMDP:
    P = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
    P /= P.sum(-1, keepdims=True)
    r = rng.uniform(0.0, 1.0, size=(num_states, num_actions))
    if pi0 is None:
        pi0 = np.full((num_states, num_actions), 1.0 / num_actions)
    return TabularMDP(P, r, gamma, pi0)


def soft_value_iteration(mdp: TabularMDP, alpha: float, tol: float = 1e-10, max_iter: int = SOFT_VI_MAX_ITER):
    """Fixpoint of V = alpha log sum_a pi0 exp(Q / alpha), Q = r + gamma P V.

    Returns ``(Q, V, pi)`` with pi = pi0 exp((Q - V) / alpha).
    """
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    with np.errstate(divide="ignore"):
        log_pi0 = np.log(mdp.pi0)
    V = np.zeros(mdp.num_states)
    for _ in range(int(max_iter)):
        Q = mdp.r + mdp.gamma * mdp.P @ V
        V_new = kernels.soft_backup(Q, log_pi0, alpha)
        if np.max(np.abs(V_new - V)) < tol:
            V = V_new
            break
        V = V_new
    else:
        raise ConvergenceError(f"soft value iteration did not converge in {max_iter} iterations")
    Q = mdp.r + mdp.gamma * mdp.P @ V
    V = kernels.soft_backup(Q, log_pi0, alpha)
    pi = mdp.pi0 * np.exp((Q - V[:, None]) / alpha)
    return Q, V, pi


def soft_vi_residual(mdp: TabularMDP, alpha: float, Q, V) -> float:
    """sup-norm of V - alpha log sum pi0 exp(Q / alpha) with Q recomputed from V."""
    Qv = mdp.r + mdp.gamma * mdp.P @ V
    with np.errstate(divide="ignore"):
        lp0 = np.log(mdp.pi0)
    m = (Qv / alpha + lp0).max(axis=1)
    backup = alpha * (m + np.log(np.sum(mdp.pi0 * np.exp(Qv / alpha - m[:, None]), axis=1)))
    return float(max(np.max(np.abs(V - backup)), np.max(np.abs(Q - Qv))))


# ---------------------------------------------------------------------------
# latent-variable KL bound


def _check_table(name, t, axis=-1):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(np.abs(t.sum(axis) - 1.0) > 1e-9):
        raise ConfigError(f"{name} must be a probability table")
    return t


def marginal_kl_enumeration(model_pi, model_pi0):
    """Exact KL between the action marginals and the decomposed bound.

    Each model is ``(p_z, p_a_given_z)`` with shapes (Z,) and (Z, A). Returns
    ``(exact, bound)``; raises if the bound falls below the exact value by
    more than 1e-9.
    """
    pz, paz = (_check_table("p(z)", model_pi[0]), _check_table("p(a|z)", model_pi[1]))
    qz, qaz = (_check_table("p0(z)", model_pi0[0]), _check_table("p0(a|z)", model_pi0[1]))
    if pz.shape != qz.shape or paz.shape != qaz.shape or paz.shape[0] != pz.shape[0]:
        raise ConfigError("models must share latent and action supports")
    # exact: direct enumeration of the marginals
    pa = pz @ paz
    qa = qz @ qaz
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pa > 0, pa * (np.log(pa) - np.log(qa)), 0.0)
    exact = float(np.sum(terms))
    # bound: the package's categorical KL on each factor
    kl_z = distributions.kl_categorical(distributions.CategoricalDist(_safe_log(pz)),
                                        distributions.CategoricalDist(_safe_log(qz)))
    kl_az = distributions.kl_categorical(distributions.CategoricalDist(_safe_log(paz)),
                                         distributions.CategoricalDist(_safe_log(qaz)))
    bound = objectives.kl_decomposition_bound(float(kl_z), float(pz @ kl_az))
    if bound < exact - 1e-9:
        raise HierKLError(f"decomposed bound {bound} is below the exact marginal KL {exact}")
    return exact, float(bound)


def _safe_log(p):
    # finite stand-in for log 0 so CategoricalDist accepts the logits
    return np.log(np.maximum(p, 1e-300))


def random_latent_model(rng: np.random.Generator, nz: int, na: int, concentration: float = 1.0):
    pz = rng.dirichlet(np.full(nz, concentration))
    paz = rng.dirichlet(np.full(na, concentration), size=nz)
    return pz, paz


# ---------------------------------------------------------------------------
# discount unrolling


def discount_identity_sides(a, gamma: float):
    """Both sides of sum_t g^t a_t = sum_{t<T} (1-g) g^t S_t + g^T S_T with
    partial sums S_t = a_1 + ... + a_t and t starting at 1."""
    a = np.asarray(a, dtype=np.float64)
    T = a.size
    if T == 0:
        return 0.0, 0.0
    t = np.arange(1, T + 1)
    lhs = float(np.sum(gamma ** t * a))
    S = np.cumsum(a)
    rhs = float(np.sum((1.0 - gamma) * gamma ** t[:-1] * S[:-1]) + gamma ** T * S[-1])
    return lhs, rhs


def discount_identity_check(a, gamma: float, tol: float = 1e-10) -> bool:
    lhs, rhs = discount_identity_sides(a, gamma)
    return abs(lhs - rhs) < tol


# ---------------------------------------------------------------------------
# gradients and Gaussian KL


def finite_diff_check(loss, params, h: float = 1e-5, grad=None) -> float:
    """Max abs difference between central differences and the analytic
    gradient, relative to the larger of the two gradients' max magnitudes.

    ``loss(params) -> float``; if ``grad`` is None, ``loss`` must instead
    return ``(value, grad)`` at the unperturbed point.
    """
    x = np.array(params, dtype=np.float64)
    if grad is None:
        _, grad = loss(x)

        def f(v):
            return loss(v)[0]
    else:
        f = loss
    grad = np.asarray(grad, dtype=np.float64).reshape(x.shape)
    num = np.zeros_like(x)
    flat, nflat = x.reshape(-1), num.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        down = f(x)
        flat[i] = old
        nflat[i] = (up - down) / (2.0 * h)
    scale = max(np.max(np.abs(num)), np.max(np.abs(grad)), 1e-12)
    return float(np.max(np.abs(num - grad)) / scale)


def gaussian_kl_quadrature(p: distributions.DiagGaussian, q: distributions.DiagGaussian) -> float:
    """KL(p || q) by adaptive quadrature, per dimension over mean_p +- 12 std_p."""
    mp, sp = np.ravel(p.mean), np.ravel(p.std)
    mq, sq = np.ravel(q.mean), np.ravel(q.std)
    total = 0.0
    for a, b, c, d in zip(mp, sp, mq, sq):
        def integrand(x, a=a, b=b, c=c, d=d):
            lp = -0.5 * ((x - a) / b) ** 2 - np.log(b) - 0.5 * np.log(2 * np.pi)
            lq = -0.5 * ((x - c) / d) ** 2 - np.log(d) - 0.5 * np.log(2 * np.pi)
            return np.exp(lp) * (lp - lq)
        val, _ = integrate.quad(integrand, a - 12 * b, a + 12 * b, epsabs=1e-13, epsrel=1e-12, limit=200,
                                points=[a])
        total += val
    return float(total)


# ---------------------------------------------------------------------------
# brute-force off-policy targets


def retrace_bruteforce(q, v_boot, kl, rewards, gamma, alpha, c, discounts=None):
    """Q^R_t = Q_t + sum_{s>=t} (prod_{i=t+1}^{s} g d_{i-1} c_i) delta_s by explicit double loop."""
    q, v_boot, kl, r, c = (np.asarray(v, dtype=np.float64) for v in (q, v_boot, kl, rewards, c))
    K = r.size
    d = np.ones(K) if discounts is None else np.asarray(discounts, dtype=np.float64)
    out = np.empty(K)
    for t in range(K):
        total = q[t]
        for s in range(t, K):
            coef = 1.0
            for i in range(t + 1, s + 1):
                coef *= gamma * d[i - 1] * c[i]
            delta = r[s] + gamma * d[s] * (v_boot[s + 1] - alpha * kl[s + 1]) - q[s]
            total += coef * delta
        out[t] = total
    return out


def vtrace_bruteforce(v, kl_p, rewards, gamma, c_bar, rho_bar, log_pi, log_mu, discounts=None):
    """v_s = V_s + sum_{t>=s} (prod_{i=s}^{t-1} g d_i c_i) delta_t by explicit double loop."""
    v, kl_p, r = (np.asarray(x, dtype=np.float64) for x in (v, kl_p, rewards))
    w = np.exp(np.asarray(log_pi, dtype=np.float64) - np.asarray(log_mu, dtype=np.float64))
    K = r.size
    d = np.ones(K) if discounts is None else np.asarray(discounts, dtype=np.float64)
    c = np.minimum(c_bar, w)
    rho = np.minimum(rho_bar, w)
    out = v.copy()
    for s in range(K):
        total = 0.0
        for t in range(s, K):
            coef = 1.0
            for i in range(s, t):
                coef *= gamma * d[i] * c[i]
            delta = rho[t] * (r[t] + gamma * d[t] * (v[t + 1] - kl_p[t + 1]) - v[t])
            total += coef * delta
        out[s] = v[s] + total
    return out, rho


def regularized_kstep_return(rewards, kl, v_boot_last, gamma, alpha, t: int = 0) -> float:
    """sum_{s>=t} g^{s-t} r_s - alpha sum_{s=t+1}^{K} g^{s-t} KL_s + g^{K-t} V_K."""
    r = np.asarray(rewards, dtype=np.float64)
    kl = np.asarray(kl, dtype=np.float64)
    K = r.size
    ret = sum(gamma ** (s - t) * r[s] for s in range(t, K))
    ret -= alpha * sum(gamma ** (s - t) * kl[s] for s in range(t + 1, K + 1))
    return float(ret + gamma ** (K - t) * v_boot_last)
