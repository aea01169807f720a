"""Hierarchical SVG(0) with replay and Retrace, and its on-policy reference.

Both learners share one pass (``svg0_pass``). The replay learner evaluates the
bootstrap values, the Retrace base values and the KL regulariser against
target parameters and corrects for the behaviour policy with truncated
traces. The on-policy learner uses the online parameters throughout and
discounted K-step return targets.

Gradient structure:

* policy objective -> hl, ll only; the action is reparameterised through
  both controllers but the critic's latent input is treated as a constant;
* critic loss -> critic only;
* distillation loss -> default_hl / default_ll only, latents held fixed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..autodiff import Direction, mlp_backward, mlp_forward
from ..distributions import (gaussian_entropy, gaussian_log_prob, kl_diag_gaussian,
                             kl_diag_gaussian_grads)
from ..errors import ConfigError
from ..offpolicy import SegmentBatch, retrace_targets, traces
from ..policy import ARLearned, Sharing, default_hl_step, gaussian_head, gaussian_head_backward, ll_input
from .common import CRITIC, LearnerConfig, LearnerState, apply_gradients, grad_norms, guard_finite


@dataclass
class SVGNoise:
    eps: np.ndarray  # (B, K+1, dz) latent noise
    xi: np.ndarray   # (M, B, K+1, da) action noise for E_pi Q


def draw_noise(state: LearnerState, batch: SegmentBatch, cfg: LearnerConfig) -> SVGNoise:
    B, K1 = batch.size, batch.unroll + 1
    st = state.stack
    eps = state.rng.standard_normal((B, K1, st.latent_dim))
    xi = state.rng.standard_normal((cfg.q_samples, B, K1, st.action_space.n))
    return SVGNoise(eps, xi)


def kstep_targets(rewards, v_boot, kl, gamma: float, alpha: float, discounts, lengths) -> np.ndarray:
    """Discounted K-step regularised returns bootstrapped at each segment's
    valid length L:

        G_t = sum_{s=t}^{L-1} g^{s-t} r_s - alpha sum_{s=t+1}^{L} g^{s-t} KL_s + g^{L-t} V_L

    The KL at the evaluated step is excluded, as in the Retrace targets.
    """
    r = np.atleast_2d(np.asarray(rewards, dtype=np.float64))
    v_boot = np.atleast_2d(v_boot)
    kl = np.atleast_2d(kl)
    d = gamma * np.atleast_2d(discounts)
    B, K = r.shape
    lengths = np.broadcast_to(np.asarray(lengths), (B,))
    steps = np.arange(K)[None, :]
    valid = steps < lengths[:, None]
    last = steps == (lengths[:, None] - 1)
    delta = np.where(valid, r - d * alpha * kl[:, 1:] + np.where(last, d * v_boot[:, 1:], 0.0), 0.0)
    coef = np.where(steps + 1 < lengths[:, None], d, 0.0)
    out = kernels.backward_accumulate(delta, coef)
    return out.reshape(np.shape(rewards))


def _executed(a, bound):
    """The action the environment applies, and where it depends on ``a``."""
    if bound is None:
        return a, None
    inside = np.abs(a) < bound
    return np.clip(a, -bound, bound), inside


def _q_input(a, z, xc):
    lead = np.broadcast_shapes(a.shape[:-1], z.shape[:-1], xc.shape[:-1])
    parts = [np.broadcast_to(a, lead + a.shape[-1:]), np.broadcast_to(z, lead + z.shape[-1:]),
             np.broadcast_to(xc, lead + xc.shape[-1:])]
    return np.concatenate(parts, axis=-1)


def svg0_pass(state: LearnerState, batch: SegmentBatch, cfg: LearnerConfig, noise: SVGNoise,
              mode: str = "retrace", z_for_q=None, z_prev_for_prior=None):
    """Losses and gradients for one batch.

    Returns ``(grads, diag, aux)`` where ``grads`` has keys ``policy`` (ascent),
    ``critic`` and ``distill`` (descent), each a ``component -> flat gradient``
    dict. ``z_for_q`` replaces the latent fed to the critic in the policy
    objective and ``z_prev_for_prior`` the (stop-gradient) latent the HL
    default conditions on; finite-difference checks hold both fixed.
    """
    if mode not in ("retrace", "kstep"):
        raise ConfigError(f"unknown target mode {mode!r}")
    st = state.stack
    if st.action_space.discrete:
        raise ConfigError("svg0 needs a continuous action space")
    if st.latent_period != 1:
        raise ConfigError("svg0 resamples the latent every step; latent period must be 1")
    reg, gamma, alpha = cfg.reg, cfg.reg.gamma, cfg.reg.alpha
    on = st.params
    tgt = state.target if mode == "retrace" else state.online()
    B, K = batch.size, batch.unroll
    x = batch.obs
    mask = batch.mask
    n_valid = max(mask.sum(), 1.0)
    w = np.zeros((B, K + 1))
    w[:, :K] = mask / n_valid
    dz, da = st.latent_dim, st.action_space.n

    # --- latents
    if st.hierarchical:
        hl_dist, hl_rec = gaussian_head(st.specs["hl"], on["hl"], x.view(st.mask.hl), record=True)
        z = hl_dist.mean + hl_dist.std * noise.eps
        z0 = batch.z_prev0 if batch.z_prev0 is not None else np.zeros((B, dz))
        z_prev = np.concatenate([z0[:, None, :], z[:, :-1]], axis=1)
        if z_prev_for_prior is not None:
            z_prev = np.asarray(z_prev_for_prior, dtype=np.float64)
        prior_t = default_hl_step(st.prior, z_prev, tgt.get("default_hl"))
        if isinstance(st.prior, ARLearned):
            prior_on, prior_rec = gaussian_head(st.prior.spec, on["default_hl"], z_prev, record=True)
        else:
            prior_on, prior_rec = prior_t, None
        kl_hl = kl_diag_gaussian(hl_dist, prior_t)
        kl_hl_d = kl_diag_gaussian(hl_dist, prior_on)
    else:
        z = z_prev = np.zeros((B, K + 1, 0))
        kl_hl = kl_hl_d = np.zeros((B, K + 1))

    # --- low level
    ll_dist, ll_rec = gaussian_head(st.specs["ll"], on["ll"], ll_input(st, x, z, st.mask.ll), record=True)
    separate = st.sharing is Sharing.SEPARATE
    if separate:
        d0_in = ll_input(st, x, z, st.mask.default_ll)
        d0_t, d0t_rec = gaussian_head(st.specs["default_ll"], tgt["default_ll"], d0_in, record=True)
        d0_on, d0on_rec = gaussian_head(st.specs["default_ll"], on["default_ll"], d0_in, record=True)
        kl_ll = kl_diag_gaussian(ll_dist, d0_t)
        kl_ll_d = kl_diag_gaussian(ll_dist, d0_on)
    else:
        kl_ll = kl_ll_d = np.zeros((B, K + 1))
    kl = kl_hl + kl_ll
    ent = gaussian_entropy(ll_dist)

    # --- E_pi Q under target critic, policy actions
    xc = x.view(st.mask.critic_view(list(st.obs_dims)))
    # the critic scores executed actions, so clipped samples carry no gradient
    bound = st.action_space.bound
    a_pi, a_inside = _executed(ll_dist.mean + ll_dist.std * noise.xi, bound)  # (M, B, K+1, da)
    zq = z if z_for_q is None else np.asarray(z_for_q)
    q_pi, q_pi_tape = mlp_forward(state.critic_spec, tgt[CRITIC], _q_input(a_pi, zq, xc), record=True)
    M = a_pi.shape[0]
    v_hat = q_pi[..., 0].mean(axis=0)                     # (B, K+1)

    # --- replayed actions
    acts = np.asarray(batch.actions, dtype=np.float64)
    q_in = _q_input(_executed(acts, bound)[0], z[:, :K], xc[:, :K])
    q_base = mlp_forward(state.critic_spec, tgt[CRITIC], q_in)[..., 0]
    q_on, q_on_tape = mlp_forward(state.critic_spec, state.critic, q_in, record=True)
    q_on = q_on[..., 0]

    if mode == "retrace":
        ll_k = type(ll_dist)(ll_dist.mean[:, :K], ll_dist.std[:, :K])
        log_pi = np.where(mask > 0, gaussian_log_prob(ll_k, acts), 0.0)
        c = traces(log_pi, batch.behaviour_log_prob, cfg.trace.lam) * mask
        q_target = retrace_targets(q_base, v_hat, kl, batch.rewards, gamma, alpha, c, batch.discounts)
    else:
        q_target = kstep_targets(batch.rewards, v_hat, kl, gamma, alpha, batch.discounts, batch.lengths)
        c = mask

    # --- policy objective (ascent)
    policy_obj = float(np.sum(w * (v_hat - alpha * kl + reg.alpha_entropy * ent)))
    if bound is not None:
        # clipped samples give the mean no gradient, so without this pull a
        # mean that drifts past the bound can never come back
        excess = np.maximum(np.abs(ll_dist.mean) - bound, 0.0)
        policy_obj -= cfg.action_penalty * float(np.sum(w[..., None] * excess ** 2))
    g_q = np.broadcast_to(w / M, q_pi.shape[:-1])[..., None]
    _, d_qin = mlp_backward(state.critic_spec, tgt[CRITIC], q_pi_tape, g_q)
    d_a = d_qin[..., :da]                                 # critic latent input is a constant
    if a_inside is not None:
        d_a = d_a * a_inside
    d_mean_ll = d_a.sum(axis=0)
    if bound is not None:
        d_mean_ll = d_mean_ll - 2.0 * cfg.action_penalty * w[..., None] * excess * np.sign(ll_dist.mean)
    d_logstd_ll = (d_a * ll_dist.std * noise.xi).sum(axis=0) + reg.alpha_entropy * w[..., None]
    d_z = np.zeros_like(z)
    grads_pol = {}
    if separate:
        dmp, dlp, dmq, dlq = kl_diag_gaussian_grads(ll_dist, d0_t)
        d_mean_ll = d_mean_ll - alpha * w[..., None] * dmp
        d_logstd_ll = d_logstd_ll - alpha * w[..., None] * dlp
        if dz:
            _, d_in0 = gaussian_head_backward(st.specs["default_ll"], tgt["default_ll"], d0t_rec,
                                              -alpha * w[..., None] * dmq, -alpha * w[..., None] * dlq)
            d_z += d_in0[..., -dz:]
    grads_pol["ll"], d_in = gaussian_head_backward(st.specs["ll"], on["ll"], ll_rec, d_mean_ll, d_logstd_ll)
    if st.hierarchical:
        d_z += d_in[..., -dz:]
        hmp, hlp, _, _ = kl_diag_gaussian_grads(hl_dist, prior_t)
        d_mean_hl = d_z - alpha * w[..., None] * hmp
        d_logstd_hl = d_z * hl_dist.std * noise.eps - alpha * w[..., None] * hlp
        grads_pol["hl"], _ = gaussian_head_backward(st.specs["hl"], on["hl"], hl_rec, d_mean_hl, d_logstd_hl)

    # --- critic loss (descent): 1/2 mean (Q_target - Q)^2 over valid steps
    err = (q_on - q_target) * mask
    q_loss = float(0.5 * np.sum(err * err) / n_valid)
    g_c, _ = mlp_backward(state.critic_spec, state.critic, q_on_tape, (err / n_valid)[..., None])
    grads_critic = {CRITIC: g_c}

    # --- distillation (descent on the default policies only)
    distill = float(np.sum(w * (kl_hl_d + kl_ll_d)))
    grads_distill = {}
    if st.hierarchical and isinstance(st.prior, ARLearned):
        _, _, dmq, dlq = kl_diag_gaussian_grads(hl_dist, prior_on)
        grads_distill["default_hl"], _ = gaussian_head_backward(st.prior.spec, on["default_hl"], prior_rec,
                                                                w[..., None] * dmq, w[..., None] * dlq)
    if separate:
        _, _, dmq, dlq = kl_diag_gaussian_grads(ll_dist, d0_on)
        grads_distill["default_ll"], _ = gaussian_head_backward(st.specs["default_ll"], on["default_ll"],
                                                                d0on_rec, w[..., None] * dmq, w[..., None] * dlq)

    m = mask > 0
    diag = {
        "mean_reward": float(batch.rewards[m].mean()) if m.any() else 0.0,
        "kl_hl": float(kl_hl[:, :K][m].mean()) if m.any() else 0.0,
        "kl_ll": float(kl_ll[:, :K][m].mean()) if m.any() else 0.0,
        "entropy": float(ent[:, :K][m].mean()) if m.any() else 0.0,
        "policy_loss": -policy_obj,
        "q_loss": q_loss,
        "distill_loss": distill,
        "mean_trace": float(c[m].mean()) if m.any() else 0.0,
    }
    grads = {"policy": grads_pol, "critic": grads_critic, "distill": grads_distill}
    aux = {"q_target": q_target, "v_hat": v_hat, "kl": kl, "z": z, "z_prev": z_prev, "q_online": q_on, "traces": c}
    return grads, diag, aux


def policy_objective(state: LearnerState, batch: SegmentBatch, cfg: LearnerConfig, noise: SVGNoise,
                     z_for_q=None, z_prev_for_prior=None) -> float:
    """Scalar policy objective for the current online parameters (used by tests)."""
    return -svg0_pass(state, batch, cfg, noise, "retrace", z_for_q, z_prev_for_prior)[1]["policy_loss"]


def _apply(state: LearnerState, grads, diag, cfg: LearnerConfig, sync: bool):
    flat = [grads["policy"], grads["critic"], grads["distill"]]
    if not guard_finite(state, diag, *flat):
        return state, diag
    norms = {}
    norms.update(apply_gradients(state, grads["policy"], Direction.ASCENT, cfg))
    norms.update(apply_gradients(state, grads["critic"], Direction.DESCENT, cfg))
    norms.update(apply_gradients(state, grads["distill"], Direction.DESCENT, cfg))
    diag.update({f"grad_norm/{k}": v for k, v in norms.items()})
    state.updates += 1
    if sync:
        diag["synced"] = state.sync.tick(state.online(), state.target)
    return state, diag


def svg0_update(state: LearnerState, batch: SegmentBatch, cfg: LearnerConfig, noise: SVGNoise | None = None):
    """One replay update: Retrace critic targets, reparameterised policy step,
    distillation step, then a target-sync tick."""
    noise = noise if noise is not None else draw_noise(state, batch, cfg)
    grads, diag, _ = svg0_pass(state, batch, cfg, noise, "retrace")
    return _apply(state, grads, diag, cfg, sync=True)


def onpolicy_update(state: LearnerState, batch: SegmentBatch, cfg: LearnerConfig, noise: SVGNoise | None = None):
    """Reference learner on a fresh rollout: online parameters everywhere and
    K-step return critic targets, no traces and no target network."""
    noise = noise if noise is not None else draw_noise(state, batch, cfg)
    grads, diag, _ = svg0_pass(state, batch, cfg, noise, "kstep")
    return _apply(state, grads, diag, cfg, sync=False)


__all__ = ["SVGNoise", "draw_noise", "kstep_targets", "svg0_pass", "policy_objective", "svg0_update",
           "onpolicy_update", "grad_norms"]
