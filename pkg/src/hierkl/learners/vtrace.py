"""V-trace actor-critic with infrequent latents for discrete actions.

The latent is drawn at steps where the period schedule fires (and at the
first step of a segment that starts mid-period) and held in between. The
gated KL penalty ``alpha (1_p KL_hl + KL_ll)`` enters the V-trace targets as
a negative reward at the next state and is also optimised analytically.
There are no target parameters: the online networks produce everything.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import Direction, mlp_backward, mlp_forward
from ..distributions import (categorical_entropy, categorical_entropy_grads, categorical_log_prob,
                             categorical_log_prob_grads, kl_categorical, kl_categorical_grads,
                             kl_diag_gaussian, kl_diag_gaussian_grads)
from ..errors import ConfigError
from ..offpolicy import SegmentBatch, vtrace_targets
from ..policy import (ARLearned, CategoricalDist, Sharing, categorical_head, categorical_head_backward,
                      default_hl_step, gaussian_head, gaussian_head_backward, latent_schedule, ll_input)
from .common import CRITIC, LearnerConfig, LearnerState, apply_gradients, guard_finite


def latent_sources(t0, K1: int, period: int):
    """Per-step gate 1_p(t) and the in-segment index whose latent is in use."""
    t = np.asarray(t0)[:, None] + np.arange(K1)[None, :]
    gate = latent_schedule(t, period)
    gate = np.atleast_2d(gate)
    fresh = gate.copy()
    fresh[:, 0] = True
    idx = np.where(fresh, np.arange(K1)[None, :], 0)
    src = np.maximum.accumulate(idx, axis=1)
    return gate, fresh, src


def vtrace_pass(state: LearnerState, batch: SegmentBatch, cfg: LearnerConfig, eps=None, z_prev_for_prior=None):
    """Targets, losses and gradients for one batch; ``z_prev_for_prior``
    overrides the stop-gradient latent fed to the HL default."""
    st = state.stack
    if not st.action_space.discrete:
        raise ConfigError("the V-trace learner needs a discrete action space")
    reg, gamma, alpha = cfg.reg, cfg.reg.gamma, cfg.reg.alpha
    on = st.params
    B, K = batch.size, batch.unroll
    K1 = K + 1
    x = batch.obs
    mask = batch.mask
    n_valid = max(mask.sum(), 1.0)
    w = np.zeros((B, K1))
    w[:, :K] = mask / n_valid
    dz = st.latent_dim
    gate, fresh, src = latent_sources(batch.t0, K1, st.latent_period)
    rows = np.arange(B)[:, None]
    gate_f = gate.astype(np.float64)

    if st.hierarchical:
        if eps is None:
            eps = state.rng.standard_normal((B, K1, dz))
        hl_dist, hl_rec = gaussian_head(st.specs["hl"], on["hl"], x.view(st.mask.hl), record=True)
        z_fresh = hl_dist.mean + hl_dist.std * eps
        z = z_fresh[rows, src]
        z0 = batch.z_prev0 if batch.z_prev0 is not None else np.zeros((B, dz))
        z_prev = np.concatenate([z0[:, None, :], z[:, :-1]], axis=1)
        if z_prev_for_prior is not None:
            z_prev = np.asarray(z_prev_for_prior, dtype=np.float64)
        if isinstance(st.prior, ARLearned):
            prior, prior_rec = gaussian_head(st.prior.spec, on["default_hl"], z_prev, record=True)
        else:
            prior, prior_rec = default_hl_step(st.prior, z_prev), None
        kl_hl = kl_diag_gaussian(hl_dist, prior) * gate_f
    else:
        z = z_prev = np.zeros((B, K1, 0))
        kl_hl = np.zeros((B, K1))

    logits_dist, ll_rec = categorical_head(st.specs["ll"], on["ll"], ll_input(st, x, z, st.mask.ll), record=True)
    separate = st.sharing is Sharing.SEPARATE
    if separate:
        d0, d0_rec = categorical_head(st.specs["default_ll"], on["default_ll"],
                                      ll_input(st, x, z, st.mask.default_ll), record=True)
        kl_ll = kl_categorical(logits_dist, d0)
    else:
        kl_ll = np.zeros((B, K1))
    kl_p = alpha * (kl_hl + kl_ll)
    ent = categorical_entropy(logits_dist)

    xc = x.view(st.mask.critic_view(list(st.obs_dims)))
    v, v_tape = mlp_forward(state.critic_spec, state.critic, np.concatenate([z, xc], axis=-1), record=True)
    v = v[..., 0]

    acts = np.asarray(batch.actions, dtype=np.int64)
    ll_k = CategoricalDist(logits_dist.logits[:, :K])
    log_pi = categorical_log_prob(ll_k, acts)
    log_pi = np.where(mask > 0, log_pi, 0.0)
    vs, rho = vtrace_targets(v, kl_p, batch.rewards, gamma, cfg.trace, log_pi, batch.behaviour_log_prob,
                             batch.discounts, mask)
    d = gamma * batch.discounts
    adv = batch.rewards + d * (vs[:, 1:] - kl_p[:, 1:]) - v[:, :K]

    # --- policy objective (ascent on hl, ll)
    pg_w = np.zeros((B, K1))
    pg_w[:, :K] = w[:, :K] * rho * adv
    d_logits = np.zeros_like(logits_dist.logits)
    d_logits[:, :K] = pg_w[:, :K, None] * categorical_log_prob_grads(ll_k, acts)
    d_logits += reg.alpha_entropy * w[..., None] * categorical_entropy_grads(logits_dist)
    grads_pol, grads_def = {}, {}
    d_z = np.zeros_like(z)
    if separate:
        gp, gq = kl_categorical_grads(logits_dist, d0)
        d_logits -= alpha * w[..., None] * gp
        g_def, d_in0 = categorical_head_backward(st.specs["default_ll"], on["default_ll"], d0_rec,
                                                 w[..., None] * gq)
        grads_def["default_ll"] = g_def
        if dz:
            # default LL also reads z, which depends on the HL parameters
            d_z -= alpha * d_in0[..., -dz:]
    grads_pol["ll"], d_in = categorical_head_backward(st.specs["ll"], on["ll"], ll_rec, d_logits)
    if st.hierarchical:
        d_z += d_in[..., -dz:]
        # held latents: route each step's gradient to the step that drew it
        d_zf = np.zeros_like(d_z)
        np.add.at(d_zf, (np.broadcast_to(rows, src.shape), src), d_z)
        hmp, hlp, hmq, hlq = kl_diag_gaussian_grads(hl_dist, prior)
        kw = (w * gate_f)[..., None]
        d_mean = d_zf - alpha * kw * hmp
        d_logstd = d_zf * hl_dist.std * eps - alpha * kw * hlp
        grads_pol["hl"], _ = gaussian_head_backward(st.specs["hl"], on["hl"], hl_rec, d_mean, d_logstd)
        if prior_rec is not None:
            grads_def["default_hl"], _ = gaussian_head_backward(st.prior.spec, on["default_hl"], prior_rec,
                                                                kw * hmq, kw * hlq)

    # --- value loss (descent): 1/2 mean (v_s - V)^2
    err = (v[:, :K] - vs[:, :K]) * mask
    v_loss = float(0.5 * np.sum(err * err) / n_valid)
    cot = np.zeros((B, K1, 1))
    cot[:, :K, 0] = err / n_valid
    g_c, _ = mlp_backward(state.critic_spec, state.critic, v_tape, cot)

    m = mask > 0
    mk = (lambda a: float(a[:, :K][m].mean()) if m.any() else 0.0)
    diag = {
        "mean_reward": float(batch.rewards[m].mean()) if m.any() else 0.0,
        "kl_hl": mk(kl_hl),
        "kl_ll": mk(kl_ll),
        "entropy": mk(ent),
        "policy_loss": -float(np.sum(pg_w[:, :K] * log_pi) + np.sum(w * (reg.alpha_entropy * ent - kl_p))),
        "q_loss": v_loss,
        "distill_loss": float(np.sum(w * (kl_hl + kl_ll))),
        "mean_rho": float(rho[m].mean()) if m.any() else 0.0,
    }
    grads = {"policy": grads_pol, "critic": {CRITIC: g_c}, "distill": grads_def}
    aux = {"vs": vs, "rho": rho, "adv": adv, "kl_p": kl_p, "gate": gate, "z": z, "z_prev": z_prev, "v": v, "log_pi": log_pi,
           "entropy": ent, "pg_weight": pg_w[:, :K], "w": w}
    return grads, diag, aux


def discrete_vtrace_update(state: LearnerState, batch: SegmentBatch, cfg: LearnerConfig, eps=None):
    grads, diag, _ = vtrace_pass(state, batch, cfg, eps)
    if not guard_finite(state, diag, grads["policy"], grads["critic"], grads["distill"]):
        return state, diag
    norms = {}
    norms.update(apply_gradients(state, grads["policy"], Direction.ASCENT, cfg))
    norms.update(apply_gradients(state, grads["critic"], Direction.DESCENT, cfg))
    norms.update(apply_gradients(state, grads["distill"], Direction.DESCENT, cfg))
    diag.update({f"grad_norm/{k}": v for k, v in norms.items()})
    state.updates += 1
    return state, diag
