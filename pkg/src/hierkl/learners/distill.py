"""Default-policy distillation: descend the agent-to-default KL w.r.t. the
default parameters only."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..autodiff import Direction
from ..distributions import (CategoricalDist, DiagGaussian, kl_categorical, kl_categorical_grads,
                             kl_diag_gaussian, kl_diag_gaussian_grads)
from ..offpolicy import SegmentBatch
from ..policy import (ARLearned, Sharing, action_head, categorical_head_backward, gaussian_head,
                      gaussian_head_backward, hl_step, ll_input, ll_step)
from .common import LearnerConfig, LearnerState, apply_gradients, guard_finite


@dataclass
class DistillBatch:
    """Agent distributions and the inputs the defaults condition on.

    ``weights`` (same batch shape) scales each term; it defaults to a uniform
    mean. Any field not needed by the stack's defaults may be ``None``.
    """

    hl_dist: DiagGaussian | None = None
    z_prev: np.ndarray | None = None
    ll_dist: object | None = None
    ll_in: np.ndarray | None = None
    weights: np.ndarray | None = None


def distill_batch_from_segments(state: LearnerState, batch: SegmentBatch) -> DistillBatch:
    """Agent distributions at every valid step with freshly drawn latents."""
    st = state.stack
    B, K = batch.size, batch.unroll
    x = batch.obs[:, :K]
    w = batch.mask / max(batch.mask.sum(), 1.0)
    out = DistillBatch(weights=w)
    z = np.zeros((B, K, 0))
    if st.hierarchical:
        eps = state.rng.standard_normal((B, K, st.latent_dim))
        z, out.hl_dist = hl_step(st, x, eps)
        z0 = batch.z_prev0 if batch.z_prev0 is not None else np.zeros((B, st.latent_dim))
        out.z_prev = np.concatenate([z0[:, None, :], z[:, :-1]], axis=1)
    if st.sharing is Sharing.SEPARATE:
        out.ll_dist = ll_step(st, z, x)
        out.ll_in = ll_input(st, x, z, st.mask.default_ll)
    return out


def distill_gradients(state: LearnerState, db: DistillBatch):
    st = state.stack
    on = st.params
    grads, loss = {}, 0.0
    if isinstance(st.prior, ARLearned) and db.hl_dist is not None:
        prior, rec = gaussian_head(st.prior.spec, on["default_hl"], db.z_prev, record=True)
        w = _weights(db, db.hl_dist.mean.shape[:-1])
        kl = kl_diag_gaussian(db.hl_dist, prior)
        loss += float(np.sum(w * kl))
        _, _, dmq, dlq = kl_diag_gaussian_grads(db.hl_dist, prior)
        grads["default_hl"], _ = gaussian_head_backward(st.prior.spec, on["default_hl"], rec,
                                                        w[..., None] * dmq, w[..., None] * dlq)
    if st.sharing is Sharing.SEPARATE and db.ll_dist is not None:
        d0, rec = action_head(st, "default_ll", db.ll_in, record=True)
        if isinstance(d0, CategoricalDist):
            w = _weights(db, d0.logits.shape[:-1])
            loss += float(np.sum(w * kl_categorical(db.ll_dist, d0)))
            _, gq = kl_categorical_grads(db.ll_dist, d0)
            grads["default_ll"], _ = categorical_head_backward(st.specs["default_ll"], on["default_ll"], rec,
                                                               w[..., None] * gq)
        else:
            w = _weights(db, d0.mean.shape[:-1])
            loss += float(np.sum(w * kl_diag_gaussian(db.ll_dist, d0)))
            _, _, dmq, dlq = kl_diag_gaussian_grads(db.ll_dist, d0)
            grads["default_ll"], _ = gaussian_head_backward(st.specs["default_ll"], on["default_ll"], rec,
                                                            w[..., None] * dmq, w[..., None] * dlq)
    return grads, loss


def _weights(db: DistillBatch, shape):
    if db.weights is not None:
        return np.broadcast_to(db.weights, shape)
    return np.full(shape, 1.0 / max(int(np.prod(shape)), 1))


def distill_update(state: LearnerState, batch, cfg: LearnerConfig):
    """One descent step on the distillation loss. ISO and AR(1) priors with a
    shared LL have nothing to train, so the update is a no-op for them."""
    db = batch if isinstance(batch, DistillBatch) else distill_batch_from_segments(state, batch)
    grads, loss = distill_gradients(state, db)
    diag = {"distill_loss": loss}
    if not grads or not guard_finite(state, diag, grads):
        return state, diag
    norms = apply_gradients(state, grads, Direction.DESCENT, cfg)
    diag.update({f"grad_norm/{k}": v for k, v in norms.items()})
    return state, diag
