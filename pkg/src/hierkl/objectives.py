"""KL-regularised returns and the per-step KL bound."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .policy import latent_schedule


@dataclass(frozen=True)
class RegularizerConfig:
    alpha: float = 1e-3
    alpha_entropy: float = 1e-4
    gamma: float = 0.99
    latent_period: int = 1

    def __post_init__(self):
        vals = (self.alpha, self.alpha_entropy, self.gamma)
        if not all(np.isfinite(v) for v in vals):
            raise ConfigError("regulariser settings must be finite")
        if self.alpha < 0 or self.alpha_entropy < 0:
            raise ConfigError("KL and entropy coefficients must be nonnegative")
        if not 0.0 <= self.gamma < 1.0:
            raise ConfigError(f"discount must lie in [0, 1), got {self.gamma}")
        if self.latent_period < 1:
            raise ConfigError("latent period must be >= 1")


@dataclass(frozen=True)
class TrajectoryTerms:
    """Per-step rewards and KL terms for t = 1..T."""

    rewards: np.ndarray
    kl_hl: np.ndarray | None = None
    kl_ll: np.ndarray | None = None


def regularized_return(traj: TrajectoryTerms, cfg: RegularizerConfig) -> float:
    """sum_t gamma^t [r_t - alpha 1_p(t) KL_hl_t - alpha KL_ll_t], t from 1."""
    if traj.rewards is None or traj.kl_hl is None or traj.kl_ll is None:
        raise ConfigError("rewards, kl_hl and kl_ll are all required")
    r = np.asarray(traj.rewards, dtype=np.float64)
    kl_hl = np.asarray(traj.kl_hl, dtype=np.float64)
    kl_ll = np.asarray(traj.kl_ll, dtype=np.float64)
    if not (r.shape == kl_hl.shape == kl_ll.shape) or r.ndim != 1:
        raise ConfigError("per-step terms must be 1-D arrays of equal length")
    t = np.arange(1, r.size + 1)
    gate = latent_schedule(t, cfg.latent_period).astype(np.float64) if r.size else np.zeros(0)
    per_step = r - cfg.alpha * gate * kl_hl - cfg.alpha * kl_ll
    return float(np.sum(cfg.gamma ** t * per_step))


def discounted_return(rewards, gamma: float) -> float:
    """sum_t gamma^t r_t with t from 1."""
    r = np.asarray(rewards, dtype=np.float64)
    return float(np.sum(gamma ** np.arange(1, r.size + 1) * r))


def kl_decomposition_bound(hl_kl, expected_ll_kl):
    """KL(z|x) + E_z KL(a|z,x): the sample-based upper bound on KL(a|x)."""
    hl_kl = np.asarray(hl_kl, dtype=np.float64)
    expected_ll_kl = np.asarray(expected_ll_kl, dtype=np.float64)
    # tiny negative values are float noise from closed-form KLs of equal distributions
    if np.any(hl_kl < -1e-12) or np.any(expected_ll_kl < -1e-12):
        raise ConfigError("KL terms must be nonnegative; a negative KL indicates an upstream bug")
    out = hl_kl + expected_ll_kl
    return float(out) if out.ndim == 0 else out
