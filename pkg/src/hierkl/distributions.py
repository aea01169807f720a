"""Diagonal Gaussian and categorical distributions.

All functions accept batched parameters: the event dimension is the last
axis, every other axis is a batch axis, and scalar results have the batch
shape. Gradient helpers return derivatives with respect to ``mean`` and
``log_std`` (Gaussian) or ``logits`` (categorical), which is what the
learners backpropagate into the networks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MIN_STD = 1e-4
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_HALF_LOG_2PIE = 0.5 * np.log(2.0 * np.pi * np.e)


@dataclass(frozen=True)
class DiagGaussian:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape:
            raise ConfigError(f"mean {mean.shape} and std {std.shape} differ in shape")
        if not (np.all(np.isfinite(std)) and np.all(std >= 0)):
            raise ConfigError("stddev must be finite and nonnegative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", np.maximum(std, MIN_STD))

    @classmethod
    def from_log_std(cls, mean, log_std) -> "DiagGaussian":
        return cls(mean, np.exp(log_std))

    @classmethod
    def standard(cls, dim: int, batch_shape=()) -> "DiagGaussian":
        shape = tuple(batch_shape) + (dim,)
        return cls(np.zeros(shape), np.ones(shape))

    @property
    def log_std(self) -> np.ndarray:
        return np.log(self.std)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass(frozen=True)
class CategoricalDist:
    logits: np.ndarray

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if not np.all(np.isfinite(logits)):
            raise ConfigError("categorical logits must be finite")
        object.__setattr__(self, "logits", logits)

    @property
    def log_probs(self) -> np.ndarray:
        shifted = self.logits - self.logits.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)

    @property
    def num_actions(self) -> int:
        return self.logits.shape[-1]


def _check_same(p: DiagGaussian, q: DiagGaussian):
    if p.mean.shape[-1] != q.mean.shape[-1]:
        raise ConfigError(f"dimension mismatch: {p.mean.shape[-1]} vs {q.mean.shape[-1]}")


# ---------------------------------------------------------------------------
# Gaussian


def kl_diag_gaussian(p: DiagGaussian, q: DiagGaussian) -> np.ndarray:
    """Closed-form KL(p || q), summed over the event dimension."""
    _check_same(p, q)
    var_ratio = (p.std / q.std) ** 2
    diff = (p.mean - q.mean) / q.std
    return np.sum(np.log(q.std / p.std) + 0.5 * (var_ratio + diff * diff) - 0.5, axis=-1)


def kl_diag_gaussian_grads(p: DiagGaussian, q: DiagGaussian):
    """d KL(p||q) / d (mean_p, log_std_p, mean_q, log_std_q)."""
    _check_same(p, q)
    inv_var_q = 1.0 / (q.std * q.std)
    diff = p.mean - q.mean
    d_mean_p = diff * inv_var_q
    d_logstd_p = p.std * p.std * inv_var_q - 1.0
    d_logstd_q = 1.0 - (p.std * p.std + diff * diff) * inv_var_q
    return d_mean_p, d_logstd_p, -d_mean_p, d_logstd_q


def sample_reparam(d: DiagGaussian, noise) -> np.ndarray:
    """``mean + std * noise``; differentiable in mean and std for fixed noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != d.dim:
        raise ConfigError(f"noise dimension {noise.shape[-1]} does not match distribution dimension {d.dim}")
    return d.mean + d.std * noise


def gaussian_log_prob(d: DiagGaussian, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != d.dim:
        raise ConfigError("sample dimension does not match distribution")
    z = (x - d.mean) / d.std
    return np.sum(-0.5 * z * z - np.log(d.std) - _HALF_LOG_2PI, axis=-1)


def gaussian_log_prob_grads(d: DiagGaussian, x):
    """d log N(x; mean, std) / d (mean, log_std)."""
    z = (np.asarray(x, dtype=np.float64) - d.mean) / d.std
    return z / d.std, z * z - 1.0


def gaussian_entropy(d: DiagGaussian) -> np.ndarray:
    return np.sum(_HALF_LOG_2PIE + np.log(d.std), axis=-1)


# ---------------------------------------------------------------------------
# categorical


def kl_categorical(p: CategoricalDist, q: CategoricalDist) -> np.ndarray:
    """KL(p || q) computed in log space with max subtraction."""
    if p.num_actions != q.num_actions:
        raise ConfigError("categorical distributions have different supports")
    lp, lq = p.log_probs, q.log_probs
    return np.sum(np.exp(lp) * (lp - lq), axis=-1)


def kl_categorical_grads(p: CategoricalDist, q: CategoricalDist):
    """d KL(p||q) / d (logits_p, logits_q)."""
    lp, lq = p.log_probs, q.log_probs
    pp = np.exp(lp)
    kl = np.sum(pp * (lp - lq), axis=-1, keepdims=True)
    return pp * (lp - lq - kl), np.exp(lq) - pp


def categorical_log_prob(d: CategoricalDist, actions) -> np.ndarray:
    actions = np.asarray(actions, dtype=np.int64)
    return np.take_along_axis(d.log_probs, actions[..., None], axis=-1)[..., 0]


def categorical_log_prob_grads(d: CategoricalDist, actions) -> np.ndarray:
    """d log p(a) / d logits = onehot(a) - p."""
    actions = np.asarray(actions, dtype=np.int64)
    g = -d.probs
    np.put_along_axis(g, actions[..., None], np.take_along_axis(g, actions[..., None], axis=-1) + 1.0, axis=-1)
    return g


def categorical_entropy(d: CategoricalDist) -> np.ndarray:
    lp = d.log_probs
    return -np.sum(np.exp(lp) * lp, axis=-1)


def categorical_entropy_grads(d: CategoricalDist) -> np.ndarray:
    lp = d.log_probs
    p = np.exp(lp)
    h = -np.sum(p * lp, axis=-1, keepdims=True)
    return -p * (lp + h)


def sample_categorical(d: CategoricalDist, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per batch element; returns int64 indices."""
    p = d.probs
    u = rng.random(p.shape[:-1] + (1,))
    idx = (np.cumsum(p, axis=-1) < u).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1).astype(np.int64)


def log_prob(d, x) -> np.ndarray:
    if isinstance(d, CategoricalDist):
        return categorical_log_prob(d, x)
    return gaussian_log_prob(d, x)


def entropy(d) -> np.ndarray:
    if isinstance(d, CategoricalDist):
        return categorical_entropy(d)
    return gaussian_entropy(d)
