"""Replay storage, truncated importance traces, Retrace and V-trace targets.

Array conventions for a segment of unroll length K (valid length L <= K):

* ``rewards``, ``q``, ``c``, ``log_pi``/``log_mu`` have K entries, one per
  step t = 0..K-1.
* ``v_boot``, ``v``, ``kl`` have K+1 entries; index s holds the quantity at
  the observation reached after s steps, so index L is the bootstrap.
* ``discounts`` (K entries) is 1 for a continuing transition and 0 when the
  step ends the episode. Padded steps must carry zero traces so that nothing
  beyond the valid prefix leaks into the recursion.

Everything also works with a leading batch axis.
"""

from __future__ import annotations

import collections
import threading
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .autodiff import ParamVector
from .errors import ConfigError, NonFiniteError, UsageError
from .policy import ObservationBundle


@dataclass(frozen=True)
class TraceConfig:
    lam: float = 1.0
    c_bar: float = 1.0
    rho_bar: float = 1.0

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.lam, self.c_bar, self.rho_bar)):
            raise ConfigError("trace settings must be finite")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.c_bar < 0 or self.rho_bar < 0:
            raise ConfigError("truncation levels must be nonnegative")


def _log_ratio(log_pi, log_mu) -> np.ndarray:
    log_pi = np.asarray(log_pi, dtype=np.float64)
    log_mu = np.asarray(log_mu, dtype=np.float64)
    if log_pi.shape != log_mu.shape:
        raise ConfigError(f"log_pi {log_pi.shape} and log_mu {log_mu.shape} differ in shape")
    diff = log_pi - log_mu
    if not np.all(np.isfinite(diff)):
        raise NonFiniteError("non-finite importance ratio")
    return diff


def traces(log_pi, log_mu, lam: float) -> np.ndarray:
    """c_i = lam * min(1, pi/mu)."""
    diff = _log_ratio(log_pi, log_mu)
    # min(1, exp(d)) == exp(min(0, d)) and never overflows
    return lam * np.exp(np.minimum(diff, 0.0))


def _discounts(discounts, shape) -> np.ndarray:
    if discounts is None:
        return np.ones(shape)
    d = np.asarray(discounts, dtype=np.float64)
    if d.shape != shape:
        raise ConfigError(f"discounts shape {d.shape} != {shape}")
    return d


def _check_lengths(per_step: dict, per_state: dict):
    shapes = {k: np.shape(v) for k, v in per_step.items()}
    ref = next(iter(shapes.values()))
    for name, s in shapes.items():
        if s != ref:
            raise ConfigError(f"length mismatch: {name} has shape {s}, expected {ref}")
    want = ref[:-1] + (ref[-1] + 1,)
    for name, v in per_state.items():
        if np.shape(v) != want:
            raise ConfigError(f"length mismatch: {name} has shape {np.shape(v)}, expected {want}")
    return ref


def retrace_targets(q, v_boot, kl, rewards, gamma: float, alpha: float, c, discounts=None) -> np.ndarray:
    """Q^R_t = Q_t + sum_{s>=t} gamma^{s-t} (prod_{i=t+1}^{s} c_i) delta_s.

    delta_s = r_s + gamma d_s (V_{s+1} - alpha KL_{s+1}) - Q_s. The KL at the
    step being evaluated is left out; it is optimised as a separate loss.
    """
    q = np.asarray(q, dtype=np.float64)
    v_boot = np.asarray(v_boot, dtype=np.float64)
    kl = np.asarray(kl, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    shape = _check_lengths({"q": q, "rewards": rewards, "c": c}, {"v_boot": v_boot, "kl": kl})
    d = gamma * _discounts(discounts, shape)
    delta = rewards + d * (v_boot[..., 1:] - alpha * kl[..., 1:]) - q
    # coefficient linking step t to t+1 uses c_{t+1}; the last step has none
    c_next = np.zeros_like(c)
    c_next[..., :-1] = c[..., 1:]
    return q + kernels.backward_accumulate(delta, d * c_next)


def vtrace_targets(v, kl_p, rewards, gamma: float, trace_cfg: TraceConfig, log_pi, log_mu,
                   discounts=None, mask=None):
    """V-trace targets with KL-adjusted bootstraps.

    ``kl_p`` is the already-gated and scaled per-state KL penalty. Returns
    ``(v_s, rho)`` where ``v_s`` has K+1 entries (the last one is the
    bootstrap value itself) and ``rho`` the truncated weights for the policy
    gradient. ``mask`` zeroes both weights at padded steps.
    """
    v = np.asarray(v, dtype=np.float64)
    kl_p = np.asarray(kl_p, dtype=np.float64)
    rewards = np.asarray(rewards, dtype=np.float64)
    w_log = _log_ratio(log_pi, log_mu)
    shape = _check_lengths({"rewards": rewards, "log_pi": w_log}, {"v": v, "kl_p": kl_p})
    d = gamma * _discounts(discounts, shape)
    rho = np.exp(np.minimum(w_log, np.log(trace_cfg.rho_bar) if trace_cfg.rho_bar > 0 else -np.inf))
    c = np.exp(np.minimum(w_log, np.log(trace_cfg.c_bar) if trace_cfg.c_bar > 0 else -np.inf))
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)
        rho, c = rho * m, c * m
    delta = rho * (rewards + d * (v[..., 1:] - kl_p[..., 1:]) - v[..., :-1])
    acc = kernels.backward_accumulate(delta, d * c)
    v_s = v.copy()
    v_s[..., :-1] += acc
    return v_s, rho


# ---------------------------------------------------------------------------
# replay


@dataclass(frozen=True)
class ReplaySegment:
    """A K-step unroll plus the bootstrap observation.

    ``obs`` has K+1 entries along its leading axis. ``length`` counts the
    valid steps; entries past it are padding. ``terminal`` marks that the
    episode ended at step ``length``. ``t0`` is the episode time of the first
    step (1-based) and ``z_prev0`` the actor's latent before the segment,
    used only to condition an autoregressive prior.
    """

    obs: ObservationBundle
    actions: np.ndarray
    rewards: np.ndarray
    behaviour_log_prob: np.ndarray
    length: int
    terminal: bool = False
    t0: int = 1
    z_prev0: np.ndarray | None = None
    version: int = 0

    def __post_init__(self):
        k = len(self.rewards)
        if k == 0:
            raise ConfigError("empty segment")
        if self.obs.batch_shape[:1] != (k + 1,):
            raise ConfigError(f"segment needs {k + 1} observations, got {self.obs.batch_shape[:1]}")
        if len(self.actions) != k or len(self.behaviour_log_prob) != k:
            raise ConfigError("actions, rewards and log-probs must have the same length")
        if not 1 <= self.length <= k:
            raise ConfigError(f"valid length {self.length} outside [1, {k}]")
        if self.t0 < 1:
            raise ConfigError("episode time starts at 1")
        lp = np.asarray(self.behaviour_log_prob, dtype=np.float64)
        if not np.all(np.isfinite(lp[: self.length])):
            raise ConfigError("behaviour log-probs must be finite")
        for name in ("actions", "rewards", "behaviour_log_prob"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def unroll(self) -> int:
        return len(self.rewards)

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.unroll)
        m[: self.length] = 1.0
        return m

    @property
    def discounts(self) -> np.ndarray:
        """1 for continuing steps, 0 at the terminal step and on padding."""
        d = self.mask.copy()
        if self.terminal:
            d[self.length - 1] = 0.0
        return d


@dataclass
class SegmentBatch:
    obs: ObservationBundle          # (B, K+1, ...)
    actions: np.ndarray             # (B, K) or (B, K, da)
    rewards: np.ndarray             # (B, K)
    behaviour_log_prob: np.ndarray  # (B, K)
    mask: np.ndarray                # (B, K)
    discounts: np.ndarray           # (B, K)
    lengths: np.ndarray             # (B,)
    t0: np.ndarray                  # (B,)
    z_prev0: np.ndarray | None      # (B, dz)

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def unroll(self) -> int:
        return self.rewards.shape[1]


def collate(segments) -> SegmentBatch:
    if not segments:
        raise ConfigError("cannot collate an empty list of segments")
    ks = {s.unroll for s in segments}
    if len(ks) != 1:
        raise ConfigError(f"segments have different unroll lengths {sorted(ks)}")
    z0 = None
    if segments[0].z_prev0 is not None:
        z0 = np.stack([np.asarray(s.z_prev0, dtype=np.float64) for s in segments])
    lp = np.stack([s.behaviour_log_prob for s in segments]).astype(np.float64)
    mask = np.stack([s.mask for s in segments])
    return SegmentBatch(
        obs=ObservationBundle.stack([s.obs for s in segments]),
        actions=np.stack([s.actions for s in segments]),
        rewards=np.stack([s.rewards for s in segments]).astype(np.float64),
        # padded log-probs may be junk; keep them finite
        behaviour_log_prob=np.where(mask > 0, lp, 0.0),
        mask=mask,
        discounts=np.stack([s.discounts for s in segments]),
        lengths=np.array([s.length for s in segments], dtype=np.int64),
        t0=np.array([s.t0 for s in segments], dtype=np.int64),
        z_prev0=z0,
    )


class ReplayBuffer:
    """Bounded FIFO of segments; many producers, one consumer.

    ``capacity`` counts segments. Sampling is uniform with replacement.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ConfigError("replay capacity must be >= 1")
        self.capacity = int(capacity)
        self._items: collections.deque = collections.deque(maxlen=self.capacity)
        self._lock = threading.Lock()
        self.pushed = 0

    @classmethod
    def for_steps(cls, capacity_steps: int, unroll: int) -> "ReplayBuffer":
        return cls(max(1, capacity_steps // unroll))

    def __len__(self) -> int:
        with self._lock:
            return len(self._items)

    def push(self, segment: ReplaySegment):
        if not isinstance(segment, ReplaySegment):
            raise ConfigError("only ReplaySegment instances can be stored")
        with self._lock:
            self._items.append(segment)
            self.pushed += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[ReplaySegment]:
        with self._lock:
            n = len(self._items)
            if n == 0:
                raise UsageError("cannot sample from an empty replay buffer")
            idx = rng.integers(0, n, size=batch_size)
            return [self._items[i] for i in idx]

    def pop_oldest(self, batch_size: int) -> list[ReplaySegment]:
        """Remove and return up to ``batch_size`` of the oldest segments."""
        with self._lock:
            if not self._items:
                raise UsageError("cannot take from an empty replay buffer")
            k = min(batch_size, len(self._items))
            return [self._items.popleft() for _ in range(k)]

    def snapshot(self) -> list[ReplaySegment]:
        with self._lock:
            return list(self._items)


def replay_push(buffer: ReplayBuffer, segment: ReplaySegment):
    buffer.push(segment)


def replay_sample(buffer: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> SegmentBatch:
    return collate(buffer.sample(batch_size, rng))


@dataclass
class TargetSync:
    """Copies online parameters to the targets once more than ``period``
    updates have passed since the last copy."""

    period: int = 100
    counter: int = 0
    syncs: int = field(default=0)

    def __post_init__(self):
        if self.period < 0:
            raise ConfigError("target period must be nonnegative")

    def tick(self, online: dict[str, ParamVector], target: dict[str, ParamVector]) -> bool:
        self.counter += 1
        if self.counter > self.period:
            for name, p in online.items():
                target[name] = p.copy()
            self.counter = 0
            self.syncs += 1
            return True
        return False


def target_sync_tick(sync: TargetSync, online, target) -> bool:
    return sync.tick(online, target)
