"""Learner configuration, state and gradient bookkeeping shared by all learners."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from ..autodiff import (Direction, MLPSpec, OptimizerState, ParamVector, init_params, mlp_spec,
                        optimizer_step)
from ..errors import ConfigError, NonFiniteError
from ..objectives import RegularizerConfig
from ..offpolicy import TargetSync, TraceConfig
from ..policy import PolicyStack

log = logging.getLogger(__name__)

AGENT = ("hl", "ll")
DEFAULT = ("default_hl", "default_ll")
CRITIC = "critic"


@dataclass(frozen=True)
class LearnerConfig:
    lr_policy: float = 1e-4
    lr_critic: float = 1e-4
    lr_default: float = 1e-4
    reg: RegularizerConfig = field(default_factory=RegularizerConfig)
    batch_size: int = 512
    unroll: int = 10
    target_period: int = 100
    trace: TraceConfig = field(default_factory=TraceConfig)
    q_samples: int = 1
    # optional global-norm clip per component; None disables clipping
    max_grad_norm: float | None = None
    # quadratic pull on action means that leave a bounded action box
    action_penalty: float = 1.0

    def __post_init__(self):
        for name in ("lr_policy", "lr_critic", "lr_default"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ConfigError(f"{name} must be a finite nonnegative rate, got {v}")
        if self.batch_size < 1 or self.unroll < 1 or self.q_samples < 1:
            raise ConfigError("batch size, unroll length and sample count must be >= 1")
        if self.target_period < 0:
            raise ConfigError("target period must be >= 0")
        if not np.isfinite(self.action_penalty) or self.action_penalty < 0:
            raise ConfigError("action penalty must be finite and >= 0")

    def with_reg(self, **kw) -> "LearnerConfig":
        return replace(self, reg=replace(self.reg, **kw))


def critic_spec(stack: PolicyStack, kind: str, hidden=(400, 300), activation="elu") -> MLPSpec:
    """Q(a, z, x) for ``kind == "q"`` or V(z, x) for ``kind == "v"``."""
    width = sum(stack.obs_dims[g] for g in stack.mask.critic_view(list(stack.obs_dims)))
    a_dim = stack.action_space.n if kind == "q" else 0
    if kind == "q" and stack.action_space.discrete:
        raise ConfigError("action-value critics are only built for continuous actions")
    if kind not in ("q", "v"):
        raise ConfigError(f"critic kind must be 'q' or 'v', got {kind!r}")
    return mlp_spec(a_dim + stack.latent_dim + width, hidden, 1, activation)


@dataclass
class LearnerState:
    """Online parameters live in ``stack.params`` plus ``critic``; ``target`` holds
    the lagged copies used by the replay learner."""

    stack: PolicyStack
    critic_spec: MLPSpec
    critic: ParamVector
    target: dict[str, ParamVector]
    opt: dict[str, OptimizerState]
    sync: TargetSync
    rng: np.random.Generator
    updates: int = 0
    skipped: int = 0
    frozen: set = field(default_factory=set)

    def online(self) -> dict[str, ParamVector]:
        out = dict(self.stack.params)
        out[CRITIC] = self.critic
        return out

    def components(self) -> dict[str, tuple[MLPSpec, ParamVector]]:
        out = {k: (self.stack.specs[k], v) for k, v in self.stack.params.items()}
        out[CRITIC] = (self.critic_spec, self.critic)
        return out

    def set_params(self, name: str, params: ParamVector):
        if name == CRITIC:
            self.critic = params
        else:
            self.stack.params[name] = params


def make_learner_state(stack: PolicyStack, cfg: LearnerConfig, *, critic: str = "q", critic_hidden=(400, 300),
                       activation="elu", seed: int = 0, frozen=(), critic_spec_override: MLPSpec | None = None
                       ) -> LearnerState:
    rng = np.random.default_rng(seed)
    spec = critic_spec_override or critic_spec(stack, critic, critic_hidden, activation)
    cparams = init_params(spec, rng, out_scale=0.1)
    lrs = {"hl": cfg.lr_policy, "ll": cfg.lr_policy, "default_hl": cfg.lr_default,
           "default_ll": cfg.lr_default, CRITIC: cfg.lr_critic}
    state = LearnerState(stack=stack, critic_spec=spec, critic=cparams, target={}, opt={},
                         sync=TargetSync(cfg.target_period), rng=rng, frozen=set(frozen))
    for name, p in state.online().items():
        state.opt[name] = OptimizerState.for_params(p, lrs[name])
        state.target[name] = p.copy()
    unknown = state.frozen - set(state.online())
    if unknown:
        raise ConfigError(f"cannot freeze unknown components {sorted(unknown)}")
    return state


def zero_grads(params: dict[str, ParamVector]) -> dict[str, np.ndarray]:
    return {k: np.zeros_like(v.values) for k, v in params.items()}


def all_finite(*groups) -> bool:
    for g in groups:
        for v in g.values():
            if not np.all(np.isfinite(v)):
                return False
    return True


def grad_norms(grads: dict[str, np.ndarray]) -> dict[str, float]:
    return {k: float(np.linalg.norm(v)) for k, v in grads.items()}


def apply_gradients(state: LearnerState, grads: dict[str, np.ndarray], direction: Direction,
                    cfg: LearnerConfig) -> dict[str, float]:
    """Step every non-frozen component in ``grads``. Returns applied norms
    (zero for frozen components)."""
    norms = {}
    online = state.online()
    for name, g in grads.items():
        if name in state.frozen:
            norms[name] = 0.0
            continue
        norm = float(np.linalg.norm(g))
        if cfg.max_grad_norm is not None and norm > cfg.max_grad_norm:
            g = g * (cfg.max_grad_norm / norm)
        state.set_params(name, optimizer_step(state.opt[name], online[name], g, direction))
        norms[name] = norm
    return norms


def guard_finite(state: LearnerState, diag: dict, *groups) -> bool:
    """False (and a logged diagnostic) when any loss or gradient is non-finite."""
    losses = {k: v for k, v in diag.items() if isinstance(v, float)}
    if all_finite(*groups) and all(np.isfinite(v) for v in losses.values()):
        return True
    state.skipped += 1
    diag["skipped"] = True
    log.warning("non-finite loss or gradient at update %d; update skipped", state.updates)
    return False


def require_finite(values, what: str):
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"non-finite {what}")
