"""Hierarchical agent (HL + LL controllers) and its default policy.

Parameters live in ``PolicyStack.params`` under component names:

* ``hl``          high-level policy, x -> N(z | mu, sigma)
* ``ll``          low-level policy, (x, z) -> action distribution
* ``default_hl``  learned AR prior z_prev -> N(z | mu, sigma) (AR_LEARNED only)
* ``default_ll``  separate low-level default (SEPARATE sharing only)

Default HL policies never see observations; they condition on the previous
latent alone. A flat agent is a stack with ``latent_dim == 0``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .autodiff import (MLPSpec, ParamVector, Tape, init_params, mlp_backward, mlp_forward, mlp_spec,
                       soft_clamp, soft_clamp_grad)
from .distributions import (CategoricalDist, DiagGaussian, kl_categorical, kl_diag_gaussian,
                            sample_reparam)
from .errors import ConfigError

TASK_GROUPS = ("task", "global")


@dataclass(frozen=True)
class ObservationBundle:
    """Named feature groups; arrays share leading (batch) axes."""

    groups: Mapping[str, np.ndarray]

    def __post_init__(self):
        groups = {k: np.asarray(v, dtype=np.float64) for k, v in self.groups.items()}
        shapes = {v.shape[:-1] for v in groups.values()}
        if len(shapes) > 1:
            raise ConfigError(f"observation groups disagree on batch shape: {shapes}")
        object.__setattr__(self, "groups", groups)

    @property
    def batch_shape(self) -> tuple[int, ...]:
        for v in self.groups.values():
            return v.shape[:-1]
        return ()

    def dim(self, name: str) -> int:
        return self.groups[name].shape[-1]

    def view(self, names: Sequence[str]) -> np.ndarray:
        missing = [n for n in names if n not in self.groups]
        if missing:
            raise ConfigError(f"observation has no group(s) {missing}; available: {sorted(self.groups)}")
        if not names:
            return np.zeros(self.batch_shape + (0,))
        return np.concatenate([self.groups[n] for n in names], axis=-1)

    def __getitem__(self, idx) -> "ObservationBundle":
        return ObservationBundle({k: v[idx] for k, v in self.groups.items()})

    def replace(self, **groups) -> "ObservationBundle":
        merged = dict(self.groups)
        merged.update(groups)
        return ObservationBundle(merged)

    @staticmethod
    def stack(bundles: Sequence["ObservationBundle"], axis: int = 0) -> "ObservationBundle":
        keys = bundles[0].groups.keys()
        return ObservationBundle({k: np.stack([b.groups[k] for b in bundles], axis=axis) for k in keys})


@dataclass(frozen=True)
class AsymmetryMask:
    """Which observation groups each consumer may read.

    ``default_hl`` must stay empty: HL priors are driven by z_prev only.
    ``critic`` defaults to every group when left as ``None``.
    """

    hl: tuple[str, ...]
    ll: tuple[str, ...]
    default_ll: tuple[str, ...]
    default_hl: tuple[str, ...] = ()
    critic: tuple[str, ...] | None = None
    enabled: bool = True

    def __post_init__(self):
        for name in ("hl", "ll", "default_ll", "default_hl"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.critic is not None:
            object.__setattr__(self, "critic", tuple(self.critic))
        if self.default_hl:
            raise ConfigError("HL default policies are conditioned on z_prev only; default_hl view must be empty")
        if self.enabled:
            leaked = set(self.default_ll) & set(TASK_GROUPS)
            if leaked:
                raise ConfigError(f"default LL must not read task-identifying groups {sorted(leaked)}")

    def check_available(self, available: Sequence[str]):
        for name in ("hl", "ll", "default_ll"):
            extra = set(getattr(self, name)) - set(available)
            if extra:
                raise ConfigError(f"{name} view references unknown groups {sorted(extra)}")

    def critic_view(self, available: Sequence[str]) -> tuple[str, ...]:
        return tuple(available) if self.critic is None else self.critic


# ---------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class IsoGaussian:
    """z_t ~ N(0, I), independent of everything."""


@dataclass(frozen=True)
class AR1:
    """z_t ~ N(alpha z_{t-1}, sqrt(1 - alpha^2)); marginally N(0, I)."""

    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"AR(1) coefficient must lie in [0, 1), got {self.alpha}")

    @property
    def stddev(self) -> float:
        return float(np.sqrt(1.0 - self.alpha * self.alpha))


@dataclass(frozen=True)
class ARLearned:
    """z_t ~ N(mu_phi(z_{t-1}), sigma_phi(z_{t-1})); parameters live under ``default_hl``."""

    spec: MLPSpec


PriorKind = IsoGaussian | AR1 | ARLearned


class Sharing(str, enum.Enum):
    SHARED = "shared"
    SEPARATE = "separate"


@dataclass(frozen=True)
class ActionSpace:
    kind: str  # "continuous" | "discrete"
    n: int
    # continuous only: the environment clips actions to [-bound, bound]
    bound: float | None = None

    def __post_init__(self):
        if self.kind not in ("continuous", "discrete") or self.n < 1:
            raise ConfigError(f"bad action space {self.kind}/{self.n}")
        if self.bound is not None and (self.kind == "discrete" or not self.bound > 0):
            raise ConfigError("an action bound must be positive and applies to continuous spaces only")

    @property
    def discrete(self) -> bool:
        return self.kind == "discrete"


@dataclass
class PolicyStack:
    specs: dict[str, MLPSpec]
    params: dict[str, ParamVector]
    prior: PriorKind
    sharing: Sharing
    latent_dim: int
    latent_period: int
    mask: AsymmetryMask
    action_space: ActionSpace
    obs_dims: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.sharing = Sharing(self.sharing)
        if self.latent_period < 1:
            raise ConfigError("latent period must be >= 1")
        if self.latent_dim > 0 and "hl" not in self.specs:
            raise ConfigError("a hierarchical stack needs an 'hl' network")
        if isinstance(self.prior, ARLearned):
            if self.prior.spec.input_dim != self.latent_dim:
                raise ConfigError("learned AR prior input must equal the latent dimension")
            if "default_hl" not in self.params:
                raise ConfigError("learned AR prior needs 'default_hl' parameters")
        if self.sharing is Sharing.SEPARATE and "default_ll" not in self.params:
            raise ConfigError("separate LL sharing needs 'default_ll' parameters")
        if self.obs_dims:
            self.mask.check_available(list(self.obs_dims))

    @property
    def hierarchical(self) -> bool:
        return self.latent_dim > 0

    def copy(self) -> "PolicyStack":
        return PolicyStack(dict(self.specs), {k: v.copy() for k, v in self.params.items()}, self.prior,
                           self.sharing, self.latent_dim, self.latent_period, self.mask, self.action_space,
                           dict(self.obs_dims))

    def trainable_agent(self) -> tuple[str, ...]:
        return tuple(k for k in ("hl", "ll") if k in self.params)

    def trainable_default(self) -> tuple[str, ...]:
        return tuple(k for k in ("default_hl", "default_ll") if k in self.params)


def _ll_output(action_space: ActionSpace):
    if action_space.discrete:
        return action_space.n
    return {"mean": action_space.n, "log_std": action_space.n}


def build_stack(obs_dims: Mapping[str, int], mask: AsymmetryMask, action_space: ActionSpace, *,
                latent_dim: int = 10, latent_period: int = 1, prior: PriorKind | str = "iso",
                ar_alpha: float = 0.9, sharing: Sharing | str = Sharing.SHARED,
                hl_hidden=(200,), ll_hidden=(200, 100), prior_hidden=(64,), activation="elu",
                rng: np.random.Generator | None = None, out_scale: float = 0.1) -> PolicyStack:
    """Construct and initialise a stack. ``prior`` may be a PriorKind or one of
    ``"iso"``, ``"ar1"``, ``"ar_learned"``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    mask.check_available(list(obs_dims))
    dims = dict(obs_dims)

    def width(names):
        return sum(dims[n] for n in names)

    specs, params = {}, {}
    if latent_dim > 0:
        specs["hl"] = mlp_spec(width(mask.hl), hl_hidden,
                               {"mean": latent_dim, "log_std": latent_dim}, activation)
    specs["ll"] = mlp_spec(width(mask.ll) + latent_dim, ll_hidden, _ll_output(action_space), activation)
    sharing = Sharing(sharing)
    if sharing is Sharing.SEPARATE:
        specs["default_ll"] = mlp_spec(width(mask.default_ll) + latent_dim, ll_hidden, _ll_output(action_space),
                                       activation)
    if isinstance(prior, str):
        prior = {"iso": IsoGaussian(), "ar1": AR1(ar_alpha)}.get(prior) or (
            ARLearned(mlp_spec(latent_dim, prior_hidden, {"mean": latent_dim, "log_std": latent_dim}, activation))
            if prior == "ar_learned" else None)
        if prior is None:
            raise ConfigError("prior must be iso, ar1 or ar_learned")
    if isinstance(prior, ARLearned):
        if latent_dim == 0:
            raise ConfigError("a learned AR prior needs a latent")
        specs["default_hl"] = prior.spec
    for name, spec in specs.items():
        params[name] = init_params(spec, rng, out_scale=out_scale)
    return PolicyStack(specs, params, prior, sharing, latent_dim, latent_period, mask, action_space, dims)


# ---------------------------------------------------------------------------
# head plumbing shared with the learners


@dataclass
class HeadRecord:
    tape: Tape
    raw_log_std: np.ndarray | None = None


def gaussian_head(spec: MLPSpec, params: ParamVector, inp, record: bool = False):
    """Run a (mean, log_std) network. Returns ``(dist, record_or_None)``."""
    if record:
        out, tape = mlp_forward(spec, params, inp, record=True)
    else:
        out, tape = mlp_forward(spec, params, inp), None
    raw = out[..., spec.head("log_std")]
    dist = DiagGaussian.from_log_std(out[..., spec.head("mean")], soft_clamp(raw))
    return dist, (HeadRecord(tape, raw) if record else None)


def gaussian_head_backward(spec: MLPSpec, params: ParamVector, rec: HeadRecord, d_mean, d_log_std):
    cot = np.zeros(rec.raw_log_std.shape[:-1] + (spec.output_dim,))
    cot[..., spec.head("mean")] = d_mean
    cot[..., spec.head("log_std")] = d_log_std * soft_clamp_grad(rec.raw_log_std)
    return mlp_backward(spec, params, rec.tape, cot)


def categorical_head(spec: MLPSpec, params: ParamVector, inp, record: bool = False):
    if record:
        out, tape = mlp_forward(spec, params, inp, record=True)
        return CategoricalDist(out), HeadRecord(tape)
    return CategoricalDist(mlp_forward(spec, params, inp)), None


def categorical_head_backward(spec: MLPSpec, params: ParamVector, rec: HeadRecord, d_logits):
    return mlp_backward(spec, params, rec.tape, d_logits)


def action_head(stack: PolicyStack, name: str, inp, params: ParamVector | None = None, record: bool = False):
    p = stack.params[name] if params is None else params
    if stack.action_space.discrete:
        return categorical_head(stack.specs[name], p, inp, record)
    return gaussian_head(stack.specs[name], p, inp, record)


def ll_input(stack: PolicyStack, x: ObservationBundle, z, view: Sequence[str]) -> np.ndarray:
    parts = [x.view(view)]
    if stack.latent_dim:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != stack.latent_dim:
            raise ConfigError(f"latent has size {z.shape[-1]}, stack expects {stack.latent_dim}")
        parts.append(np.broadcast_to(z, x.batch_shape + (stack.latent_dim,)))
    return np.concatenate(parts, axis=-1)


# ---------------------------------------------------------------------------
# operations


def hl_distribution(stack: PolicyStack, x: ObservationBundle, params: ParamVector | None = None) -> DiagGaussian:
    p = stack.params["hl"] if params is None else params
    return gaussian_head(stack.specs["hl"], p, x.view(stack.mask.hl))[0]


def hl_step(stack: PolicyStack, x: ObservationBundle, eps, params: ParamVector | None = None):
    """Reparameterised HL sample: returns ``(z, dist)`` with z = mu + sigma * eps."""
    if not stack.hierarchical:
        raise ConfigError("flat stack has no HL policy")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape[-1] != stack.latent_dim:
        raise ConfigError(f"noise has size {eps.shape[-1]}, latent is {stack.latent_dim}")
    dist = hl_distribution(stack, x, params)
    return sample_reparam(dist, eps), dist


def ll_step(stack: PolicyStack, z, x: ObservationBundle, params: ParamVector | None = None):
    """Action distribution pi^L(a | z, x) from the LL view and the latent."""
    return action_head(stack, "ll", ll_input(stack, x, z, stack.mask.ll), params)[0]


def default_ll_step(stack: PolicyStack, z, x: ObservationBundle, params: ParamVector | None = None):
    """pi0^L(a | z, x). In SHARED mode this *is* the agent's LL (same parameters)."""
    if stack.sharing is Sharing.SHARED:
        return ll_step(stack, z, x, params)
    return action_head(stack, "default_ll", ll_input(stack, x, z, stack.mask.default_ll), params)[0]


def default_hl_step(kind: PriorKind, z_prev, params: ParamVector | None = None) -> DiagGaussian:
    """HL default policy given the previous latent (zero vector at episode start)."""
    z_prev = np.asarray(z_prev, dtype=np.float64)
    if isinstance(kind, IsoGaussian):
        return DiagGaussian(np.zeros_like(z_prev), np.ones_like(z_prev))
    if isinstance(kind, AR1):
        return DiagGaussian(kind.alpha * z_prev, np.full_like(z_prev, kind.stddev))
    if isinstance(kind, ARLearned):
        if params is None:
            raise ConfigError("learned AR prior needs its parameters")
        return gaussian_head(kind.spec, params, z_prev)[0]
    raise ConfigError(f"unknown prior kind {kind!r}")


def latent_schedule(t, p: int):
    """True where a fresh latent is drawn: t mod p == 1 (every step when p == 1).

    Episode steps are numbered from 1.
    """
    if p < 1:
        raise ConfigError("latent period must be >= 1")
    t = np.asarray(t)
    if np.any(t < 1):
        raise ConfigError("episode steps are numbered from 1")
    out = (t - 1) % p == 0
    return bool(out) if out.ndim == 0 else out


def step_kl_terms(stack: PolicyStack, x: ObservationBundle, z, hl_dist: DiagGaussian | None, ll_dist,
                  default_params: Mapping[str, ParamVector] | None = None, z_prev=None):
    """Per-step KL(pi^H || pi0^H) and KL(pi^L || pi0^L).

    ``default_params`` optionally overrides the default-policy parameters (e.g.
    target copies). The LL term is exactly zero when the LL is shared.
    """
    default_params = dict(default_params or {})
    batch = x.batch_shape
    if stack.hierarchical:
        if z_prev is None:
            z_prev = np.zeros(batch + (stack.latent_dim,))
        prior = default_hl_step(stack.prior, z_prev,
                                default_params.get("default_hl", stack.params.get("default_hl")))
        kl_hl = kl_diag_gaussian(hl_dist, prior)
    else:
        kl_hl = np.zeros(batch)
    if stack.sharing is Sharing.SHARED:
        kl_ll = np.zeros(np.shape(kl_hl))
    else:
        d0 = default_ll_step(stack, z, x, default_params.get("default_ll"))
        kl_ll = kl_categorical(ll_dist, d0) if stack.action_space.discrete else kl_diag_gaussian(ll_dist, d0)
    return kl_hl, kl_ll


@dataclass
class LatentState:
    """Held latent for infrequent resampling: z changes only where the schedule fires."""

    z: np.ndarray
    z_prev: np.ndarray
    t: int
    period: int

    @classmethod
    def start(cls, latent_dim: int, period: int) -> "LatentState":
        zero = np.zeros(latent_dim)
        return cls(zero.copy(), zero.copy(), 0, period)

    def advance(self, sample_fn) -> bool:
        """Move to the next step; call ``sample_fn()`` for a new z if scheduled."""
        self.t += 1
        if latent_schedule(self.t, self.period):
            self.z_prev = self.z
            self.z = np.asarray(sample_fn(), dtype=np.float64)
            return True
        return False
