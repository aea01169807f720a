"""Flat ``key = value`` experiment configuration with dotted keys.

Every key has a default; unknown keys are rejected. Values are parsed as
Python literals where possible (``1e-3``, ``(200, 100)``, ``true``) and kept
as strings otherwise.
"""

from __future__ import annotations

import ast
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..learners import LearnerConfig
from ..objectives import RegularizerConfig
from ..offpolicy import TraceConfig
from ..policy import AsymmetryMask, ActionSpace, build_stack

DEFAULTS: dict[str, object] = {
    "env.name": "grid",
    # grid world
    "env.size": 8,
    "env.n": 1,
    "env.cap": 400,
    "env.goal_reward": 1.0,
    "env.step_penalty": 0.1,
    "env.wall_penalty": 0.2,
    # point mass
    "env.task": "goto",
    "env.n_targets": 3,
    "env.arena": 0.0,  # 0 selects the task default
    "env.k_fwd": 0.05,
    "env.k_turn": 0.2,
    "env.target_radius": 0.3,
    # tabular
    "env.states": 5,
    "env.actions": 3,
    "env.mdp_seed": 0,
    "learner.kind": "discrete_vtrace",
    "learner.lr_policy": 1e-4,
    "learner.lr_critic": 1e-4,
    "learner.lr_default": 1e-4,
    "learner.alpha": 1e-3,
    "learner.alpha_entropy": 1e-4,
    "learner.gamma": 0.99,
    "learner.batch_size": 512,
    "learner.unroll": 10,
    "learner.target_period": 100,
    "learner.lambda": 1.0,
    "learner.c_bar": 1.0,
    "learner.rho_bar": 1.0,
    "learner.q_samples": 1,
    "learner.max_grad_norm": 0.0,  # 0 disables clipping
    "learner.action_penalty": 1.0,  # pull on action means outside a bounded action box
    "learner.replay_capacity": 1_000_000,  # steps
    "learner.min_replay": 1,  # segments before the first update
    "learner.quasi_onpolicy": False,
    "learner.updates_per_collect": 1,
    "policy.latent_dim": 10,
    "policy.latent_period": 1,
    "policy.prior": "iso",
    "policy.ar_alpha": 0.9,
    "policy.sharing": "shared",
    # separate sharing only: pin the default LL to zero outputs (uniform / standard normal) and freeze it
    "policy.fixed_default": False,
    "policy.hl_hidden": (200,),
    "policy.ll_hidden": (200, 100),
    "policy.prior_hidden": (64,),
    "policy.critic_hidden": (400, 300),
    "policy.activation": "elu",
    "policy.out_scale": 0.1,
    "policy.asymmetry": True,
    "policy.hl_view": "",
    "policy.ll_view": "",
    "policy.default_ll_view": "",
    "policy.critic_view": "",
    "run.num_actors": 32,
    "run.collect_steps": 0,  # env steps per actor between learner phases; 0 means the unroll length
    "run.frames": 2_000_000,  # learner frames (valid replayed steps)
    "run.seed": 0,
    "run.out_dir": "runs/default",
    "run.metrics_every": 50,
    "run.checkpoint_every": 0,  # updates; 0 writes only the final checkpoint
    "run.eval_every": 10_000,  # learner frames
    "run.eval_episodes": 100,
    "run.eval_envs": 50,
    "run.actor_refresh": 10,
    "run.threaded": False,
    "run.stop_success": 0.0,  # end the run once an eval reaches this success rate; 0 disables
    "transfer.mode": "none",
    "transfer.checkpoint": "",
}

# default observation routing per environment
VIEWS = {
    "grid": {"hl": ("global",), "ll": ("internal",), "default_ll": ("internal",), "critic": None},
    "pointmass": {"hl": ("proprio", "task"), "ll": ("proprio",), "default_ll": ("proprio",), "critic": None},
    "tabular": {"hl": ("state",), "ll": ("state",), "default_ll": ("state",), "critic": None},
}

LEARNER_KINDS = ("svg0", "discrete_vtrace", "onpolicy")


def parse_value(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(s)
    except (ValueError, SyntaxError):
        return s


def parse_config_text(text: str) -> dict[str, object]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = parse_value(value)
    return out


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, int):
            value = (value,)
        if not isinstance(value, (tuple, list)) or not all(isinstance(v, int) for v in value):
            raise ConfigError(f"{key} expects a tuple of layer sizes, got {value!r}")
        return tuple(value)
    return str(value)


@dataclass
class ExperimentConfig:
    values: dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        merged = dict(DEFAULTS)
        for k, v in self.values.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown config key {k!r}")
            merged[k] = _coerce(k, v, DEFAULTS[k])
        self.values = merged
        self.validate()

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        return cls(parse_config_text(Path(path).read_text()))

    def __getitem__(self, key: str):
        return self.values[key]

    def override(self, **dotted) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in dotted.items()})
        return ExperimentConfig(vals)

    def updated(self, mapping: dict) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update(mapping)
        return ExperimentConfig(vals)

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.values.items()))

    def validate(self):
        v = self.values
        if v["env.name"] not in VIEWS:
            raise ConfigError(f"env.name must be one of {sorted(VIEWS)}")
        if v["learner.kind"] not in LEARNER_KINDS:
            raise ConfigError(f"learner.kind must be one of {LEARNER_KINDS}")
        if v["run.num_actors"] < 1:
            raise ConfigError("run.num_actors must be >= 1")
        if v["run.frames"] < 0:
            raise ConfigError("run.frames must be >= 0")
        discrete = v["env.name"] in ("grid", "tabular")
        if discrete and v["learner.kind"] != "discrete_vtrace":
            raise ConfigError("discrete environments need learner.kind = discrete_vtrace")
        if not discrete and v["learner.kind"] == "discrete_vtrace":
            raise ConfigError("the point-mass task needs learner.kind = svg0 or onpolicy")
        if v["policy.fixed_default"] and v["policy.sharing"] != "separate":
            raise ConfigError("policy.fixed_default needs policy.sharing = separate")
        if v["transfer.mode"] not in ("none", "task_shared_ll", "task_separate_ll", "body"):
            raise ConfigError("transfer.mode must be none, task_shared_ll, task_separate_ll or body")

    # -- typed views

    def learner_config(self) -> LearnerConfig:
        v = self.values
        reg = RegularizerConfig(alpha=v["learner.alpha"], alpha_entropy=v["learner.alpha_entropy"],
                                gamma=v["learner.gamma"], latent_period=v["policy.latent_period"])
        trace = TraceConfig(lam=v["learner.lambda"], c_bar=v["learner.c_bar"], rho_bar=v["learner.rho_bar"])
        return LearnerConfig(lr_policy=v["learner.lr_policy"], lr_critic=v["learner.lr_critic"],
                             lr_default=v["learner.lr_default"], reg=reg, batch_size=v["learner.batch_size"],
                             unroll=v["learner.unroll"], target_period=v["learner.target_period"], trace=trace,
                             q_samples=v["learner.q_samples"],
                             max_grad_norm=v["learner.max_grad_norm"] or None,
                             action_penalty=v["learner.action_penalty"])

    def views(self) -> dict[str, tuple | None]:
        base = dict(VIEWS[self.values["env.name"]])
        for name in ("hl", "ll", "default_ll", "critic"):
            text = self.values[f"policy.{name}_view"]
            if text:
                base[name] = tuple(p.strip() for p in text.split(",") if p.strip())
        return base

    def mask(self) -> AsymmetryMask:
        vw = self.views()
        return AsymmetryMask(hl=vw["hl"], ll=vw["ll"], default_ll=vw["default_ll"], critic=vw["critic"],
                             enabled=self.values["policy.asymmetry"])

    def build_stack(self, obs_dims, action_space: ActionSpace, rng: np.random.Generator):
        v = self.values
        return build_stack(obs_dims, self.mask(), action_space, latent_dim=v["policy.latent_dim"],
                           latent_period=v["policy.latent_period"], prior=v["policy.prior"],
                           ar_alpha=v["policy.ar_alpha"], sharing=v["policy.sharing"],
                           hl_hidden=v["policy.hl_hidden"], ll_hidden=v["policy.ll_hidden"],
                           prior_hidden=v["policy.prior_hidden"], activation=v["policy.activation"], rng=rng,
                           out_scale=v["policy.out_scale"])


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return v
    return repr(v)


def load_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    vals = parse_config_text(Path(path).read_text()) if path else {}
    vals.update(overrides or {})
    return ExperimentConfig(vals)
