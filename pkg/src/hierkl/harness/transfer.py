"""Reusing pretrained default policies on new tasks or new bodies."""

from __future__ import annotations

import enum
import hashlib

import numpy as np

from ..errors import ConfigError, ShapeMismatchError
from ..learners import LearnerState
from ..policy import Sharing
from .config import ExperimentConfig
from .runtime import RunResult, build_learner, env_spec, load_component, load_run_checkpoint, run_training


class TransferMode(str, enum.Enum):
    # frozen defaults, fresh HL, LL is the frozen default LL
    TASK_SHARED_LL = "task_shared_ll"
    # frozen defaults, fresh HL, LL starts from the default LL and keeps learning
    TASK_SEPARATE_LL = "task_separate_ll"
    # frozen HL policy and HL default, fresh LL shared with its default
    BODY = "body"


def _source_ll(comps: dict):
    """The pretrained default LL: ``default_ll`` if it exists, else the shared ``ll``."""
    if "default_ll" in comps:
        return comps["default_ll"]
    if "ll" in comps:
        return comps["ll"]
    raise ShapeMismatchError("checkpoint has no low-level network")


def prepare_transfer(state: LearnerState, mode: TransferMode, comps: dict) -> set[str]:
    """Install checkpoint components into ``state`` per ``mode`` and return
    the frozen component names."""
    stack = state.stack
    if not stack.hierarchical:
        raise ConfigError("transfer needs a hierarchical stack")
    if "hl" not in comps:
        raise ShapeMismatchError("checkpoint has no HL policy")
    ckpt_dz = comps["hl"][0].output_dim // 2
    if ckpt_dz != stack.latent_dim:
        raise ShapeMismatchError(f"checkpoint latent dimension {ckpt_dz} differs from {stack.latent_dim}")
    frozen = set()
    if "default_hl" in stack.params:
        if "default_hl" not in comps:
            raise ShapeMismatchError("target uses a learned HL default but the checkpoint has none")
        load_component(state, "default_hl", *comps["default_hl"])
        frozen.add("default_hl")
    if mode is TransferMode.TASK_SHARED_LL:
        if stack.sharing is not Sharing.SHARED:
            raise ConfigError("task_shared_ll needs policy.sharing = shared")
        load_component(state, "ll", *_source_ll(comps))
        frozen.add("ll")
    elif mode is TransferMode.TASK_SEPARATE_LL:
        if stack.sharing is not Sharing.SEPARATE:
            raise ConfigError("task_separate_ll needs policy.sharing = separate")
        spec, params = _source_ll(comps)
        load_component(state, "default_ll", spec, params)
        load_component(state, "ll", spec, params)
        frozen.add("default_ll")
    else:
        if stack.sharing is not Sharing.SHARED:
            raise ConfigError("body transfer trains a new LL shared with its default (policy.sharing = shared)")
        load_component(state, "hl", *comps["hl"])
        frozen.add("hl")
    state.frozen = frozen
    return frozen


def params_digest(state_or_params, names) -> dict[str, str]:
    """SHA-256 of each named parameter vector (for frozen-slice checks)."""
    params = state_or_params.online() if isinstance(state_or_params, LearnerState) else state_or_params
    return {n: hashlib.sha256(np.ascontiguousarray(params[n].values).tobytes()).hexdigest() for n in names}


def run_transfer(cfg: ExperimentConfig, on_update=None) -> RunResult:
    mode_name = cfg["transfer.mode"]
    if mode_name == "none":
        raise ConfigError("transfer.mode must be set for a transfer run")
    if not cfg["transfer.checkpoint"]:
        raise ConfigError("transfer.checkpoint must name a pretrained checkpoint")
    mode = TransferMode(mode_name)
    comps, _, _ = load_run_checkpoint(cfg["transfer.checkpoint"])
    spec = env_spec(cfg)
    learner_seq = np.random.SeedSequence(cfg["run.seed"]).spawn(5)[0]
    state, _ = build_learner(cfg, spec, learner_seq)
    prepare_transfer(state, mode, comps)
    return run_training(cfg, state=state, on_update=on_update)
