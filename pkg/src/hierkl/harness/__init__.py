from .config import DEFAULTS, ExperimentConfig, load_config, parse_config_text
from .klfield import goal_directed_fraction, kl_field, write_field
from .runtime import (ActorPool, MetricsWriter, RunResult, Snapshot, SnapshotMailbox, env_spec, evaluate,
                      load_run_checkpoint, policy_act, read_metrics, restore_stack, run_training)
from .transfer import TransferMode, params_digest, prepare_transfer, run_transfer

__all__ = [
    "DEFAULTS", "ExperimentConfig", "load_config", "parse_config_text", "goal_directed_fraction", "kl_field",
    "write_field", "ActorPool", "MetricsWriter", "RunResult", "Snapshot", "SnapshotMailbox", "env_spec",
    "evaluate", "load_run_checkpoint", "policy_act", "read_metrics", "restore_stack", "run_training",
    "TransferMode", "params_digest", "prepare_transfer", "run_transfer",
]
