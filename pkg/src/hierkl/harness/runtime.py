"""Actor/learner training loop, evaluation and run checkpoints.

Actors step their environments with a policy snapshot taken from a mailbox
and cut the experience into K-step segments that never cross an episode
boundary. The learner samples segment batches from replay and applies the
configured update. With ``run.threaded = false`` (the default) the actors are
stepped together from the learner's context with one batched inference per
step, which makes a run a deterministic function of the seed.
"""

from __future__ import annotations

import csv
import logging
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from ..autodiff import ParamVector, load_checkpoint, save_checkpoint
from ..distributions import categorical_log_prob, gaussian_log_prob, sample_categorical
from ..envs import GridConfig, GridVecEnv, PointMassConfig, PointMassVecEnv, TabularVecEnv
from ..errors import ConfigError, NonFiniteError, ShapeMismatchError
from ..learners import LearnerState, discrete_vtrace_update, make_learner_state, onpolicy_update, svg0_update
from ..offpolicy import ReplayBuffer, ReplaySegment, collate
from ..oracles import TabularMDP, random_mdp
from ..policy import (ActionSpace, ObservationBundle, PolicyStack, action_head, hl_distribution, latent_schedule,
                      ll_input)
from .config import ExperimentConfig

log = logging.getLogger(__name__)

METRICS_HEADER = ("learner_steps", "learner_frames", "actor_env_steps", "episodes", "return_mean", "return_std",
                  "success_rate", "kl_hl", "kl_ll", "policy_loss", "value_loss", "distill_loss", "entropy",
                  "eval_success", "eval_return", "skipped_updates")
TIMING_HEADER = ("learner_steps", "wall_clock")
EVAL_HEADER = ("learner_steps", "learner_frames", "success", "return_mean")
CHECKPOINT_NAME = "checkpoint.npz"
# consecutive skipped (non-finite) updates tolerated before the run aborts
MAX_CONSECUTIVE_SKIPS = 20


# ---------------------------------------------------------------------------
# environments


@dataclass
class EnvSpec:
    obs_dims: dict[str, int]
    action_space: ActionSpace
    make: Callable[[int, np.random.Generator], object]
    grid: GridConfig | None = None
    mdp: TabularMDP | None = None


def env_spec(cfg: ExperimentConfig) -> EnvSpec:
    name = cfg["env.name"]
    if name == "grid":
        gc = GridConfig(size=cfg["env.size"], goal_reward=cfg["env.goal_reward"], step_penalty=cfg["env.step_penalty"],
                        wall_penalty=cfg["env.wall_penalty"], cap=cfg["env.cap"], n=cfg["env.n"])
        return EnvSpec(gc.obs_dims, ActionSpace("discrete", 4), lambda num, rng: GridVecEnv(gc, num, rng), grid=gc)
    if name == "pointmass":
        pc = PointMassConfig(task=cfg["env.task"], n_targets=cfg["env.n_targets"], arena=cfg["env.arena"] or None,
                             k_fwd=cfg["env.k_fwd"], k_turn=cfg["env.k_turn"], target_radius=cfg["env.target_radius"],
                             cap=cfg["env.cap"])
        return EnvSpec(pc.obs_dims, ActionSpace("continuous", 2, bound=1.0), lambda num, rng: PointMassVecEnv(pc, num, rng))
    mdp = random_mdp(np.random.default_rng(cfg["env.mdp_seed"]), cfg["env.states"], cfg["env.actions"],
                     gamma=cfg["learner.gamma"])
    return EnvSpec({"state": mdp.num_states}, ActionSpace("discrete", mdp.num_actions),
                   lambda num, rng: TabularVecEnv(mdp, num, rng, cap=cfg["env.cap"]), mdp=mdp)


# ---------------------------------------------------------------------------
# parameter snapshots


@dataclass(frozen=True)
class Snapshot:
    """Read-only copy of the acting parameters tagged with a learner version."""

    version: int
    params: Mapping[str, ParamVector]

    @classmethod
    def take(cls, params: Mapping[str, ParamVector], version: int) -> "Snapshot":
        frozen = {}
        for k, p in params.items():
            c = p.copy()
            c.values.setflags(write=False)
            frozen[k] = c
        return cls(version, frozen)


class SnapshotMailbox:
    """Single-slot mailbox; readers always get one whole snapshot."""

    def __init__(self, snapshot: Snapshot):
        self._lock = threading.Lock()
        self._snap = snapshot

    def publish(self, params: Mapping[str, ParamVector], version: int):
        snap = Snapshot.take(params, version)
        with self._lock:
            if version < self._snap.version:
                raise ConfigError("snapshot versions must not go backwards")
            self._snap = snap

    def latest(self) -> Snapshot:
        with self._lock:
            return self._snap


# ---------------------------------------------------------------------------
# acting


def policy_act(stack: PolicyStack, params: Mapping[str, ParamVector], obs: ObservationBundle, z, z_prev, t,
               rng: np.random.Generator, greedy: bool = False):
    """One batched acting step. ``t`` holds the 1-based episode step of each
    row; latents are redrawn where the schedule fires. Returns
    ``(actions, log_probs, z, z_prev)``."""
    if stack.hierarchical:
        fire = np.atleast_1d(latent_schedule(t, stack.latent_period))
        if fire.any():
            hl = hl_distribution(stack, obs, params["hl"])
            z_new = hl.mean if greedy else hl.mean + hl.std * rng.standard_normal(hl.mean.shape)
            z_prev = np.where(fire[:, None], z, z_prev)
            z = np.where(fire[:, None], z_new, z)
    dist = action_head(stack, "ll", ll_input(stack, obs, z, stack.mask.ll), params["ll"])[0]
    if stack.action_space.discrete:
        if greedy:
            actions = np.argmax(dist.logits, axis=-1)
        else:
            actions = sample_categorical(dist, rng)
        logp = categorical_log_prob(dist, actions)
    else:
        actions = dist.mean if greedy else dist.mean + dist.std * rng.standard_normal(dist.mean.shape)
        logp = gaussian_log_prob(dist, actions)
    return actions, logp, z, z_prev


@dataclass
class _Builder:
    obs: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    logp: list = field(default_factory=list)
    t0: int = 1
    z_prev0: np.ndarray | None = None


class ActorPool:
    """A batch of environments acting with one shared snapshot per step."""

    def __init__(self, stack: PolicyStack, env, unroll: int, rng: np.random.Generator, window: int = 100):
        self.stack, self.env, self.unroll, self.rng = stack, env, unroll, rng
        n, dz = env.num, stack.latent_dim
        self.z = np.zeros((n, dz))
        self.z_prev = np.zeros((n, dz))
        self.t = np.zeros(n, dtype=np.int64)
        self.obs = env.observe()
        self.builders = [_Builder() for _ in range(n)]
        self.ep_return = np.zeros(n)
        self.returns: deque = deque(maxlen=window)
        self.successes: deque = deque(maxlen=window)
        self.env_steps = 0
        self.episodes = 0

    def step(self, snap: Snapshot) -> list[ReplaySegment]:
        obs = self.obs
        self.t += 1
        z_before = self.z
        actions, logp, self.z, self.z_prev = policy_act(self.stack, snap.params, obs, self.z, self.z_prev, self.t,
                                                        self.rng)
        r, reached, trunc, obs_after = self.env.step(actions)
        self.env_steps += self.env.num
        self.ep_return += r
        out = []
        for i in range(self.env.num):
            b = self.builders[i]
            if not b.rewards:
                b.t0, b.z_prev0 = int(self.t[i]), z_before[i].copy()
            b.obs.append({k: v[i] for k, v in obs.groups.items()})
            b.actions.append(actions[i])
            b.rewards.append(r[i])
            b.logp.append(logp[i])
            done = bool(reached[i] or trunc[i])
            if done or len(b.rewards) == self.unroll:
                out.append(self._flush(i, {k: v[i] for k, v in obs_after.groups.items()}, bool(reached[i]),
                                       snap.version))
            if done:
                self.returns.append(float(self.ep_return[i]))
                self.successes.append(float(reached[i]))
                self.episodes += 1
                self.ep_return[i] = 0.0
                self.z[i] = 0.0
                self.z_prev[i] = 0.0
                self.t[i] = 0
        self.obs = self.env.observe()
        return out

    def _flush(self, i: int, last_obs: dict, terminal: bool, version: int) -> ReplaySegment:
        b = self.builders[i]
        L, K = len(b.rewards), self.unroll
        rows = b.obs + [last_obs] * (K + 1 - L)
        obs = ObservationBundle({k: np.stack([row[k] for row in rows]) for k in last_obs})
        act = np.asarray(b.actions)
        pad = K - L
        if pad:
            act = np.concatenate([act, np.zeros((pad,) + act.shape[1:], dtype=act.dtype)])
        seg = ReplaySegment(obs=obs, actions=act, rewards=np.pad(np.asarray(b.rewards, dtype=np.float64), (0, pad)),
                            behaviour_log_prob=np.pad(np.asarray(b.logp, dtype=np.float64), (0, pad)), length=L,
                            terminal=terminal, t0=b.t0,
                            z_prev0=b.z_prev0 if self.stack.hierarchical else None, version=version)
        self.builders[i] = _Builder()
        return seg


def evaluate(stack: PolicyStack, params: Mapping[str, ParamVector], spec: EnvSpec, episodes: int,
             rng: np.random.Generator, greedy: bool = True, max_steps: int | None = None) -> dict[str, float]:
    """Run ``episodes`` episodes (one per environment copy) with the mean latent
    and the argmax / mean action. Returns success fraction and mean return."""
    env = spec.make(episodes, rng)
    n, dz = episodes, stack.latent_dim
    z, z_prev = np.zeros((n, dz)), np.zeros((n, dz))
    t = np.zeros(n, dtype=np.int64)
    live = np.ones(n, dtype=bool)
    ret = np.zeros(n)
    success = np.zeros(n, dtype=bool)
    steps = 0
    while live.any():
        t += 1
        actions, _, z, z_prev = policy_act(stack, params, env.observe(), z, z_prev, t, rng, greedy=greedy)
        r, reached, trunc, _ = env.step(actions)
        ret += np.where(live, r, 0.0)
        success |= live & reached
        live &= ~(reached | trunc)
        steps += 1
        if max_steps is not None and steps >= max_steps:
            break
    return {"success": float(success.mean()), "return_mean": float(ret.mean())}


# ---------------------------------------------------------------------------
# checkpoints


def save_run_checkpoint(path, state: LearnerState, cfg: ExperimentConfig, extra: Mapping | None = None):
    comps = state.components()
    manifest = {
        "components": {k: {"frozen": k in state.frozen} for k in comps},
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.values.items()},
        "learner_steps": state.updates,
    }
    manifest.update(extra or {})
    save_checkpoint(path, comps, manifest)


def load_run_checkpoint(path):
    """Returns ``(components, manifest, config)``."""
    path = Path(path)
    if path.is_dir():
        path = path / CHECKPOINT_NAME
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    comps, manifest = load_checkpoint(path)
    cfg = ExperimentConfig(manifest.get("config", {}))
    return comps, manifest, cfg


def load_component(stack_or_state, name: str, spec, params: ParamVector):
    """Install checkpoint parameters, refusing incompatible shapes."""
    if isinstance(stack_or_state, LearnerState):
        target_spec = stack_or_state.critic_spec if name == "critic" else stack_or_state.stack.specs.get(name)
    else:
        target_spec = stack_or_state.specs.get(name)
    if target_spec is None:
        raise ShapeMismatchError(f"component {name!r} does not exist in the target stack")
    if target_spec != spec:
        raise ShapeMismatchError(f"component {name!r}: checkpoint layers {spec.layer_sizes} vs target "
                                 f"layers {target_spec.layer_sizes}")
    if isinstance(stack_or_state, LearnerState):
        stack_or_state.set_params(name, params.copy())
        stack_or_state.target[name] = params.copy()
    else:
        stack_or_state.params[name] = params.copy()


def restore_stack(checkpoint, cfg: ExperimentConfig | None = None) -> tuple[PolicyStack, ExperimentConfig]:
    comps, _, saved = load_run_checkpoint(checkpoint)
    cfg = cfg or saved
    spec = env_spec(cfg)
    stack = cfg.build_stack(spec.obs_dims, spec.action_space, np.random.default_rng(0))
    for name in stack.params:
        if name not in comps:
            raise ShapeMismatchError(f"checkpoint has no component {name!r}")
        load_component(stack, name, *comps[name])
    return stack, cfg


# ---------------------------------------------------------------------------
# metrics


class MetricsWriter:
    """CSV rows with a fixed header; wall-clock time goes to a sidecar file so
    that the metrics themselves are a deterministic function of the seed."""

    def __init__(self, out_dir: Path):
        self.path = out_dir / "metrics.csv"
        self.timing_path = out_dir / "timing.csv"
        self.eval_path = out_dir / "eval.csv"
        for p, header in ((self.path, METRICS_HEADER), (self.timing_path, TIMING_HEADER),
                          (self.eval_path, EVAL_HEADER)):
            with open(p, "w", newline="") as fh:
                csv.writer(fh).writerow(header)
        self.last_step = -1

    @staticmethod
    def _fmt(v) -> str:
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if v is None or (isinstance(v, float) and np.isnan(v)):
            return ""
        return f"{float(v):.10g}"

    def _append(self, path, values):
        with open(path, "a", newline="") as fh:
            csv.writer(fh).writerow([self._fmt(v) for v in values])

    def row(self, values: Mapping[str, object], wall_clock: float):
        step = int(values["learner_steps"])
        if step <= self.last_step:
            raise ConfigError("learner_steps must strictly increase between metrics rows")
        self.last_step = step
        self._append(self.path, [values.get(k) for k in METRICS_HEADER])
        self._append(self.timing_path, [step, round(wall_clock, 3)])

    def eval_row(self, values: Mapping[str, object]):
        self._append(self.eval_path, [values.get(k) for k in EVAL_HEADER])


def read_metrics(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (float(v) if v != "" else float("nan")) for k, v in r.items()} for r in rows]


# ---------------------------------------------------------------------------
# training


@dataclass
class RunResult:
    out_dir: Path
    checkpoint: Path
    state: LearnerState
    learner_frames: int
    env_steps: int
    evals: list[dict] = field(default_factory=list)

    @property
    def final_eval(self) -> dict | None:
        return self.evals[-1] if self.evals else None


def _update_fn(kind: str):
    return {"svg0": svg0_update, "onpolicy": onpolicy_update, "discrete_vtrace": discrete_vtrace_update}[kind]


def build_learner(cfg: ExperimentConfig, spec: EnvSpec, seed_seq: np.random.SeedSequence):
    init_seq, learn_seq = seed_seq.spawn(2)
    stack = cfg.build_stack(spec.obs_dims, spec.action_space, np.random.default_rng(init_seq))
    lcfg = cfg.learner_config()
    kind = "v" if cfg["learner.kind"] == "discrete_vtrace" else "q"
    state = make_learner_state(stack, lcfg, critic=kind, critic_hidden=cfg["policy.critic_hidden"],
                               activation=cfg["policy.activation"],
                               seed=int(learn_seq.generate_state(1)[0]))
    if cfg["policy.fixed_default"]:
        zero = stack.params["default_ll"].with_values(np.zeros_like(stack.params["default_ll"].values))
        state.set_params("default_ll", zero)
        state.target["default_ll"] = zero.copy()
        state.frozen.add("default_ll")
    return state, lcfg


def run_training(cfg: ExperimentConfig, *, state: LearnerState | None = None,
                 on_update: Callable[[LearnerState, dict], None] | None = None) -> RunResult:
    """Train until ``run.frames`` learner frames have been processed, or until an
    eval reaches ``run.stop_success`` when that is set.

    ``state`` lets callers (transfer) hand in a prepared learner state.
    Writes ``metrics.csv``, ``timing.csv``, ``eval.csv``, ``config.txt`` and
    ``checkpoint.npz`` into ``run.out_dir``.
    """
    out_dir = Path(cfg["run.out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(cfg.to_text())
    spec = env_spec(cfg)
    root = np.random.SeedSequence(cfg["run.seed"])
    learner_seq, env_seq, actor_seq, replay_seq, eval_seq = root.spawn(5)
    if state is None:
        state, lcfg = build_learner(cfg, spec, learner_seq)
    else:
        lcfg = cfg.learner_config()
    update = _update_fn(cfg["learner.kind"])
    B, K = lcfg.batch_size, lcfg.unroll
    quasi = cfg["learner.quasi_onpolicy"]
    replay = ReplayBuffer(B) if quasi else ReplayBuffer.for_steps(cfg["learner.replay_capacity"], K)
    replay_rng = np.random.default_rng(replay_seq)
    mailbox = SnapshotMailbox(Snapshot.take(state.stack.params, 0))
    writer = MetricsWriter(out_dir)
    total = cfg["run.frames"]
    collect_steps = cfg["run.collect_steps"] or K
    eval_every = cfg["run.eval_every"]
    acc: dict[str, list] = {}
    frames = 0
    next_eval = eval_every if eval_every > 0 else None
    evals: list[dict] = []
    last_eval = {"eval_success": None, "eval_return": None}
    consecutive_skips = 0
    stop_at = cfg["run.stop_success"]
    stopped = False
    start = time.perf_counter()

    threaded = cfg["run.threaded"]
    if threaded:
        actors = _ThreadedActors(state.stack, spec, cfg["run.num_actors"], K, mailbox, replay, env_seq, actor_seq)
        pools = actors.pools
    else:
        env = spec.make(cfg["run.num_actors"], np.random.default_rng(env_seq))
        pools = [ActorPool(state.stack, env, K, np.random.default_rng(actor_seq))]

    def run_eval():
        res = evaluate(state.stack, state.stack.params, spec, cfg["run.eval_episodes"],
                       np.random.default_rng(eval_seq.spawn(1)[0]))
        row = {"learner_steps": state.updates, "learner_frames": frames, **res}
        evals.append(row)
        writer.eval_row(row)
        last_eval.update(eval_success=res["success"], eval_return=res["return_mean"])

    def emit_row():
        if state.updates <= writer.last_step:
            return
        rets = [r for p in pools for r in p.returns]
        succ = [s for p in pools for s in p.successes]
        mean = lambda k: float(np.mean(acc[k])) if acc.get(k) else None  # noqa: E731
        writer.row({
            "learner_steps": state.updates, "learner_frames": frames,
            "actor_env_steps": sum(p.env_steps for p in pools), "episodes": sum(p.episodes for p in pools),
            "return_mean": float(np.mean(rets)) if rets else None,
            "return_std": float(np.std(rets)) if rets else None,
            "success_rate": float(np.mean(succ)) if succ else None,
            "kl_hl": mean("kl_hl"), "kl_ll": mean("kl_ll"), "policy_loss": mean("policy_loss"),
            "value_loss": mean("q_loss"), "distill_loss": mean("distill_loss"), "entropy": mean("entropy"),
            "skipped_updates": state.skipped, **last_eval,
        }, time.perf_counter() - start)
        acc.clear()

    if threaded:
        actors.start()
    try:
        while frames < total:
            if threaded:
                batch_segs = actors.wait_for(B if quasi else cfg["learner.min_replay"], quasi)
                if batch_segs is None:
                    continue
            else:
                snap = mailbox.latest()
                for _ in range(collect_steps):
                    for seg in pools[0].step(snap):
                        replay.push(seg)
            for _ in range(cfg["learner.updates_per_collect"]):
                if quasi:
                    if len(replay) < B:
                        break
                    batch = collate(replay.pop_oldest(B))
                else:
                    if len(replay) < max(1, cfg["learner.min_replay"]):
                        break
                    batch = collate(replay.sample(B, replay_rng))
                skipped_before = state.skipped
                state, diag = update(state, batch, lcfg)
                if state.skipped > skipped_before:
                    consecutive_skips += 1
                    if consecutive_skips >= MAX_CONSECUTIVE_SKIPS:
                        raise NonFiniteError(f"training collapsed: {consecutive_skips} consecutive non-finite "
                                             f"updates (last at learner step {state.updates})")
                    continue
                consecutive_skips = 0
                frames += int(batch.lengths.sum())
                for k in ("kl_hl", "kl_ll", "policy_loss", "q_loss", "distill_loss", "entropy"):
                    acc.setdefault(k, []).append(diag[k])
                if on_update is not None:
                    on_update(state, diag)
                if state.updates % cfg["run.actor_refresh"] == 0:
                    mailbox.publish(state.stack.params, state.updates)
                if state.updates % cfg["run.metrics_every"] == 0:
                    emit_row()
                ck = cfg["run.checkpoint_every"]
                if ck and state.updates % ck == 0:
                    save_run_checkpoint(out_dir / CHECKPOINT_NAME, state, cfg, {"learner_frames": frames})
                if next_eval is not None and frames >= next_eval:
                    run_eval()
                    while next_eval <= frames:
                        next_eval += eval_every
                    if stop_at and evals[-1]["success"] >= stop_at:
                        stopped = True
                if frames >= total or stopped:
                    break
            if stopped:
                break
    finally:
        if threaded:
            actors.stop()
    if cfg["run.eval_episodes"] > 0 and (not evals or evals[-1]["learner_steps"] != state.updates):
        run_eval()
    emit_row()
    ckpt = out_dir / CHECKPOINT_NAME
    save_run_checkpoint(ckpt, state, cfg, {"learner_frames": frames})
    return RunResult(out_dir, ckpt, state, frames, sum(p.env_steps for p in pools), evals)


class _ThreadedActors:
    """One thread per actor, each owning a single environment."""

    def __init__(self, stack, spec: EnvSpec, num: int, unroll: int, mailbox: SnapshotMailbox,
                 replay: ReplayBuffer, env_seq, actor_seq):
        self.mailbox, self.replay = mailbox, replay
        self.stop_event = threading.Event()
        self.ready = threading.Condition()
        env_seqs, actor_seqs = env_seq.spawn(num), actor_seq.spawn(num)
        self.pools = [ActorPool(stack, spec.make(1, np.random.default_rng(e)), unroll, np.random.default_rng(a))
                      for e, a in zip(env_seqs, actor_seqs)]
        self.threads = [threading.Thread(target=self._loop, args=(p,), daemon=True) for p in self.pools]
        self.errors: list[BaseException] = []

    def _loop(self, pool: ActorPool):
        try:
            while not self.stop_event.is_set():
                segs = pool.step(self.mailbox.latest())
                if segs:
                    for seg in segs:
                        self.replay.push(seg)
                    with self.ready:
                        self.ready.notify_all()
        except BaseException as exc:  # surfaced by the learner
            self.errors.append(exc)
            with self.ready:
                self.ready.notify_all()

    def start(self):
        for t in self.threads:
            t.start()

    def wait_for(self, n: int, quasi: bool):
        with self.ready:
            self.ready.wait_for(lambda: len(self.replay) >= max(n, 1) or self.errors, timeout=1.0)
        if self.errors:
            raise self.errors[0]
        return True if len(self.replay) >= max(n, 1) else None

    def stop(self):
        self.stop_event.set()
        for t in self.threads:
            t.join(timeout=5.0)
