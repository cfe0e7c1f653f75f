"""Barrier-synchronous multi-agent training loop.

Every agent owns an environment instance, an optional perturbation spec and
its own random streams.  All agents act with the same frozen policy snapshot
until the global transition budget of a rollout is filled; then a single
update produces the next snapshot.

Random streams are derived from ``(seed, stream_id)`` and indexed by agent,
so results do not depend on scheduling and a run restarted from a checkpoint
continues bit-identically.
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import os
import time
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from marl_reach import __version__, kernels, kvfile
from marl_reach.env import (
    ACT_DIM,
    OBS_DIM,
    REASON_NAMES,
    EnvConfig,
    VecReacher,
    observe_batch,
    sample_object,
)
from marl_reach.errors import CheckpointError, ConfigurationError, ContractViolation
from marl_reach.metrics import (
    CURVES_FILE,
    UPDATES_FILE,
    CsvSink,
    EpisodeRecord,
    UpdateRecord,
    write_manifest,
)
from marl_reach.nn import (
    AdamState,
    GaussianPolicyParams,
    ValueParams,
    init_policy,
    init_value,
    log_prob,
    params_from_arrays,
    params_to_arrays,
)
from marl_reach.numerics import RngStream
from marl_reach.perturbation import (
    INPUT,
    OUTPUT,
    ScenarioConfig,
    perturb_action,
    perturb_observation,
    scenario_from_code,
)
from marl_reach.ppo import (
    LearnerState,
    PpoConfig,
    RolloutBatch,
    UpdateStats,
    compute_gae,
    update_policy,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "marl-reach-checkpoint"
CHECKPOINT_VERSION = 1

# stream ids; per-agent streams start at AGENT_STREAM_BASE
STREAM_INIT, STREAM_SHUFFLE, STREAM_EVAL = 0, 1, 2
AGENT_STREAM_BASE = 16
ENV_STREAM, ACTION_STREAM, PERTURB_STREAM = 0, 1, 2

# positional components of the observation are brought to O(1) for the networks;
# gripper height is centred on the home pose
OBS_SCALE = np.array([3.0, 3.0, 3.0, 1.0, 1.0, 1.0, 10.0, 10.0, 1.0])
OBS_SHIFT = np.array([0.0, 0.0, 0.2, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
VALUE_SCALE = 100.0


def agent_stream(seed: int, agent_id: int, purpose: int) -> RngStream:
    return RngStream(seed, AGENT_STREAM_BASE + 3 * agent_id + purpose)


@dataclass(frozen=True)
class TrainingConfig:
    n_agents: int = 8
    total_env_steps: int = 200_000
    seed: int = 0
    eval_every: int = 0
    eval_episodes: int = 50
    checkpoint_every: int = 0
    ppo: PpoConfig = field(default_factory=PpoConfig)
    env: EnvConfig = field(default_factory=EnvConfig)

    def __post_init__(self):
        if self.n_agents < 1:
            raise ConfigurationError("n_agents must be >= 1")
        if self.total_env_steps < self.rollout_transitions:
            raise ConfigurationError(
                f"total_env_steps {self.total_env_steps} is below one rollout "
                f"({self.rollout_transitions} transitions)")
        if self.eval_episodes < 1:
            raise ConfigurationError("eval_episodes must be >= 1")

    @classmethod
    def paper_scale(cls, **overrides) -> "TrainingConfig":
        return cls(**{"n_agents": 30, "total_env_steps": 4_000_000, **overrides})

    @property
    def steps_per_agent(self) -> int:
        return max(1, self.ppo.horizon // self.n_agents)

    @property
    def rollout_transitions(self) -> int:
        return self.steps_per_agent * self.n_agents

    @property
    def n_updates(self) -> int:
        return -(-self.total_env_steps // self.rollout_transitions)

    def to_items(self) -> dict:
        items = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                 if f.name not in ("ppo", "env")}
        items.update({f"ppo.{k}": v for k, v in dataclasses.asdict(self.ppo).items()})
        items.update({f"env.{k}": v for k, v in dataclasses.asdict(self.env).items()})
        return items

    @classmethod
    def from_items(cls, items: dict) -> "TrainingConfig":
        own = {k: v for k, v in items.items() if "." not in k}
        ppo = {k[4:]: v for k, v in items.items() if k.startswith("ppo.")}
        env = {k[4:]: v for k, v in items.items() if k.startswith("env.")}
        scalars = {f.name for f in dataclasses.fields(cls)} - {"ppo", "env"}
        unknown = set(own) - scalars
        if unknown:
            raise ConfigurationError(f"unknown TrainingConfig keys: {sorted(unknown)}")
        try:
            own = {k: int(v) for k, v in own.items()}
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"bad TrainingConfig value: {exc}") from exc
        return cls(**own, ppo=kvfile.dataclass_from_items(PpoConfig, ppo),
                   env=kvfile.dataclass_from_items(EnvConfig, env))


@dataclass
class RunState:
    scenario: ScenarioConfig
    training: TrainingConfig
    version: int
    policy: GaussianPolicyParams
    value: ValueParams
    learner: LearnerState
    envs: VecReacher
    action_rngs: list
    perturb_rngs: list
    shuffle_rng: RngStream
    obs: np.ndarray  # policy-facing (possibly perturbed) observation per agent
    steps_done: int = 0
    episode_scores: np.ndarray = None
    episode_lengths: np.ndarray = None
    episode_counts: np.ndarray = None
    curves_rows: int = 0
    updates_rows: int = 0
    last_stats: Optional[UpdateStats] = None

    @property
    def n_agents(self) -> int:
        return self.training.n_agents


def _observe_for_policy(run: RunState) -> np.ndarray:
    obs = run.envs.observe()
    for j, spec in enumerate(run.scenario.per_agent_specs):
        if spec is not None and spec.channel == INPUT:
            obs[j] = perturb_observation(spec, obs[j], run.perturb_rngs[j])
    return obs


def build_scenario(scenario: ScenarioConfig, training: TrainingConfig) -> RunState:
    if scenario.n_agents != training.n_agents:
        raise ConfigurationError(
            f"scenario has {scenario.n_agents} agents but training config has {training.n_agents}")
    seed, n = training.seed, training.n_agents
    init_rng = RngStream(seed, STREAM_INIT)
    action_scale = np.asarray(training.env.action_bound, dtype=np.float64)
    policy = init_policy(init_rng, action_scale, OBS_SCALE, OBS_SHIFT)
    value = init_value(init_rng, OBS_SCALE, OBS_SHIFT, value_scale=VALUE_SCALE)
    envs = VecReacher(training.env, [agent_stream(seed, j, ENV_STREAM) for j in range(n)])
    run = RunState(
        scenario=scenario, training=training, version=0, policy=policy, value=value,
        learner=LearnerState.fresh(policy, value, training.ppo), envs=envs,
        action_rngs=[agent_stream(seed, j, ACTION_STREAM) for j in range(n)],
        perturb_rngs=[agent_stream(seed, j, PERTURB_STREAM) for j in range(n)],
        shuffle_rng=RngStream(seed, STREAM_SHUFFLE), obs=np.zeros((n, OBS_DIM)),
        episode_scores=np.zeros(n), episode_lengths=np.zeros(n, dtype=np.int64),
        episode_counts=np.zeros(n, dtype=np.int64))
    run.obs = _observe_for_policy(run)
    return run


@dataclass
class RolloutTrace:
    """Side information from a rollout that is not part of the training batch."""

    episodes: list
    executed_actions: np.ndarray  # (T, n, 4) actions after output perturbation
    versions: np.ndarray  # (T, n) snapshot version of every transition


def collect_rollout(run: RunState, horizon: Optional[int] = None):
    """Step every agent with the frozen snapshot until ``horizon`` transitions exist.

    Returns ``(RolloutBatch, RolloutTrace)``.  The batch stores policy-facing
    observations and the commanded (unperturbed) actions.
    """
    n = run.n_agents
    horizon = run.training.rollout_transitions if horizon is None else horizon
    T = max(1, horizon // n)
    policy = run.policy
    std = policy.std
    specs = run.scenario.per_agent_specs
    out_agents = [j for j, s in enumerate(specs) if s is not None and s.channel == OUTPUT]

    obs_buf = np.empty((T, n, OBS_DIM))
    act_buf = np.empty((T, n, ACT_DIM))
    exec_buf = np.empty((T, n, ACT_DIM))
    rew_buf = np.empty((T, n))
    done_buf = np.empty((T, n))
    lp_buf = np.empty((T, n))
    episodes = []
    noise = np.empty((n, ACT_DIM))
    for t in range(T):
        obs = run.obs
        mean = policy.mean(obs)
        for j in range(n):
            noise[j] = run.action_rngs[j].standard_normal(ACT_DIM)
        actions = mean + std * noise
        executed = actions.copy()
        for j in out_agents:
            executed[j] = perturb_action(specs[j], actions[j], run.perturb_rngs[j])
        try:
            rewards, reasons = run.envs.step(executed)
        except ContractViolation as exc:
            raise ContractViolation(f"environment failure at step {run.steps_done}: {exc}") from exc
        run.steps_done += n
        obs_buf[t], act_buf[t], exec_buf[t] = obs, actions, executed
        rew_buf[t], done_buf[t] = rewards, reasons != 0
        lp_buf[t] = log_prob(mean, std, actions)

        run.episode_scores += rewards
        run.episode_lengths += 1
        for j in np.flatnonzero(reasons):
            episodes.append(EpisodeRecord(run.steps_done, int(j), int(run.episode_counts[j]),
                                          float(run.episode_scores[j]),
                                          int(run.episode_lengths[j]),
                                          REASON_NAMES[int(reasons[j])]))
            run.episode_counts[j] += 1
            run.episode_scores[j] = 0.0
            run.episode_lengths[j] = 0
        run.obs = _observe_for_policy(run)

    values = run.value(obs_buf.reshape(-1, OBS_DIM)).reshape(T, n)
    batch = RolloutBatch(obs_buf, act_buf, rew_buf, done_buf, lp_buf, values, run.obs.copy(),
                         run.version)
    trace = RolloutTrace(episodes, exec_buf, np.full((T, n), run.version))
    return batch, trace


def train_iteration(run: RunState):
    """One collect/advantage/update cycle. Returns ``(episodes, update_record)``."""
    batch, trace = collect_rollout(run)
    cfg = run.training.ppo
    estimate = compute_gae(batch, run.value, cfg.gamma, cfg.lam)
    policy, value, learner, stats = update_policy(run.policy, run.value, batch, estimate, cfg,
                                                  run.learner, run.shuffle_rng)
    if stats.guard_tripped:
        log.warning("update %d aborted: %s", run.version, stats.guard_message)
    run.policy, run.value, run.learner, run.last_stats = policy, value, learner, stats
    run.version += 1
    record = UpdateRecord(run.version, run.steps_done, stats.kl, stats.beta_after,
                          stats.objective, stats.value_loss)
    return trace.episodes, record


@dataclass
class EvalResult:
    success_rate: float
    mean_score: float
    mean_episode_length: float


def evaluate(policy: GaussianPolicyParams, config: EnvConfig, episodes: int,
             rng: RngStream) -> EvalResult:
    """Mean-action episodes on unperturbed environments, run side by side."""
    if episodes < 1:
        raise ContractViolation("episodes must be >= 1")
    params = config.packed()
    gripper = np.tile(np.asarray(config.home_pose, dtype=np.float64), (episodes, 1))
    obj = np.stack([sample_object(config, rng) for _ in range(episodes)])
    steps = np.zeros(episodes, dtype=np.int64)
    scores = np.zeros(episodes)
    reason = np.zeros(episodes, dtype=np.int8)
    active = np.arange(episodes)
    while active.size:
        g = np.ascontiguousarray(gripper[active])
        o = np.ascontiguousarray(obj[active])
        s = np.ascontiguousarray(steps[active])
        act = np.ascontiguousarray(policy.mean(observe_batch(g, o)))
        r, _, why = kernels.step_batch(g, o, s, act, params)
        gripper[active], steps[active] = g, s
        scores[active] += r
        reason[active] = why
        active = active[why == 0]
    return EvalResult(float(np.mean(reason == 1)), float(scores.mean()), float(steps.mean()))


def eval_rng(training: TrainingConfig) -> RngStream:
    return RngStream(training.seed, STREAM_EVAL)


# -- checkpoints -------------------------------------------------------------

def checkpoint_save(run: RunState, path) -> None:
    """Write the full run state to ``path`` (npz archive + JSON header), atomically."""
    arrays = {}
    arrays.update(params_to_arrays("policy", run.policy.trunk))
    arrays.update(params_to_arrays("value", run.value.trunk))
    arrays["policy.log_std"] = run.policy.log_std
    arrays["policy.action_scale"] = run.policy.action_scale
    arrays["policy.obs_scale"] = run.policy.obs_scale
    arrays["policy.obs_shift"] = run.policy.obs_shift
    arrays["value.obs_scale"] = run.value.obs_scale
    arrays["value.obs_shift"] = run.value.obs_shift
    for name, st in (("policy_adam", run.learner.policy_adam), ("value_adam", run.learner.value_adam)):
        arrays[f"{name}.m"], arrays[f"{name}.v"] = st.m, st.v
    arrays["env.gripper"] = run.envs.gripper
    arrays["env.obj"] = run.envs.obj
    arrays["env.steps"] = run.envs.steps
    arrays["run.obs"] = run.obs
    arrays["run.episode_scores"] = run.episode_scores
    arrays["run.episode_lengths"] = run.episode_lengths
    arrays["run.episode_counts"] = run.episode_counts

    def adam_meta(st: AdamState):
        return {"t": st.t, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}

    meta = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "artifact_version": __version__,
        "scenario": run.scenario.code,
        "training": {k: list(v) if isinstance(v, tuple) else v
                     for k, v in run.training.to_items().items()},
        "version": run.version,
        "steps_done": run.steps_done,
        "curves_rows": run.curves_rows,
        "updates_rows": run.updates_rows,
        "beta": run.learner.beta,
        "value_scale": run.value.value_scale,
        "policy_adam": adam_meta(run.learner.policy_adam),
        "value_adam": adam_meta(run.learner.value_adam),
        "rng": {
            "env": [r.get_state() for r in run.envs.rngs],
            "action": [r.get_state() for r in run.action_rngs],
            "perturb": [r.get_state() for r in run.perturb_rngs],
            "shuffle": run.shuffle_rng.get_state(),
        },
    }
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)


def _load_arrays(path) -> tuple[dict, dict]:
    try:
        raw = Path(path).read_bytes()
        with np.load(io.BytesIO(raw), allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays.pop("meta").tobytes().decode())
    except (OSError, ValueError, KeyError, zipfile.BadZipFile, EOFError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path} has checkpoint format {meta.get('format_version')}, expected {CHECKPOINT_VERSION}")
    return arrays, meta


def checkpoint_load(path) -> RunState:
    arrays, meta = _load_arrays(path)
    try:
        items = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["training"].items()}
        training = TrainingConfig.from_items(items)
        scenario = scenario_from_code(meta["scenario"], training.n_agents)
        policy = GaussianPolicyParams(params_from_arrays("policy", arrays),
                                      arrays["policy.log_std"].copy(),
                                      arrays["policy.action_scale"].copy(),
                                      arrays["policy.obs_scale"].copy(),
                                      arrays["policy.obs_shift"].copy())
        value = ValueParams(params_from_arrays("value", arrays), arrays["value.obs_scale"].copy(),
                            float(meta["value_scale"]), arrays["value.obs_shift"].copy())
        learner = LearnerState(
            AdamState(arrays["policy_adam.m"].copy(), arrays["policy_adam.v"].copy(),
                      **meta["policy_adam"]),
            AdamState(arrays["value_adam.m"].copy(), arrays["value_adam.v"].copy(),
                      **meta["value_adam"]),
            float(meta["beta"]))
        rng = meta["rng"]
        envs = VecReacher.__new__(VecReacher)
        envs.config = training.env
        envs.rngs = [RngStream.from_state(s) for s in rng["env"]]
        envs.n = len(envs.rngs)
        envs._params = training.env.packed()
        envs.gripper = np.ascontiguousarray(arrays["env.gripper"], dtype=np.float64)
        envs.obj = np.ascontiguousarray(arrays["env.obj"], dtype=np.float64)
        envs.steps = np.ascontiguousarray(arrays["env.steps"], dtype=np.int64)
        run = RunState(
            scenario=scenario, training=training, version=int(meta["version"]), policy=policy,
            value=value, learner=learner, envs=envs,
            action_rngs=[RngStream.from_state(s) for s in rng["action"]],
            perturb_rngs=[RngStream.from_state(s) for s in rng["perturb"]],
            shuffle_rng=RngStream.from_state(rng["shuffle"]),
            obs=arrays["run.obs"].copy(), steps_done=int(meta["steps_done"]),
            episode_scores=arrays["run.episode_scores"].copy(),
            episode_lengths=arrays["run.episode_lengths"].copy(),
            episode_counts=arrays["run.episode_counts"].copy(),
            curves_rows=int(meta["curves_rows"]), updates_rows=int(meta["updates_rows"]))
    except (KeyError, TypeError, ValueError, ContractViolation, ConfigurationError) as exc:
        raise CheckpointError(f"checkpoint {path} is inconsistent: {exc}") from exc
    if envs.gripper.shape != (training.n_agents, 6) or run.obs.shape != (training.n_agents, OBS_DIM):
        raise CheckpointError(f"checkpoint {path} has state for the wrong number of agents")
    return run


def load_policy(path) -> tuple[GaussianPolicyParams, TrainingConfig]:
    run = checkpoint_load(path)
    return run.policy, run.training


# -- full runs ---------------------------------------------------------------

def manifest_items(run: RunState, extra: Optional[dict] = None) -> dict:
    items = {"artifact_version": __version__, "scenario": run.scenario.code,
             "kernel_backend": kernels.BACKEND,
             "rollout_transitions": run.training.rollout_transitions,
             "steps_per_agent": run.training.steps_per_agent,
             "obs_scale": tuple(OBS_SCALE), "value_scale": VALUE_SCALE}
    items.update(run.training.to_items())
    items.update({k: v for k, v in run.scenario.to_items().items() if k != "scenario"})
    items["steps_done"] = run.steps_done
    items["updates_done"] = run.version
    if extra:
        items.update(extra)
    return items


@dataclass
class TrainResult:
    run: RunState
    out_dir: Path
    evaluations: list
    final_eval: Optional[EvalResult]


def train(scenario: ScenarioConfig, training: TrainingConfig, out_dir,
          resume: Optional[str] = None, final_eval: bool = True,
          stop_after_updates: Optional[int] = None) -> TrainResult:
    """Train until ``training.total_env_steps`` is reached, writing run artifacts.

    ``out_dir`` receives ``manifest.txt``, ``curves.csv``, ``updates.csv`` and
    ``checkpoints/``.  With ``resume`` the run continues from a checkpoint and
    the CSV files are truncated to the rows it had written at that point.
    ``stop_after_updates`` halts early (used to cut a run for a checkpoint).
    """
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    started = time.time()
    if resume is not None:
        run = checkpoint_load(resume)
        if (run.scenario.code != scenario.code
                or _trajectory_config(run.training) != _trajectory_config(training)):
            raise ConfigurationError("checkpoint was written for a different configuration")
        run.training = training
        keep_curves, keep_updates = run.curves_rows, run.updates_rows
    else:
        run = build_scenario(scenario, training)
        keep_curves = keep_updates = None
    write_manifest(out, manifest_items(run, {"status": "running"}))

    evaluations = []
    next_eval = _next_multiple(run.steps_done, training.eval_every)
    next_ckpt = _next_multiple(run.steps_done, training.checkpoint_every)
    updates = 0
    with CsvSink(out / CURVES_FILE, EpisodeRecord, keep_curves) as curves, \
            CsvSink(out / UPDATES_FILE, UpdateRecord, keep_updates) as upd:
        while run.steps_done < training.total_env_steps:
            episodes, record = train_iteration(run)
            for ep in episodes:
                curves.write(ep)
            upd.write(record)
            run.curves_rows, run.updates_rows = curves.rows, upd.rows
            updates += 1
            if next_eval and run.steps_done >= next_eval:
                res = evaluate(run.policy, training.env, training.eval_episodes, eval_rng(training))
                evaluations.append((run.steps_done, res))
                log.info("step %d: eval success %.2f score %.1f", run.steps_done,
                         res.success_rate, res.mean_score)
                next_eval = _next_multiple(run.steps_done, training.eval_every)
            if next_ckpt and run.steps_done >= next_ckpt:
                checkpoint_save(run, out / "checkpoints" / f"ckpt_{run.steps_done:010d}.npz")
                next_ckpt = _next_multiple(run.steps_done, training.checkpoint_every)
            if stop_after_updates is not None and updates >= stop_after_updates:
                break

    checkpoint_save(run, out / "checkpoint.npz")
    result = None
    extra = {"status": "complete" if run.steps_done >= training.total_env_steps else "stopped",
             "wall_time_s": round(time.time() - started, 3)}
    if final_eval and run.steps_done >= training.total_env_steps:
        result = evaluate(run.policy, training.env, training.eval_episodes, eval_rng(training))
        extra.update({"eval.success_rate": result.success_rate,
                      "eval.mean_score": result.mean_score,
                      "eval.mean_episode_length": result.mean_episode_length})
    write_manifest(out, manifest_items(run, extra))
    return TrainResult(run, out, evaluations, result)


def _trajectory_config(training: TrainingConfig) -> TrainingConfig:
    """The part of a config that shapes the trajectory; reporting cadence is free."""
    return dataclasses.replace(training, eval_every=0, eval_episodes=1, checkpoint_every=0)


def _next_multiple(steps: int, every: int) -> int:
    return 0 if every <= 0 else (steps // every + 1) * every
