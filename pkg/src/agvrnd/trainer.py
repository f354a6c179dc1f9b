"""Training orchestration: collect, distil, normalise, combine, update, log.

One call to :func:`run_training` runs the whole PPO (optionally RND-PPO)
loop for a single seed and writes ``metrics.csv``, ``trajectories.csv``,
``checkpoint.bin`` and ``config.txt`` into the output directory.
"""
from __future__ import annotations

import csv
import logging
import time
from collections import deque
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np

from agvrnd.env import SceneConfig, VecEnv, step_arrays
from agvrnd.nn import (ActorCritic, AdamState, GaussianPolicyOutput, MlpParams, Dense, load_arrays,
                       sample_action, save_arrays)
from agvrnd.ppo import PpoConfig, Trajectory, combine_rewards, compute_advantages, ppo_update
from agvrnd.rnd import (IntrinsicReturnNormalizer, RndModel, RunningNormalizer, intrinsic_rewards,
                        train_predictor)
from agvrnd.scenefile import resolve_scene
from agvrnd.sensors import build_observations

log = logging.getLogger(__name__)

METRICS_HEADER = ["env_steps", "episodes", "mean_ext_reward", "mean_ep_len", "mean_int_reward",
                  "clip_frac", "approx_kl"]
TRAJECTORY_HEADER = ["episode", "step", "agent_x", "agent_z", "target_x", "target_z", "terminated"]
ACT_DIM = 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    scene: str = "simple_static"
    rnd_enabled: bool = True
    total_env_steps: int = 1_000_000
    seed: int = 0
    out_dir: str | None = None
    n_envs: int = 16
    # PPO
    discount: float = 0.99
    clip_eps: float = 0.2
    epochs: int = 3
    minibatch_size: int = 512
    collect_horizon: int = 2048
    alpha_ext: float = 1.0
    beta_int: float = 1.0
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    normalize_ext: bool = False
    value_init_gain: float = 0.01
    anneal_lr: bool = True
    # RND
    rnd_out_dim: int = 64
    rnd_hidden: int = 128
    rnd_learning_rate: float = 3e-4
    n_pre: int = 4
    obs_clip: float = 5.0
    int_discount: float = 0.99
    # bookkeeping
    eval_every: int = 0
    n_eval_episodes: int = 10
    metrics_window: int = 20
    stop_at_reward: float | None = None

    def __post_init__(self):
        if self.total_env_steps <= 0:
            raise ConfigError(f"total_env_steps must be positive, got {self.total_env_steps}")
        if self.n_envs < 1:
            raise ConfigError(f"n_envs must be >= 1, got {self.n_envs}")
        if self.collect_horizon % self.n_envs:
            raise ConfigError(f"collect_horizon {self.collect_horizon} is not a multiple of n_envs {self.n_envs}")

    def ppo_config(self) -> PpoConfig:
        return PpoConfig(discount=self.discount, clip_eps=self.clip_eps, epochs=self.epochs,
                         minibatch_size=self.minibatch_size, collect_horizon=self.collect_horizon,
                         alpha_ext=self.alpha_ext, beta_int=self.beta_int if self.rnd_enabled else 0.0,
                         value_coef=self.value_coef, entropy_coef=self.entropy_coef,
                         learning_rate=self.learning_rate, max_grad_norm=self.max_grad_norm,
                         normalize_ext=self.normalize_ext)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            lines.append(f"{f.name}={_format_value(v)}")
        return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "on" if v else "off"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_FIELD_TYPES = {
    "scene": str, "out_dir": str, "rnd_enabled": _parse_bool, "normalize_ext": _parse_bool,
    "anneal_lr": _parse_bool,
    "stop_at_reward": float,
}


def parse_config_value(key: str, text: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    if key not in types:
        raise ConfigError(f"unknown config key {key!r}")
    if key in _FIELD_TYPES:
        return _FIELD_TYPES[key](text)
    return int(text) if types[key] == "int" else float(text)


def read_config_file(path: str | Path) -> dict:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            values[key] = parse_config_value(key, value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
    return values


# -- seeding ------------------------------------------------------------------

class Streams(NamedTuple):
    env_reset: np.random.Generator
    policy: np.random.Generator
    rnd: np.random.Generator
    shuffle: np.random.Generator
    evaluation: np.random.Generator


def make_streams(seed: int) -> Streams:
    """Independent named generators; toggling RND never shifts the others."""
    children = np.random.SeedSequence(seed).spawn(5)
    return Streams(*(np.random.default_rng(c) for c in children))


def policy_input_scale(scene: SceneConfig) -> np.ndarray:
    """Fixed per-feature scale so positions and speeds enter the policy near [-1, 1]."""
    scale = np.ones(scene.obs_dim)
    scale[:6] = 1.0 / scene.half_extent
    scale[1] = scale[4] = 1.0
    scale[6:8] = 1.0 / scene.physics.max_speed
    return scale


# -- records --------------------------------------------------------------------

@dataclass
class MetricsRow:
    env_steps: int
    episodes: int
    mean_ext_reward: float | None
    mean_ep_len: float | None
    mean_int_reward: float
    clip_frac: float
    approx_kl: float

    def as_strings(self) -> list[str]:
        return ["" if v is None else repr(v) if isinstance(v, float) else str(v)
                for v in (getattr(self, k) for k in METRICS_HEADER)]


class TrajectoryRecord(NamedTuple):
    episode: int
    step: int
    agent_x: float
    agent_z: float
    target_x: float
    target_z: float
    terminated: bool


def write_metrics(path: str | Path, rows: Sequence[MetricsRow]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRICS_HEADER)
            for row in rows:
                w.writerow(row.as_strings())
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics(path: str | Path) -> list[MetricsRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        for rec in reader:
            opt = [None if v == "" else float(v) for v in rec[2:4]]
            rows.append(MetricsRow(int(rec[0]), int(rec[1]), opt[0], opt[1], float(rec[4]),
                                   float(rec[5]), float(rec[6])))
    return rows


def write_trajectories(path: str | Path, records: Sequence[TrajectoryRecord]) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRAJECTORY_HEADER)
            for r in records:
                w.writerow([r.episode, r.step, repr(r.agent_x), repr(r.agent_z), repr(r.target_x),
                            repr(r.target_z), int(r.terminated)])
    except OSError as exc:
        raise OSError(f"cannot write trajectories to {path}: {exc}") from exc


def read_trajectories(path: str | Path) -> list[TrajectoryRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader) != TRAJECTORY_HEADER:
            raise ValueError(f"{path}: unexpected trajectory header")
        return [TrajectoryRecord(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4]),
                                 float(r[5]), r[6] == "1") for r in reader]


# -- checkpoints ----------------------------------------------------------------

def _mlp_arrays(prefix: str, params: MlpParams) -> dict[str, np.ndarray]:
    out = {}
    for i, layer in enumerate(params.layers):
        out[f"{prefix}.{i}.weight"] = layer.weight
        out[f"{prefix}.{i}.bias"] = layer.bias
    return out


def _mlp_from_arrays(prefix: str, arrays: dict[str, np.ndarray]) -> MlpParams:
    layers = []
    i = 0
    while f"{prefix}.{i}.weight" in arrays:
        layers.append(Dense(arrays[f"{prefix}.{i}.weight"].copy(), arrays[f"{prefix}.{i}.bias"].copy(), "relu"))
        i += 1
    layers[-1].activation = "identity"
    return MlpParams(layers)


@dataclass
class Agent:
    """Everything a checkpoint holds."""

    policy: ActorCritic
    rnd: RndModel | None = None
    obs_norm: RunningNormalizer | None = None
    int_norm: IntrinsicReturnNormalizer | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.policy.named_params())
        if self.rnd is not None:
            out.update(_mlp_arrays("rnd.target", self.rnd.target))
            out.update(_mlp_arrays("rnd.predictor", self.rnd.predictor))
        if self.obs_norm is not None:
            out.update({f"obs_norm.{k}": v for k, v in self.obs_norm.state().items()})
        if self.int_norm is not None:
            out.update({f"int_norm.{k}": v for k, v in self.int_norm.state().items()})
        return out

    def save(self, path: str | Path) -> None:
        save_arrays(path, self.arrays())

    @classmethod
    def load(cls, path: str | Path) -> Agent:
        arrays = load_arrays(path)
        policy = ActorCritic.from_named(arrays)
        rnd = None
        if "rnd.target.0.weight" in arrays:
            predictor = _mlp_from_arrays("rnd.predictor", arrays)
            rnd = RndModel(_mlp_from_arrays("rnd.target", arrays), predictor,
                           AdamState.for_params(predictor.arrays()))
        obs_norm = None
        if "obs_norm.mean" in arrays:
            obs_norm = RunningNormalizer.from_state(
                {k: arrays[f"obs_norm.{k}"] for k in ("count", "mean", "var")})
        return cls(policy, rnd, obs_norm)


# -- evaluation -----------------------------------------------------------------

@dataclass
class EvalSummary:
    n_episodes: int = 0
    success_rate: float | None = None
    mean_steps_to_target: float | None = None
    mean_ext_reward: float | None = None
    per_spawn_success: list[float | None] = field(default_factory=list)
    per_spawn_episodes: list[int] = field(default_factory=list)


def rollout(policy: ActorCritic, scene: SceneConfig, spawn_indices: Sequence[int], deterministic: bool,
            rng: np.random.Generator | None = None, record: bool = False):
    """Run one episode per entry of ``spawn_indices`` in lockstep.

    Returns ``(returns, lengths, successes, paths)``; ``paths`` holds per-episode
    ``(agent_xz, target_xz, terminated)`` step lists when ``record`` is set.
    """
    n = len(spawn_indices)
    spawn_indices = np.asarray(spawn_indices, dtype=np.int64)
    pos = np.tile(np.array([scene.agent_start[0], scene.agent_start[2]]), (n, 1))
    vel = np.zeros((n, 2))
    target = scene.spawn_xz[spawn_indices]
    steps = np.zeros(n, dtype=np.int64)
    returns = np.zeros(n)
    lengths = np.zeros(n, dtype=np.int64)
    success = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    paths: list[list] = [[] for _ in range(n)]
    while active.any():
        idx = np.nonzero(active)[0]
        obs = build_observations(pos[idx], vel[idx], target[idx], scene)
        mean, _, _ = policy.forward(obs)
        if deterministic:
            action = np.clip(mean, -1.0, 1.0)
        else:
            action = sample_action(GaussianPolicyOutput(mean, policy.log_std), rng).action
        p, v, s, r, term, trunc = step_arrays(pos[idx], vel[idx], target[idx], steps[idx], action, scene)
        pos[idx], vel[idx], steps[idx] = p, v, s
        returns[idx] += r
        if record:
            for j, i in enumerate(idx):
                paths[i].append((p[j, 0], p[j, 1], target[i, 0], target[i, 1], bool(term[j])))
        done = term | trunc
        lengths[idx[done]] = s[done]
        success[idx[term]] = True
        active[idx[done]] = False
    return returns, lengths, success, paths


def evaluate(checkpoint: str | Path | Agent | ActorCritic, scene: SceneConfig | str, n_episodes: int,
             deterministic: bool = True, seed: int = 0) -> EvalSummary:
    """Success statistics over ``n_episodes``; episode i uses spawn ``i mod n_spawns``."""
    if isinstance(scene, str):
        scene = resolve_scene(scene)
    if isinstance(checkpoint, (str, Path)):
        checkpoint = Agent.load(checkpoint)
    policy = checkpoint.policy if isinstance(checkpoint, Agent) else checkpoint
    if policy.trunk.in_dim != scene.obs_dim:
        raise ValueError(f"checkpoint expects {policy.trunk.in_dim} observation values, "
                         f"scene {scene.name} produces {scene.obs_dim}")
    n_spawns = len(scene.target_spawns)
    if n_episodes <= 0:
        return EvalSummary(per_spawn_success=[None] * n_spawns, per_spawn_episodes=[0] * n_spawns)
    spawns = np.arange(n_episodes) % n_spawns
    rng = np.random.default_rng(seed)
    returns, lengths, success, _ = rollout(policy, scene, spawns, deterministic, rng)
    per_spawn, counts = [], []
    for k in range(n_spawns):
        mask = spawns == k
        counts.append(int(mask.sum()))
        per_spawn.append(float(success[mask].mean()) if mask.any() else None)
    return EvalSummary(
        n_episodes=n_episodes,
        success_rate=float(success.mean()),
        mean_steps_to_target=float(lengths[success].mean()) if success.any() else None,
        mean_ext_reward=float(returns.mean()),
        per_spawn_success=per_spawn,
        per_spawn_episodes=counts,
    )


# -- training loop ----------------------------------------------------------------

@dataclass
class TrainingResult:
    config: RunConfig
    rows: list[MetricsRow]
    trajectories: list[TrajectoryRecord]
    agent: Agent
    episodes: list = field(default_factory=list)
    wall_seconds: float = 0.0
    out_dir: Path | None = None

    def steps_to_threshold(self, threshold: float) -> int | None:
        return steps_to_threshold(self.rows, threshold)


def steps_to_threshold(rows: Sequence[MetricsRow], threshold: float, window: int = 20) -> int | None:
    """First logged env-step count whose full rolling window meets ``threshold``."""
    for row in rows:
        if row.mean_ext_reward is not None and row.episodes >= window and row.mean_ext_reward >= threshold:
            return row.env_steps
    return None


def _prepare_out_dir(out_dir: str | None) -> Path | None:
    if out_dir is None:
        return None
    path = Path(out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {path} is not writable: {exc}") from exc
    return path


def _collect(venv: VecEnv, policy: ActorCritic, obs: np.ndarray, horizon: int, rng: np.random.Generator,
             episodes: list) -> tuple[Trajectory, np.ndarray]:
    n = venv.n_envs
    traj = Trajectory.allocate(horizon, n, venv.obs_dim, ACT_DIM)
    for t in range(horizon):
        mean, value, _ = policy.forward(obs)
        sample = sample_action(GaussianPolicyOutput(mean, policy.log_std), rng)
        res = venv.step(sample.action)
        traj.obs[t] = obs
        traj.next_obs[t] = res.next_obs
        traj.actions[t] = sample.raw
        traj.log_probs[t] = sample.log_prob
        traj.values[t] = value
        traj.rewards_e[t] = res.reward
        traj.terminated[t] = res.terminated
        traj.truncated[t] = res.truncated
        episodes.extend(res.finished)
        obs = res.obs
    _, next_values, _ = policy.forward(traj.next_obs.reshape(-1, venv.obs_dim))
    traj.next_values[:] = next_values.reshape(horizon, n)
    return traj, obs


def _snapshot(policy: ActorCritic, scene: SceneConfig, first_episode_id: int) -> list[TrajectoryRecord]:
    spawns = list(range(len(scene.target_spawns)))
    _, _, _, paths = rollout(policy, scene, spawns, deterministic=True, record=True)
    records = []
    for k, path in enumerate(paths):
        for step, (ax, az, tx, tz, term) in enumerate(path):
            records.append(TrajectoryRecord(first_episode_id + k, step, float(ax), float(az),
                                            float(tx), float(tz), term))
    return records


def run_training(config: RunConfig, progress: Callable[[MetricsRow], None] | None = None) -> TrainingResult:
    """Run PPO, or RND-PPO when ``config.rnd_enabled``, for ``total_env_steps``.

    Each round: collect ``collect_horizon`` steps; if RND is on, update the
    observation normaliser, score successors with the predictor error, train
    the predictor for ``n_pre`` passes and normalise the intrinsic rewards;
    combine rewards, compute returns/advantages and run the PPO epochs.
    """
    started = time.perf_counter()
    out_dir = _prepare_out_dir(config.out_dir)
    scene = resolve_scene(config.scene)
    ppo_cfg = config.ppo_config()
    streams = make_streams(config.seed)
    obs_dim = scene.obs_dim

    venv = VecEnv(scene, config.n_envs, streams.env_reset)
    policy = ActorCritic.create(obs_dim, ACT_DIM, streams.policy, input_scale=policy_input_scale(scene),
                                value_gain=config.value_init_gain)
    optimizer = AdamState.for_params(policy.params(), lr=ppo_cfg.learning_rate)
    agent = Agent(policy)
    if config.rnd_enabled:
        agent.rnd = RndModel.create(obs_dim, streams.rnd, out_dim=config.rnd_out_dim, hidden=config.rnd_hidden,
                                    lr=config.rnd_learning_rate)
        agent.obs_norm = RunningNormalizer(obs_dim, clip_bound=config.obs_clip)
        agent.int_norm = IntrinsicReturnNormalizer(config.n_envs, config.int_discount)
    ext_norm = IntrinsicReturnNormalizer(config.n_envs, ppo_cfg.discount) if ppo_cfg.normalize_ext else None

    horizon = config.collect_horizon // config.n_envs
    eval_every = config.eval_every or max(config.total_env_steps // 4, 1)
    next_snapshot = eval_every
    episodes: list = []
    window: deque = deque(maxlen=config.metrics_window)
    rows: list[MetricsRow] = []
    trajectories: list[TrajectoryRecord] = []
    n_snapshot_eps = 0
    env_steps = 0
    obs = venv.reset()

    while env_steps < config.total_env_steps:
        if config.anneal_lr:
            # linear decay to zero over the budget; the predictor keeps its own fixed rate
            optimizer.lr = ppo_cfg.learning_rate * (1.0 - env_steps / config.total_env_steps)
        n_before = len(episodes)
        traj, obs = _collect(venv, policy, obs, horizon, streams.policy, episodes)
        env_steps += horizon * config.n_envs
        for ep in episodes[n_before:]:
            window.append(ep)

        mean_int = 0.0
        r_int_hat = np.zeros_like(traj.rewards_e)
        if config.rnd_enabled:
            flat_next = traj.next_obs.reshape(-1, obs_dim)
            agent.obs_norm.update(flat_next)
            r_int = intrinsic_rewards(agent.rnd, flat_next, agent.obs_norm).reshape(horizon, config.n_envs)
            traj.rewards_i[:] = r_int
            mean_int = float(r_int.mean())
            train_predictor(agent.rnd, agent.obs_norm.normalize(flat_next), config.n_pre,
                            config.minibatch_size, streams.rnd)
            r_int_hat = agent.int_norm.normalize(r_int)

        r_ext_hat = ext_norm.normalize(traj.rewards_e) if ext_norm is not None else traj.rewards_e
        rewards = combine_rewards(r_ext_hat, r_int_hat, ppo_cfg.alpha_ext, ppo_cfg.beta_int)
        returns, advantages = compute_advantages(rewards, traj.values, traj.next_values, traj.terminated,
                                                 traj.truncated, ppo_cfg.discount)
        stats = ppo_update(policy, optimizer, traj.obs.reshape(-1, obs_dim), traj.actions.reshape(-1, ACT_DIM),
                           traj.log_probs.reshape(-1), advantages.reshape(-1), returns.reshape(-1),
                           ppo_cfg, streams.shuffle)

        row = MetricsRow(
            env_steps=env_steps,
            episodes=len(episodes),
            mean_ext_reward=float(np.mean([e.return_e for e in window])) if window else None,
            mean_ep_len=float(np.mean([e.length for e in window])) if window else None,
            mean_int_reward=mean_int,
            clip_frac=stats.clip_frac,
            approx_kl=stats.approx_kl,
        )
        rows.append(row)
        if progress is not None:
            progress(row)
        log.debug("steps=%d episodes=%d ext=%s len=%s int=%.4g", env_steps, len(episodes),
                  row.mean_ext_reward, row.mean_ep_len, mean_int)

        if env_steps >= next_snapshot:
            snap = _snapshot(policy, scene, n_snapshot_eps)
            n_snapshot_eps += len(scene.target_spawns)
            trajectories.extend(snap)
            while next_snapshot <= env_steps:
                next_snapshot += eval_every

        if (config.stop_at_reward is not None and len(window) >= config.metrics_window
                and row.mean_ext_reward >= config.stop_at_reward):
            break

    result = TrainingResult(config, rows, trajectories, agent, episodes, time.perf_counter() - started, out_dir)
    if out_dir is not None:
        export_run(result, out_dir)
    return result


def export_run(result: TrainingResult, out_dir: str | Path) -> None:
    out_dir = Path(out_dir)
    write_metrics(out_dir / "metrics.csv", result.rows)
    write_trajectories(out_dir / "trajectories.csv", result.trajectories)
    result.agent.save(out_dir / "checkpoint.bin")
    (out_dir / "config.txt").write_text(result.config.to_text(), encoding="utf-8")
