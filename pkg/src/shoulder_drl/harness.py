"""Run configuration, training loops, evaluation and traces.

Everything here talks to a :class:`~shoulder_drl.distrib.pool.WorkerPool`;
whether the pool is in-process, local subprocesses or remote hosts is the
caller's choice (see :func:`open_pool`).
"""

from __future__ import annotations

import contextlib
import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import kvfile, nn
from .dql import DqlAgent, DqlHyper, check_muscles
from .distrib.pool import LocalCluster, NoWorkersError, WorkerPool, collect_rollout, run_specs
from .kvfile import ConfigError
from .mdp import BatchPolicy, Episode, EpisodeSpec, LocalEnv, RewardParams, episode_steps, run_episode_full, write_trace
from .plant import PlantConfig, reference_config
from .ppo import PolicyValueNet, PpoAgent, PpoHyper, act
from .trajectory import TEST_SET_SEED, TEST_SET_SIZE, TEST_TRAJ_T, Trajectory, frozen_test_set, random_trajectory

log = logging.getLogger(__name__)

STATS_COLUMNS = ["update", "frames", "episodes", "mean_episode_reward_last10", "loss", "clip_fraction", "entropy", "epsilon"]
EPISODE_COLUMNS = ["index", "frames", "reward", "length", "crashed"]


class CheckpointError(ValueError):
    pass


# --------------------------------------------------------------------------- config


@dataclass
class RunConfig:
    """Flat run description; ``ppo_*`` and ``dql_*`` keys reach the agent hyperparameters."""

    experiment: str = "run"
    agent: str = "ppo"
    n_muscles: int = 1
    frames: int = 1_000_000
    seed: int = 0
    workers: int = 8
    output_dir: str = "runs"
    plant: str = ""  # plant config file; empty means the bundled reference plant
    episode_T: float = 10.0
    checkpoint_every: int = 0  # frames between intermediate checkpoints; 0 keeps only the final one
    crash_rate: float = 0.0  # fraction of training episodes with an injected plant crash
    reward: str = "auto"  # full | tracking | auto (tracking for one muscle)
    alpha: float = 0.1
    omega_max: float = 0.95
    crash_penalty: float = -100.0
    test_seed: int = TEST_SET_SEED
    test_count: int = TEST_SET_SIZE
    eval_T: float = TEST_TRAJ_T
    ppo: PpoHyper = field(default_factory=PpoHyper)
    dql: DqlHyper = field(default_factory=DqlHyper)

    def __post_init__(self):
        if self.agent not in ("ppo", "dql"):
            raise ConfigError(f"agent must be 'ppo' or 'dql', got {self.agent!r}")
        if self.agent == "dql":
            try:
                check_muscles(self.n_muscles)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        if self.n_muscles < 1:
            raise ConfigError("n_muscles must be >= 1")
        if self.frames < 0 or self.workers < 1 or self.checkpoint_every < 0:
            raise ConfigError("frames and checkpoint_every must be >= 0, workers >= 1")
        if not 0.0 <= self.crash_rate <= 1.0:
            raise ConfigError("crash_rate must lie in [0, 1]")
        if self.reward not in ("auto", "full", "tracking"):
            raise ConfigError("reward must be auto, full or tracking")
        if self.eval_T <= 0 or self.episode_T <= 0 or self.test_count < 1:
            raise ConfigError("durations and test_count must be positive")

    @classmethod
    def from_kv(cls, values: dict[str, str]) -> "RunConfig":
        top, hyper = {}, {"ppo": {}, "dql": {}}
        names = {f.name: f for f in dataclasses.fields(cls)}
        defaults = cls()
        for key, raw in values.items():
            prefix, _, rest = key.partition("_")
            if prefix in hyper and rest:
                group = getattr(defaults, prefix)
                if rest not in {f.name for f in dataclasses.fields(group)}:
                    raise ConfigError(f"unknown key {key!r}")
                hyper[prefix][rest] = _coerce(key, raw, getattr(group, rest))
            elif key in names and key not in hyper:
                top[key] = _coerce(key, raw, getattr(defaults, key))
            else:
                raise ConfigError(f"unknown key {key!r}")
        if "hidden" not in hyper["ppo"] and top.get("n_muscles", 1) > 1:
            hyper["ppo"]["hidden"] = (250, 250, 250)
        try:
            return cls(**top, ppo=PpoHyper(**hyper["ppo"]), dql=DqlHyper(**hyper["dql"]))
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict[str, str] | None = None) -> "RunConfig":
        values = kvfile.load(path) if path else {}
        values.update(overrides or {})
        return cls.from_kv(values)

    def to_kv(self) -> dict[str, object]:
        out: dict[str, object] = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if f.name in ("ppo", "dql"):
                for g in dataclasses.fields(value):
                    sub = getattr(value, g.name)
                    out[f"{f.name}_{g.name}"] = "none" if sub is None else sub
            else:
                out[f.name] = value
        return out

    def plant_config(self) -> PlantConfig:
        base = PlantConfig.load(self.plant) if self.plant else reference_config()
        if self.n_muscles > base.n_muscles:
            raise ConfigError(f"plant has {base.n_muscles} muscles, run asks for {self.n_muscles}")
        return base.first(self.n_muscles)

    def reward_params(self) -> RewardParams:
        tracking = self.reward == "tracking" or (self.reward == "auto" and self.n_muscles == 1)
        gamma = self.ppo.gamma if self.agent == "ppo" else self.dql.gamma
        return RewardParams(self.alpha, self.omega_max, self.crash_penalty, min(gamma, 0.999999), tracking)

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.experiment


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if isinstance(default, float) or default is None:
            return None if raw.lower() == "none" else float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


# --------------------------------------------------------------------------- pools


@contextlib.contextmanager
def open_pool(
    cfg: RunConfig, connect: Sequence[str] | None = None, in_process: bool = False, workers: int | None = None
) -> Iterator[WorkerPool]:
    """Yield a pool: remote servers, in-process envs, or local server subprocesses."""
    plant = cfg.plant_config()
    n = workers or cfg.workers
    if connect:
        pool = WorkerPool.connect(connect)
        missing = [ep.name for ep in pool.endpoints if not ep.alive]
        if missing:
            pool.close()
            raise NoWorkersError(f"unreachable workers: {', '.join(missing)}")
        _check_pool(pool, plant)
        try:
            yield pool
        finally:
            pool.close()
    elif in_process:
        yield WorkerPool.local(plant, n)
    else:
        with LocalCluster(n, plant) as cluster:
            pool = cluster.pool()
            try:
                _check_pool(pool, plant)
                yield pool
            finally:
                pool.close()


def _check_pool(pool: WorkerPool, plant: PlantConfig) -> None:
    for ep in pool.alive:
        if ep.n_muscles != plant.n_muscles:
            raise ConfigError(f"worker {ep.name} simulates {ep.n_muscles} muscles, run needs {plant.n_muscles}")


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(path: str | Path, agent, cfg: RunConfig, frames: int) -> Path:
    path = Path(path)
    meta: dict[str, object] = {"agent": cfg.agent, "n_muscles": cfg.n_muscles, "frames": frames, "experiment": cfg.experiment}
    if isinstance(agent, PpoAgent):
        nn.save(path, agent.net.mlp, agent.net.log_std)
        meta["version"] = agent.net.version
    else:
        nn.save(path, agent.online)
        meta["updates"] = agent.updates
    meta["layers"] = list((agent.net.mlp if isinstance(agent, PpoAgent) else agent.online).layer_dims)
    meta_path = path.with_suffix(path.suffix + ".meta")
    meta_path.write_text(kvfile.dump(meta))
    return path


def load_policy(path: str | Path, n_muscles: int | None = None) -> tuple[BatchPolicy, dict[str, str]]:
    """Deterministic policy (greedy or mean action) from a checkpoint and its sidecar."""
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".meta")
    if not meta_path.exists():
        raise CheckpointError(f"missing sidecar {meta_path}")
    meta = kvfile.load(meta_path)
    net, extra = nn.load(path)
    n = int(meta["n_muscles"])
    if n_muscles is not None and n != n_muscles:
        raise CheckpointError(f"checkpoint is for {n} muscles, run configured for {n_muscles}")
    if net.layer_dims[0] != 4 + n:
        raise CheckpointError(f"network input width {net.layer_dims[0]} does not fit {n} muscles")
    if meta["agent"] == "ppo":
        if net.layer_dims[-1] != n + 1 or len(extra) != n:
            raise CheckpointError("PPO checkpoint has the wrong head sizes")
        pv = PolicyValueNet.__new__(PolicyValueNet)
        pv.n_muscles, pv.mlp, pv.log_std, pv.version = n, net, np.asarray(extra, dtype=float), int(meta.get("version", 0))

        def policy(obs, rngs):
            actions, *_ = act(obs, pv, True, rngs)
            return actions, [{} for _ in range(len(obs))]

    elif meta["agent"] == "dql":
        check_muscles(n)
        agent = DqlAgent(n, DqlHyper(hidden=tuple(net.layer_dims[1:-1]), buffer_capacity=64, batch_size=1))
        agent.online = net
        policy = agent.greedy_policy()
    else:
        raise CheckpointError(f"unknown agent kind {meta['agent']!r}")
    return policy, meta


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    checkpoint: Path
    stats_path: Path
    episodes_path: Path
    frames: int
    updates: int
    episode_rewards: list[float]
    baseline_reward: float | None
    agent: object = None


def make_agent(cfg: RunConfig):
    if cfg.agent == "ppo":
        return PpoAgent(cfg.n_muscles, cfg.ppo, seed=cfg.seed)
    return DqlAgent(cfg.n_muscles, cfg.dql, seed=cfg.seed)


def training_spec(cfg: RunConfig, index: int, n_steps: int) -> EpisodeSpec:
    """Episode ``index`` of a run: fresh random trajectory, optional injected crash."""
    traj = random_trajectory([cfg.seed, index], cfg.episode_T)
    crash_at = None
    if cfg.crash_rate > 0:
        rng = np.random.default_rng([cfg.seed, index, 2])
        if rng.random() < cfg.crash_rate:
            crash_at = int(rng.integers(n_steps))
    return EpisodeSpec(index, traj, seed=cfg.seed, crash_at=crash_at)


class _Recorder:
    """Stats and episode CSV writers plus the running reward history."""

    def __init__(self, run_dir: Path):
        self.stats_path = run_dir / "stats.csv"
        self.episodes_path = run_dir / "episodes.csv"
        self._stats_file = self.stats_path.open("w", newline="")
        self._episodes_file = self.episodes_path.open("w", newline="")
        self.stats = csv.writer(self._stats_file)
        self.episodes = csv.writer(self._episodes_file)
        self.stats.writerow(STATS_COLUMNS)
        self.episodes.writerow(EPISODE_COLUMNS)
        self.rewards: list[float] = []
        self.updates = 0

    def add_episodes(self, eps: Sequence[Episode], frames_before: int) -> None:
        frames = frames_before
        for ep in eps:
            frames += len(ep)
            self.rewards.append(ep.reward)
            self.episodes.writerow([ep.index, frames, repr(ep.reward), len(ep), int(ep.crashed)])

    def add_update(self, frames: int, loss, clip_fraction=None, entropy=None, epsilon=None) -> None:
        self.updates += 1
        last10 = float(np.mean(self.rewards[-10:])) if self.rewards else ""
        self.stats.writerow([self.updates, frames, len(self.rewards), last10, loss, _blank(clip_fraction), _blank(entropy), _blank(epsilon)])

    def close(self) -> None:
        self._stats_file.close()
        self._episodes_file.close()


def _blank(v):
    return "" if v is None else v


def train(cfg: RunConfig, pool: WorkerPool, progress: Callable[[str], None] | None = None) -> TrainResult:
    """Run the configured agent for ``cfg.frames`` frames; writes checkpoints and CSVs to ``cfg.run_dir``."""
    run_dir = cfg.run_dir
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run.cfg").write_text(kvfile.dump(cfg.to_kv()))
    if not pool.alive:
        raise NoWorkersError("no connected workers")
    agent = make_agent(cfg)
    rec = _Recorder(run_dir)
    next_ckpt = cfg.checkpoint_every or None
    frames, index, baseline = 0, 0, None
    p = cfg.reward_params()
    say = progress or (lambda msg: None)
    n_steps = episode_steps(cfg.episode_T, pool.dt)

    def source(i):
        return training_spec(cfg, i, n_steps)

    try:
        while frames < cfg.frames:
            chunk = cfg.ppo.rollout_frames if cfg.agent == "ppo" else len(pool.alive) * n_steps
            chunk = min(chunk, cfg.frames - frames)

            if cfg.agent == "ppo":
                policy = agent.policy(False)
                res = collect_rollout(pool, policy, chunk, source, p, first_index=index, episode_T=cfg.episode_T)
            else:
                res = _dql_chunk(agent, cfg, pool, source, p, chunk, index, frames, rec)
            started = [e.index for e in res.episodes] + res.dropped
            if not started:
                break  # budget left is shorter than one episode
            if started:
                index = max(started) + 1
            rec.add_episodes(res.episodes, frames)
            if baseline is None and res.episodes:
                baseline = float(np.mean([e.reward for e in res.episodes]))
            frames += res.frames
            if cfg.agent == "ppo" and res.episodes:
                st = agent.update(res.episodes, policy.snapshot.version)
                rec.add_update(frames, st["loss"], st["clip_fraction"], st["entropy"])
            if next_ckpt is not None and frames >= next_ckpt:
                save_checkpoint(run_dir / f"checkpoint_{frames:08d}.bin", agent, cfg, frames)
                next_ckpt = (frames // cfg.checkpoint_every + 1) * cfg.checkpoint_every
            last10 = np.mean(rec.rewards[-10:]) if rec.rewards else float("nan")
            say(f"frames {frames}/{cfg.frames}  episodes {len(rec.rewards)}  mean reward (last 10) {last10:.1f}")
    finally:
        rec.close()
    final = save_checkpoint(run_dir / "checkpoint.bin", agent, cfg, frames)
    return TrainResult(final, rec.stats_path, rec.episodes_path, frames, rec.updates, rec.rewards, baseline, agent)


def _dql_chunk(agent: DqlAgent, cfg: RunConfig, pool, source, p, chunk, index, frames_before, rec: _Recorder):
    eps = cfg.dql.epsilon(frames_before, cfg.frames)
    seen = [0]

    def on_tick(transitions):
        for tr in transitions:
            agent.observe(tr)
            seen[0] += 1
            if seen[0] % cfg.dql.train_every == 0:
                loss = agent.update()
                if loss is not None:
                    rec.add_update(frames_before + seen[0], loss, epsilon=eps)

    return collect_rollout(pool, agent.policy(eps), chunk, source, p, first_index=index, episode_T=cfg.episode_T, on_tick=on_tick)


# --------------------------------------------------------------------------- evaluation


@dataclass
class EvalReport:
    """Per-trajectory tracking errors in degrees; crashed episodes are listed apart."""

    indices: list[int]
    rmse: np.ndarray
    mae: np.ndarray
    crashed: list[int]
    saturation_fraction: float = 0.0
    episodes: list[Episode] = field(default_factory=list, repr=False)

    @classmethod
    def from_episodes(cls, episodes: Sequence[Episode], omega_max: float = 0.95) -> "EvalReport":
        idx, rmse, mae, crashed = [], [], [], []
        actions = []
        for ep in episodes:
            actions.extend(np.abs(t.action) for t in ep.transitions)
            if ep.crashed:
                crashed.append(ep.index)
                continue
            r, m = tracking_metrics(ep.phis, ep.targets)
            idx.append(ep.index)
            rmse.append(r)
            mae.append(m)
        sat = float(np.mean(np.concatenate(actions) > omega_max)) if actions else 0.0
        return cls(idx, np.array(rmse), np.array(mae), crashed, sat, list(episodes))

    def summary(self) -> dict[str, float]:
        out: dict[str, float] = {"trajectories": len(self.indices) + len(self.crashed), "crashed": len(self.crashed)}
        for name, arr in (("rmse", self.rmse), ("mae", self.mae)):
            if len(arr):
                q1, med, q3 = np.percentile(arr, [25, 50, 75])
                out.update({f"{name}_mean": float(arr.mean()), f"{name}_median": float(med), f"{name}_q1": float(q1), f"{name}_q3": float(q3)})
            else:
                out.update({f"{name}_mean": float("nan")})
        out["saturation_fraction"] = self.saturation_fraction
        return out

    def write(self, path: str | Path) -> tuple[Path, Path]:
        """Per-trajectory CSV at ``path`` and aggregates at ``<stem>_summary.csv``."""
        path = Path(path)
        by_index = dict(zip(self.indices, zip(self.rmse, self.mae)))
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trajectory", "rmse", "mae", "crashed"])
            for i in sorted(set(self.indices) | set(self.crashed)):
                if i in by_index:
                    w.writerow([i, repr(float(by_index[i][0])), repr(float(by_index[i][1])), 0])
                else:
                    w.writerow([i, "", "", 1])
        summary_path = path.with_name(path.stem + "_summary.csv")
        with summary_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k, v in self.summary().items():
                w.writerow([k, v])
        return path, summary_path


def tracking_metrics(phis: Sequence[float], targets: Sequence[float]) -> tuple[float, float]:
    err = np.asarray(phis, dtype=float) - np.asarray(targets, dtype=float)
    if err.size == 0:
        raise ValueError("no frames to score")
    return float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err)))


def evaluation_specs(seed: int = TEST_SET_SEED, count: int = TEST_SET_SIZE, duration: float = TEST_TRAJ_T) -> list[EpisodeSpec]:
    return [EpisodeSpec(k, traj, seed=seed) for k, traj in enumerate(frozen_test_set(seed, count, duration))]


def evaluate(
    pool: WorkerPool,
    policy: BatchPolicy,
    reward_params: RewardParams,
    seed: int = TEST_SET_SEED,
    count: int = TEST_SET_SIZE,
    duration: float = TEST_TRAJ_T,
) -> EvalReport:
    """Deterministic rollouts over the frozen test set."""
    episodes = run_specs(pool, policy, evaluation_specs(seed, count, duration), reward_params, duration)
    return EvalReport.from_episodes(episodes, reward_params.omega_max)


def emit_trace(
    policy: BatchPolicy, plant: PlantConfig, trajectory: Trajectory, path: str | Path, reward_params: RewardParams, index: int = 0
) -> Episode:
    """One in-process deterministic rollout written in the trace CSV schema."""
    ep = run_episode_full(LocalEnv(plant), EpisodeSpec(index, trajectory), policy, reward_params, trajectory.duration)
    write_trace(path, ep, plant.muscle_names, plant.dt)
    return ep
