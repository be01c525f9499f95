"""The tracking control problem: observations, reward, and episode rollout.

Action deltas are in percent (1.0 means +0.01 activation). Observations are
flat vectors ``[phi, phi_dot, phi_hat_next, phi_dot_hat_next, *activations]``
in degrees, degrees/s and activation fractions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .plant import Crashed, JointState, PlantConfig, equilibrium_activations, step
from .trajectory import Trajectory

ACTION_LIMIT = 1.0  # percent per step
OBS_ANGLE_SCALE = 90.0
OBS_SPEED_SCALE = 90.0


@dataclass(frozen=True)
class RewardParams:
    alpha: float = 0.1
    omega_max: float = 0.95
    crash_penalty: float = -100.0
    gamma: float = 0.99
    tracking_only: bool = False

    def __post_init__(self):
        if not 0 < self.omega_max < 1:
            raise ValueError("omega_max must lie in (0, 1) percent")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not self.crash_penalty < 0:
            raise ValueError("crash_penalty must be negative")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


def apply_action(acts: np.ndarray, delta: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(acts, dtype=float) + 0.01 * np.asarray(delta, dtype=float), 0.0, 1.0)


def reward(phi_next: float, phi_hat_next: float, delta: Sequence[float], p: RewardParams) -> float:
    """Tracking error plus Lasso and bang-bang penalties, all non-positive."""
    delta = np.asarray(delta, dtype=float)
    tracking = abs(phi_next - phi_hat_next)
    lasso = p.alpha * float(np.abs(delta).sum())
    bang = float(np.count_nonzero(np.abs(delta) > p.omega_max)) / delta.size
    return -tracking - lasso - bang


def single_muscle_reward(phi_next: float, phi_hat_next: float) -> float:
    return -abs(phi_next - phi_hat_next)


def step_reward(phi_next: float, phi_hat_next: float, delta: Sequence[float], p: RewardParams) -> float:
    if p.tracking_only:
        return single_muscle_reward(phi_next, phi_hat_next)
    return reward(phi_next, phi_hat_next, delta, p)


def observation(state: JointState, target: tuple[float, float], acts: np.ndarray) -> np.ndarray:
    return np.array([state.phi, state.phi_dot, target[0], target[1], *acts], dtype=float)


def normalize_obs(obs: np.ndarray) -> np.ndarray:
    """Fixed scaling applied inside the agents before the network."""
    out = np.array(obs, dtype=float, copy=True)
    out[..., 0] /= OBS_ANGLE_SCALE
    out[..., 1] /= OBS_SPEED_SCALE
    out[..., 2] /= OBS_ANGLE_SCALE
    out[..., 3] /= OBS_SPEED_SCALE
    return out


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    next_obs: np.ndarray
    done: bool
    crashed: bool
    # Learner-side bookkeeping recorded at action time (raw sample, logprob, value).
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.crashed and not self.done:
            raise ValueError("a crashed transition must be terminal")


@dataclass
class Episode:
    index: int
    transitions: list[Transition]
    activations: list[np.ndarray]  # activations after each step's action
    phis: list[float]
    targets: list[float]
    crashed: bool = False

    @property
    def reward(self) -> float:
        return float(sum(t.reward for t in self.transitions))

    def __len__(self) -> int:
        return len(self.transitions)

    def tracking_errors(self) -> np.ndarray:
        """Per-frame phi - phi_hat over the uncrashed frames."""
        return np.asarray(self.phis) - np.asarray(self.targets)


@dataclass(frozen=True)
class EpisodeSpec:
    index: int
    trajectory: Trajectory
    seed: int = 0
    crash_at: int | None = None

    def action_rng(self) -> np.random.Generator:
        return np.random.default_rng([self.seed, self.index, 1])


class LocalEnv:
    """One plant instance holding joint state and muscle activations."""

    def __init__(self, cfg: PlantConfig):
        self.cfg = cfg
        self.state: JointState | None = None
        self.acts: np.ndarray | None = None
        self.steps = 0
        self.crash_at: int | None = None

    def reset(self, initial_phi: float, crash_at: int | None = None) -> tuple[JointState, np.ndarray]:
        self.state = JointState(float(initial_phi), 0.0)
        self.acts = equilibrium_activations(initial_phi, self.cfg)
        self.steps = 0
        self.crash_at = crash_at
        return self.state, self.acts.copy()

    def step(self, delta: Sequence[float]) -> tuple[JointState | Crashed, np.ndarray]:
        if self.state is None:
            raise RuntimeError("step before reset")
        delta = np.asarray(delta, dtype=float)
        if delta.shape != (self.cfg.n_muscles,):
            raise ValueError(f"expected {self.cfg.n_muscles} action components")
        if np.any(np.abs(delta) > ACTION_LIMIT) or not np.all(np.isfinite(delta)):
            raise ValueError("action components must lie in [-1, 1] percent")
        self.acts = apply_action(self.acts, delta)
        if self.crash_at is not None and self.steps == self.crash_at:
            result: JointState | Crashed = Crashed("forced crash")
        else:
            result = step(self.state, self.acts, self.cfg)
        self.steps += 1
        if isinstance(result, Crashed):
            self.state = None
        else:
            self.state = result
        return result, self.acts.copy()


class BatchPolicy(Protocol):
    def __call__(
        self, obs: np.ndarray, rngs: Sequence[np.random.Generator]
    ) -> tuple[np.ndarray, list[dict]]: ...


class EpisodeRecorder:
    """Learner-side bookkeeping for one episode in flight."""

    def __init__(self, spec: EpisodeSpec, dt: float, n_steps: int, p: RewardParams):
        self.spec = spec
        self.dt = dt
        self.n_steps = n_steps
        self.p = p
        self.rng = spec.action_rng()
        self.episode = Episode(spec.index, [], [], [], [])
        self.obs: np.ndarray | None = None

    def target(self, k: int) -> tuple[float, float]:
        t = min(k * self.dt, self.spec.trajectory.duration)
        return self.spec.trajectory.sample(t)

    def start(self, state: JointState, acts: np.ndarray) -> np.ndarray:
        self.obs = observation(state, self.target(1), acts)
        return self.obs

    def record(self, action: np.ndarray, info: dict, result: JointState | Crashed, acts: np.ndarray) -> bool:
        """Store one step's transition; returns True when the episode is over."""
        k = len(self.episode.transitions)
        action = np.asarray(action, dtype=float)
        if isinstance(result, Crashed):
            tr = Transition(self.obs, action, self.p.crash_penalty, self.obs.copy(), True, True, info)
            self.episode.transitions.append(tr)
            self.episode.crashed = True
            return True
        phi_hat = self.target(k + 1)[0]
        r = step_reward(result.phi, phi_hat, action, self.p)
        done = k + 1 >= self.n_steps
        next_obs = observation(result, self.target(k + 2), acts)
        self.episode.transitions.append(Transition(self.obs, action, r, next_obs, done, False, info))
        self.episode.activations.append(acts)
        self.episode.phis.append(result.phi)
        self.episode.targets.append(phi_hat)
        self.obs = next_obs
        return done


def episode_steps(duration: float, dt: float) -> int:
    return int(round(duration / dt))


def run_episode(
    env: LocalEnv,
    spec: EpisodeSpec | Trajectory,
    agent_policy: BatchPolicy,
    p: RewardParams,
    episode_T: float = 10.0,
) -> tuple[list[Transition], float]:
    """Roll out one episode in-process and return its transitions and undiscounted reward."""
    ep = run_episode_full(env, spec, agent_policy, p, episode_T)
    return ep.transitions, ep.reward


def run_episode_full(
    env: LocalEnv,
    spec: EpisodeSpec | Trajectory,
    agent_policy: BatchPolicy,
    p: RewardParams,
    episode_T: float = 10.0,
) -> Episode:
    if isinstance(spec, Trajectory):
        spec = EpisodeSpec(0, spec)
    if spec.trajectory.duration + 1e-9 < episode_T:
        raise ValueError("trajectory shorter than the episode")
    rec = EpisodeRecorder(spec, env.cfg.dt, episode_steps(episode_T, env.cfg.dt), p)
    state, acts = env.reset(spec.trajectory.sample(0.0)[0], spec.crash_at)
    obs = rec.start(state, acts)
    while True:
        actions, infos = agent_policy(obs[None, :], [rec.rng])
        action = np.asarray(actions[0], dtype=float)
        result, acts = env.step(action)
        if rec.record(action, infos[0], result, acts):
            return rec.episode
        obs = rec.obs


def trace_columns(muscle_names: Sequence[str]) -> list[str]:
    return (
        ["t", "phi", "phi_hat"]
        + [f"Omega_{m}" for m in muscle_names]
        + [f"omega_{m}" for m in muscle_names]
        + ["reward"]
    )


def write_trace(path: str | Path, episode: Episode, muscle_names: Sequence[str], dt: float) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(trace_columns(muscle_names))
        for k, tr in enumerate(episode.transitions):
            if tr.crashed:
                break
            row = [(k + 1) * dt, episode.phis[k], episode.targets[k]]
            row += list(episode.activations[k]) + list(tr.action) + [tr.reward]
            w.writerow([repr(float(v)) for v in row])


def constant_policy(delta: Sequence[float]) -> BatchPolicy:
    delta = np.asarray(delta, dtype=float)

    def policy(obs, rngs):
        return np.tile(delta, (len(obs), 1)), [{} for _ in range(len(obs))]

    return policy


def policy_from_function(fn: Callable[[np.ndarray], np.ndarray]) -> BatchPolicy:
    """Wrap a deterministic single-observation controller as a batch policy."""

    def policy(obs, rngs):
        return np.array([fn(o) for o in obs], dtype=float), [{} for _ in range(len(obs))]

    return policy

