"""Double deep Q-learning over the 21 quantized activation increments."""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import nn
from .mdp import Transition, normalize_obs

ACTIONS = np.round(np.linspace(-1.0, 1.0, 21), 10)


@dataclass
class DqlHyper:
    hidden: tuple[int, ...] = (256,)
    lr: float = 1e-3
    gamma: float = 0.99
    buffer_capacity: int = 100_000
    batch_size: int = 64
    warmup: int = 1_000
    target_every: int = 500
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2
    reward_scale: float = 0.1
    train_every: int = 4  # environment frames per gradient update

    def __post_init__(self):
        if self.batch_size < 1 or self.train_every < 1 or self.target_every < 1:
            raise ValueError("batch_size, train_every and target_every must be >= 1")
        if self.buffer_capacity < self.batch_size:
            raise ValueError("buffer_capacity must hold at least one batch")

    def epsilon(self, frame: int, total_frames: int) -> float:
        horizon = max(1.0, self.eps_fraction * total_frames)
        frac = min(1.0, frame / horizon)
        return self.eps_start + frac * (self.eps_end - self.eps_start)


def check_muscles(n_muscles: int) -> None:
    if n_muscles != 1:
        raise ValueError(
            f"DQL supports a single muscle only: {n_muscles} muscles would need "
            f"{len(ACTIONS)}**{n_muscles} = {len(ACTIONS) ** n_muscles} joint discrete actions"
        )


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions stored column-wise.

    Appends and samples take an internal lock so collection and the
    updater may live on different threads.
    """

    def __init__(self, capacity: int, obs_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.action = np.zeros(capacity, dtype=np.int64)
        self.reward = np.zeros(capacity)
        self.terminal = np.zeros(capacity, dtype=bool)
        self.size = 0
        self.head = 0  # next slot to overwrite, i.e. the oldest entry once full
        self.appended = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.size

    def append(self, obs, action_index: int, reward: float, next_obs, terminal: bool) -> None:
        with self._lock:
            i = self.head
            self.obs[i] = obs
            self.next_obs[i] = next_obs
            self.action[i] = action_index
            self.reward[i] = reward
            self.terminal[i] = terminal
            self.head = (i + 1) % self.capacity
            self.size = min(self.size + 1, self.capacity)
            self.appended += 1

    def add_transition(self, tr: Transition) -> None:
        self.append(tr.obs, action_index(tr.action[0]), tr.reward, tr.next_obs, tr.crashed)

    def oldest_first(self) -> np.ndarray:
        """Slot indices ordered from oldest to newest."""
        start = self.head if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        with self._lock:
            if self.size == 0:
                raise ValueError("cannot sample from an empty buffer")
            idx = rng.choice(self.size, size=min(batch_size, self.size), replace=False)
            return {
                "obs": self.obs[idx].copy(),
                "action": self.action[idx].copy(),
                "reward": self.reward[idx].copy(),
                "next_obs": self.next_obs[idx].copy(),
                "terminal": self.terminal[idx].copy(),
            }


def action_index(delta: float) -> int:
    idx = int(np.argmin(np.abs(ACTIONS - delta)))
    if abs(ACTIONS[idx] - delta) > 1e-9:
        raise ValueError(f"{delta} is not one of the quantized actions")
    return idx


def make_qnet(n_muscles: int = 1, hidden=(256,), rng=None) -> nn.Mlp:
    check_muscles(n_muscles)
    return nn.Mlp([4 + n_muscles, *hidden, len(ACTIONS)], rng=rng)


def q_values(net: nn.Mlp, obs: np.ndarray) -> np.ndarray:
    return net.forward(normalize_obs(obs))


def q_target(batch: dict[str, np.ndarray], online: nn.Mlp, target: nn.Mlp, gamma: float) -> np.ndarray:
    """Double-DQN targets: the online net picks the next action, the target net scores it."""
    reward = np.asarray(batch["reward"], dtype=float)
    if reward.size == 0:
        raise ValueError("empty batch")
    if gamma == 0.0:
        return reward.copy()
    next_online = q_values(online, batch["next_obs"])
    next_target = q_values(target, batch["next_obs"])
    choice = np.argmax(next_online, axis=1)
    bootstrap = next_target[np.arange(len(choice)), choice]
    return np.where(batch["terminal"], reward, reward + gamma * bootstrap)


def select_action(obs: np.ndarray, online: nn.Mlp, epsilon: float, rng: np.random.Generator) -> int:
    if not 0.0 <= epsilon <= 1.0:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return int(rng.integers(len(ACTIONS)))
    # np.argmax returns the first maximum, i.e. ties go to the lowest index.
    return int(np.argmax(q_values(online, obs)))


class DqlAgent:
    def __init__(self, n_muscles: int = 1, hyper: DqlHyper | None = None, seed: int = 0):
        check_muscles(n_muscles)
        self.hyper = hyper or DqlHyper()
        self.n_muscles = n_muscles
        self.online = make_qnet(n_muscles, self.hyper.hidden, rng=np.random.default_rng([seed, 0]))
        self.target = self.online.copy()
        self.adam = nn.Adam(lr=self.hyper.lr)
        self.buffer = ReplayBuffer(self.hyper.buffer_capacity, 4 + n_muscles)
        self.sample_rng = np.random.default_rng([seed, 1])

    def policy(self, epsilon: float):
        """Batch policy for the rollout drivers; one epsilon draw per row."""

        def act(obs: np.ndarray, rngs):
            q = q_values(self.online, obs)
            out = np.empty((len(obs), 1))
            for i, rng in enumerate(rngs):
                if epsilon > 0 and rng.random() < epsilon:
                    out[i, 0] = ACTIONS[int(rng.integers(len(ACTIONS)))]
                else:
                    out[i, 0] = ACTIONS[int(np.argmax(q[i]))]
            return out, [{} for _ in range(len(obs))]

        return act

    def greedy_policy(self):
        return self.policy(0.0)

    @property
    def updates(self) -> int:
        return self.adam.t

    def observe(self, tr: Transition) -> None:
        self.buffer.add_transition(
            Transition(tr.obs, tr.action, tr.reward * self.hyper.reward_scale, tr.next_obs, tr.done, tr.crashed)
        )

    def update(self) -> float | None:
        if len(self.buffer) < self.hyper.warmup:
            return None
        return dql_update(self.buffer, self.online, self.target, self.adam, self.hyper, self.sample_rng)


def dql_loss_and_grads(batch, online: nn.Mlp, target: nn.Mlp, gamma: float):
    y = q_target(batch, online, target, gamma)
    q_all, cache = online.forward(normalize_obs(batch["obs"]), cache=True)
    rows = np.arange(len(y))
    err = q_all[rows, batch["action"]] - y
    loss = float(np.mean(err**2))
    upstream = np.zeros_like(q_all)
    upstream[rows, batch["action"]] = 2.0 * err / len(y)
    return loss, online.backward(cache, upstream)


def dql_update(
    buffer: ReplayBuffer, online: nn.Mlp, target: nn.Mlp, adam: nn.Adam, hyper: DqlHyper, rng: np.random.Generator
) -> float:
    """One minibatch MSE step; hard-copies online into target every ``target_every`` updates."""
    batch = buffer.sample(hyper.batch_size, rng)
    loss, grads = dql_loss_and_grads(batch, online, target, hyper.gamma)
    adam.step(online.params(), grads)
    if adam.t % hyper.target_every == 0:
        target.load_from(online)
    return loss
