"""PPO with a diagonal Gaussian policy over per-muscle activation increments.

Policy means and the state value share one MLP: its output layer has
``n_muscles`` mean units followed by one value unit. The log standard
deviation is a free, state-independent parameter vector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .mdp import ACTION_LIMIT, Episode, normalize_obs

LOG_STD_MIN, LOG_STD_MAX = -5.0, 1.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class StaleRolloutError(RuntimeError):
    """Raised when a rollout was collected under an older policy snapshot."""


@dataclass
class PpoHyper:
    hidden: tuple[int, ...] = (256,)
    lr: float = 3e-4
    clip: float = 0.2
    c1: float = 0.5
    c2: float = 0.01
    gae_lambda: float = 0.95
    gamma: float = 0.99
    epochs: int = 4
    minibatch: int = 256
    rollout_frames: int = 2048
    init_log_std: float = 0.0
    reward_scale: float = 0.01
    value_target: str = "return"  # or "rollout_value"
    max_grad_norm: float | None = None

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must lie in (0, 1)")
        if self.c1 < 0 or self.c2 < 0:
            raise ValueError("c1 and c2 must be >= 0")
        if not 0 <= self.gae_lambda <= 1 or not 0 < self.gamma <= 1:
            raise ValueError("gae_lambda must lie in [0, 1] and gamma in (0, 1]")
        if self.value_target not in ("return", "rollout_value"):
            raise ValueError("value_target must be 'return' or 'rollout_value'")


class PolicyValueNet:
    def __init__(self, n_muscles: int, hidden: Sequence[int] = (256,), rng=None, init_log_std: float = 0.0):
        self.n_muscles = n_muscles
        self.mlp = nn.Mlp([4 + n_muscles, *hidden, n_muscles + 1], rng=rng, output_gain=0.01)
        self.log_std = np.full(n_muscles, float(init_log_std))
        self.version = 0

    def params(self) -> list[np.ndarray]:
        return self.mlp.params() + [self.log_std]

    def effective_log_std(self) -> np.ndarray:
        return np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def heads(self, obs: np.ndarray, cache: bool = False):
        out = self.mlp.forward(normalize_obs(obs), cache=cache)
        if cache:
            out, inputs = out
            return out[..., : self.n_muscles], out[..., self.n_muscles], inputs
        return out[..., : self.n_muscles], out[..., self.n_muscles]

    def snapshot(self) -> "PolicyValueNet":
        twin = PolicyValueNet.__new__(PolicyValueNet)
        twin.n_muscles = self.n_muscles
        twin.mlp = self.mlp.copy()
        twin.log_std = self.log_std.copy()
        twin.version = self.version
        return twin

    def to_flat_extra(self) -> np.ndarray:
        return self.log_std.copy()


def gaussian_logprob(mean, log_std, action) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    log_std = np.asarray(log_std, dtype=float)
    z = (np.asarray(action, dtype=float) - mean) / np.exp(log_std)
    return np.sum(-0.5 * z**2 - log_std - HALF_LOG_2PI, axis=-1)


def gaussian_entropy(log_std) -> float:
    log_std = np.asarray(log_std, dtype=float)
    return float(np.sum(log_std + 0.5 + HALF_LOG_2PI))


def gae_advantages(rewards, values, dones, gamma: float, lam: float, bootstrap: float = 0.0):
    """Reverse-recursion GAE over one contiguous segment.

    ``dones[t]`` marks a terminal step (no bootstrap past it). ``bootstrap``
    is the value of the state after the last step when the segment was cut
    off rather than terminated.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    if not rewards.shape == values.shape == dones.shape:
        raise ValueError("rewards, values and dones must have equal lengths")
    adv = np.zeros_like(rewards)
    next_value, running = float(bootstrap), 0.0
    for t in range(len(rewards) - 1, -1, -1):
        live = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * live - values[t]
        running = delta + gamma * lam * live * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


@dataclass
class Rollout:
    obs: np.ndarray
    raw_actions: np.ndarray
    old_logprobs: np.ndarray
    old_values: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    version: int
    episodes: list[Episode] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.obs)


def build_rollout(episodes: Sequence[Episode], net: PolicyValueNet, version: int, hyper: PpoHyper) -> Rollout:
    """Flatten finished episodes and attach GAE advantages and return targets."""
    obs, raw, logp, vals, advs, rets = [], [], [], [], [], []
    for ep in episodes:
        trs = ep.transitions
        r = np.array([t.reward for t in trs]) * hyper.reward_scale
        v = np.array([t.info["value"] for t in trs])
        dones = np.array([t.crashed for t in trs])
        last = trs[-1]
        bootstrap = 0.0
        if not last.crashed:
            # Time limit, not a true terminal: bootstrap from the final state.
            bootstrap = float(net.heads(last.next_obs[None, :])[1][0])
        a, ret = gae_advantages(r, v, dones, hyper.gamma, hyper.gae_lambda, bootstrap)
        obs.append(np.array([t.obs for t in trs]))
        raw.append(np.array([t.info["raw"] for t in trs]))
        logp.append(np.array([t.info["logprob"] for t in trs]))
        vals.append(v)
        advs.append(a)
        rets.append(ret)
    return Rollout(
        np.concatenate(obs), np.concatenate(raw), np.concatenate(logp), np.concatenate(vals),
        np.concatenate(advs), np.concatenate(rets), version, list(episodes),
    )


def ppo_loss(batch: dict, net: PolicyValueNet, old_logprobs, hyper: PpoHyper, with_grads: bool = False):
    """Clipped surrogate + weighted value error - weighted entropy, to be minimized.

    ``batch`` holds ``obs``, ``raw_actions``, ``advantages`` and
    ``value_targets``. Returns ``(loss, components)`` and, if asked, the
    gradients aligned with ``net.params()``.
    """
    n = net.n_muscles
    adv = np.asarray(batch["advantages"], dtype=float)
    targets = np.asarray(batch["value_targets"], dtype=float)
    size = len(adv)
    mean, value, inputs = net.heads(batch["obs"], cache=True)
    log_std = net.effective_log_std()
    std = np.exp(log_std)
    z = (np.asarray(batch["raw_actions"], dtype=float) - mean) / std
    logp = np.sum(-0.5 * z**2 - log_std - HALF_LOG_2PI, axis=-1)
    ratio = np.exp(logp - np.asarray(old_logprobs, dtype=float))
    clipped = np.clip(ratio, 1.0 - hyper.clip, 1.0 + hyper.clip)
    unclipped_term = ratio * adv
    surrogate = np.minimum(unclipped_term, clipped * adv)
    policy_loss = -float(np.mean(surrogate))
    value_err = value - targets
    value_loss = float(np.mean(value_err**2))
    entropy = gaussian_entropy(log_std)
    loss = policy_loss + hyper.c1 * value_loss - hyper.c2 * entropy
    comps = {
        "policy": policy_loss,
        "value": value_loss,
        "entropy": entropy,
        "clip_fraction": float(np.mean(np.abs(ratio - 1.0) > hyper.clip)),
        "approx_kl": float(np.mean(np.asarray(old_logprobs) - logp)),
    }
    if not with_grads:
        return loss, comps

    # d(-mean surrogate)/d logp; zero where the clipped branch is the minimum.
    active = unclipped_term <= clipped * adv
    g_logp = -(active * adv * ratio) / size
    g_mean = g_logp[:, None] * z / std
    upstream = np.zeros((size, n + 1))
    upstream[:, :n] = g_mean
    upstream[:, n] = 2.0 * hyper.c1 * value_err / size
    grads = net.mlp.backward(inputs, upstream)
    in_range = (net.log_std >= LOG_STD_MIN) & (net.log_std <= LOG_STD_MAX)
    g_log_std = (g_logp[:, None] * (z**2 - 1.0)).sum(axis=0) - hyper.c2
    grads.append(g_log_std * in_range)
    return loss, comps, grads


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if norm > max_norm:
        for g in grads:
            g *= max_norm / norm
    return norm


def ppo_update(rollout: Rollout, net: PolicyValueNet, adam: nn.Adam, hyper: PpoHyper, rng: np.random.Generator) -> dict:
    """K epochs of minibatch Adam steps on the PPO loss; bumps the policy version."""
    if rollout.version != net.version:
        raise StaleRolloutError(f"rollout from policy v{rollout.version}, current policy is v{net.version}")
    adv = rollout.advantages
    std = adv.std()
    adv = (adv - adv.mean()) / (std if std > 0 else 1.0)
    targets = rollout.returns if hyper.value_target == "return" else rollout.old_values
    size = len(rollout)
    stats = {"loss": [], "clip_fraction": [], "entropy": [], "policy": [], "value": []}
    for _ in range(hyper.epochs):
        order = rng.permutation(size)
        for start in range(0, size, hyper.minibatch):
            idx = order[start : start + hyper.minibatch]
            batch = {
                "obs": rollout.obs[idx],
                "raw_actions": rollout.raw_actions[idx],
                "advantages": adv[idx],
                "value_targets": targets[idx],
            }
            loss, comps, grads = ppo_loss(batch, net, rollout.old_logprobs[idx], hyper, with_grads=True)
            if hyper.max_grad_norm is not None:
                clip_grad_norm(grads, hyper.max_grad_norm)
            adam.step(net.params(), grads)
            stats["loss"].append(loss)
            for key in ("clip_fraction", "entropy", "policy", "value"):
                stats[key].append(comps[key])
    net.version += 1
    return {key: float(np.mean(vals)) for key, vals in stats.items()}


def act(obs: np.ndarray, net: PolicyValueNet, deterministic: bool, rngs: Sequence[np.random.Generator]):
    """Sample (or take the mean of) the policy and clamp to the action limits.

    The log-probability is that of the raw, pre-clamp sample.
    """
    mean, value = net.heads(obs)
    log_std = net.effective_log_std()
    if deterministic:
        raw = mean.copy()
    else:
        noise = np.array([rng.standard_normal(net.n_muscles) for rng in rngs])
        raw = mean + np.exp(log_std) * noise
    logp = gaussian_logprob(mean, log_std, raw)
    actions = np.clip(raw, -ACTION_LIMIT, ACTION_LIMIT)
    return actions, logp, value, raw


class PpoAgent:
    def __init__(self, n_muscles: int, hyper: PpoHyper | None = None, seed: int = 0):
        self.hyper = hyper or PpoHyper()
        self.n_muscles = n_muscles
        self.net = PolicyValueNet(n_muscles, self.hyper.hidden, np.random.default_rng([seed, 0]), self.hyper.init_log_std)
        self.adam = nn.Adam(lr=self.hyper.lr)
        self.update_rng = np.random.default_rng([seed, 2])

    def policy(self, deterministic: bool = False, net: PolicyValueNet | None = None):
        """Batch policy over a frozen snapshot of the current parameters."""
        snap = net if net is not None else self.net.snapshot()

        def policy_fn(obs: np.ndarray, rngs):
            actions, logp, value, raw = act(obs, snap, deterministic, rngs)
            infos = [
                {"raw": raw[i], "logprob": float(logp[i]), "value": float(value[i]), "version": snap.version}
                for i in range(len(obs))
            ]
            return actions, infos

        policy_fn.snapshot = snap
        return policy_fn

    def update(self, episodes: Sequence[Episode], version: int) -> dict:
        rollout = build_rollout(episodes, self.net, version, self.hyper)
        return ppo_update(rollout, self.net, self.adam, self.hyper, self.update_rng)
