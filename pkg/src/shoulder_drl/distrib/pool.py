"""Learner side of the rollout fabric.

The learner owns trajectories, observations, rewards and the policy; the
workers only integrate the plant. Episodes run in lockstep across the
pool: every tick sends one STEP to each busy worker, then collects every
reply, so each connection is strictly request-reply.
"""

from __future__ import annotations

import logging
import os
import socket
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from ..mdp import EpisodeRecorder, EpisodeSpec, Episode, LocalEnv, RewardParams, Transition, BatchPolicy, episode_steps
from ..plant import Crashed, JointState, PlantConfig
from . import wire

log = logging.getLogger(__name__)


class WorkerLost(ConnectionError):
    """A worker stopped answering mid-conversation."""


class NoWorkersError(ConnectionError):
    pass


class LocalEndpoint:
    """In-process stand-in for a worker, with the same call pattern as a remote one."""

    def __init__(self, cfg: PlantConfig, name: str = "local"):
        self.env = LocalEnv(cfg)
        self.name = name
        self.alive = True
        self.dt = cfg.dt
        self.n_muscles = cfg.n_muscles
        self._pending = None

    def reset(self, spec: EpisodeSpec) -> tuple[JointState, np.ndarray]:
        return self.env.reset(spec.trajectory.sample(0.0)[0], spec.crash_at)

    def send_step(self, delta: np.ndarray) -> None:
        self._pending = self.env.step(delta)

    def recv_step(self):
        result, self._pending = self._pending, None
        return result

    def heal(self) -> bool:
        return True

    def close(self) -> None:
        pass


class RemoteEndpoint:
    def __init__(self, address: str | tuple[str, int], timeout: float = 30.0, connect: bool = True):
        self.address = wire.parse_address(address) if isinstance(address, str) else tuple(address)
        self.name = "%s:%d" % self.address
        self.timeout = timeout
        self.sock: socket.socket | None = None
        self.alive = False
        self.in_episode = False
        self.awaiting_step = False
        self.dt: float | None = None
        self.n_muscles: int | None = None
        self.failures = 0
        self.next_retry = 0.0
        if connect:
            self.connect()

    def connect(self) -> None:
        self.close()
        sock = socket.create_connection(self.address, timeout=self.timeout)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock = sock
        reply = self._call({"type": wire.HELLO, "version": wire.PROTOCOL_VERSION})
        if reply["type"] != wire.HELLO:
            self.close()
            raise ConnectionError(f"{self.name}: handshake refused: {reply.get('message')}")
        self.dt = float(reply["dt"])
        self.n_muscles = len(reply["muscles"])
        self.alive = True
        self.failures = 0

    def _call(self, msg: dict) -> dict:
        self._send(msg)
        return self._recv()

    def _send(self, msg: dict) -> None:
        try:
            wire.write_message(self.sock, msg)
        except (OSError, AttributeError) as exc:
            self._lose(exc)

    def _recv(self) -> dict:
        try:
            return wire.read_message(self.sock)
        except (OSError, wire.FrameError, AttributeError) as exc:
            self._lose(exc)

    def _lose(self, exc: Exception):
        self.close()
        raise WorkerLost(f"{self.name}: {exc}") from exc

    def reset(self, spec: EpisodeSpec) -> tuple[JointState, np.ndarray]:
        if self.awaiting_step:
            raise RuntimeError(f"{self.name}: RESET while a STEP is in flight")
        msg = {"type": wire.RESET, "seed": int(spec.seed), "initial_phi": spec.trajectory.sample(0.0)[0]}
        if spec.crash_at is not None:
            msg["crash_at"] = int(spec.crash_at)
        reply = self._call(msg)
        if reply["type"] != wire.RESET_OK:
            raise RuntimeError(f"{self.name}: RESET rejected: {reply.get('message')}")
        self.in_episode = True
        return JointState(reply["phi"], reply["phi_dot"]), np.array(reply["activations"], dtype=float)

    def send_step(self, delta: np.ndarray) -> None:
        if not self.in_episode:
            raise RuntimeError(f"{self.name}: STEP before RESET_OK")
        if self.awaiting_step:
            raise RuntimeError(f"{self.name}: second STEP in flight")
        self._send({"type": wire.STEP, "omega": [float(d) for d in delta]})
        self.awaiting_step = True

    def recv_step(self):
        reply = self._recv()
        self.awaiting_step = False
        kind = reply["type"]
        if kind == wire.STEP_OK:
            return JointState(reply["phi"], reply["phi_dot"]), np.array(reply["activations"], dtype=float)
        if kind == wire.CRASHED:
            self.in_episode = False
            return Crashed(reply.get("reason", "crashed")), np.array(reply["activations"], dtype=float)
        raise RuntimeError(f"{self.name}: STEP rejected: {reply.get('message')}")

    def heal(self) -> bool:
        """One reconnect attempt if the backoff window has passed."""
        if self.alive:
            return True
        now = time.monotonic()
        if now < self.next_retry:
            return False
        try:
            self.connect()
            log.info("%s: rejoined the pool", self.name)
            return True
        except OSError as exc:
            self.failures += 1
            delay = min(0.05 * 2**self.failures, 5.0)
            self.next_retry = now + delay
            log.warning("%s: reconnect failed (%s); retry in %.2fs", self.name, exc, delay)
            return False

    def shutdown(self) -> None:
        if self.sock is None:
            return
        try:
            self._call({"type": wire.SHUTDOWN})
        except WorkerLost:
            pass
        self.close()

    def close(self) -> None:
        self.alive = False
        self.in_episode = False
        self.awaiting_step = False
        if self.sock is not None:
            try:
                self.sock.close()
            finally:
                self.sock = None


class WorkerPool:
    """The set of endpoints; a dead endpoint is skipped until it heals."""

    def __init__(self, endpoints: Sequence, max_size: int | None = None):
        self.max_size = max_size if max_size is not None else len(endpoints)
        if len(endpoints) > self.max_size:
            raise ValueError("more endpoints than the pool maximum")
        self.endpoints = list(endpoints)

    @classmethod
    def local(cls, cfg: PlantConfig, n: int = 1) -> "WorkerPool":
        return cls([LocalEndpoint(cfg, f"local{i}") for i in range(n)])

    @classmethod
    def connect(cls, addresses: Iterable[str], timeout: float = 30.0) -> "WorkerPool":
        endpoints = []
        for addr in addresses:
            ep = RemoteEndpoint(addr, timeout=timeout, connect=False)
            try:
                ep.connect()
            except OSError as exc:
                log.warning("%s: unreachable (%s)", ep.name, exc)
            endpoints.append(ep)
        return cls(endpoints)

    @property
    def alive(self) -> list:
        return [ep for ep in self.endpoints if ep.alive]

    def __len__(self) -> int:
        return len(self.alive)

    @property
    def dt(self) -> float:
        for ep in self.alive:
            return ep.dt
        raise NoWorkersError("no connected workers")

    def close(self, shutdown: bool = False) -> None:
        for ep in self.endpoints:
            if shutdown and hasattr(ep, "shutdown"):
                ep.shutdown()
            ep.close()


def heal_pool(pool: WorkerPool) -> WorkerPool:
    """Best-effort reconnect of dead endpoints, with per-endpoint backoff."""
    for ep in pool.endpoints:
        if not ep.alive and len(pool.alive) < pool.max_size:
            ep.heal()
    return pool


@dataclass
class DriveResult:
    episodes: list[Episode]
    dropped: list[int] = field(default_factory=list)

    @property
    def frames(self) -> int:
        return sum(len(ep) for ep in self.episodes)


def drive(
    pool: WorkerPool,
    policy: BatchPolicy,
    next_spec: Callable[[int, int], EpisodeSpec | None],
    p: RewardParams,
    episode_T: float,
    requeue_dropped: bool = False,
    on_tick: Callable[[list[Transition]], None] | None = None,
) -> DriveResult:
    """Run episodes across the pool until ``next_spec`` stops handing them out.

    ``next_spec(in_flight, finished_frames)`` returns the next episode to
    start or None. Episodes whose worker dies are dropped (or re-run when
    ``requeue_dropped``).
    """
    heal_pool(pool)
    if not pool.alive:
        raise NoWorkersError("no connected workers")
    dt = pool.dt
    n_steps = episode_steps(episode_T, dt)
    busy: dict[int, EpisodeRecorder] = {}  # endpoint slot -> episode in flight
    finished: list[Episode] = []
    dropped: list[int] = []
    retry: list[EpisodeSpec] = []
    frames = 0
    exhausted = False

    def drop(slot: int, exc: Exception) -> None:
        rec = busy.pop(slot)
        dropped.append(rec.spec.index)
        log.warning("worker %s lost mid-episode %d (%s); discarding it", pool.endpoints[slot].name, rec.spec.index, exc)
        if requeue_dropped:
            retry.append(rec.spec)

    while True:
        for slot, ep in enumerate(pool.endpoints):
            if slot in busy or not ep.alive:
                continue
            spec = retry.pop(0) if retry else (None if exhausted else next_spec(len(busy), frames))
            if spec is None:
                exhausted = True
                continue
            rec = EpisodeRecorder(spec, dt, n_steps, p)
            try:
                state, acts = ep.reset(spec)
            except WorkerLost as exc:
                busy[slot] = rec
                drop(slot, exc)
                continue
            rec.start(state, acts)
            busy[slot] = rec
        if not busy:
            if retry or not exhausted:
                heal_pool(pool)
                if not pool.alive:
                    raise NoWorkersError("every worker was lost")
                continue
            break
        slots = sorted(busy)
        obs = np.array([busy[s].obs for s in slots])
        actions, infos = policy(obs, [busy[s].rng for s in slots])
        sent = []
        for i, slot in enumerate(slots):
            try:
                pool.endpoints[slot].send_step(np.asarray(actions[i], dtype=float))
                sent.append(i)
            except WorkerLost as exc:
                drop(slot, exc)
        new: list[Transition] = []
        for i in sent:
            slot = slots[i]
            try:
                result, acts = pool.endpoints[slot].recv_step()
            except WorkerLost as exc:
                drop(slot, exc)
                continue
            rec = busy[slot]
            done = rec.record(actions[i], infos[i], result, acts)
            new.append(rec.episode.transitions[-1])
            if done:
                finished.append(busy.pop(slot).episode)
                frames += len(finished[-1])
        if on_tick is not None and new:
            on_tick(new)
    finished.sort(key=lambda e: e.index)
    return DriveResult(finished, sorted(dropped))


def collect_rollout(
    pool: WorkerPool,
    policy: BatchPolicy,
    n_frames: int,
    trajectory_source: Callable[[int], EpisodeSpec],
    reward_params: RewardParams,
    first_index: int = 0,
    episode_T: float = 10.0,
    on_tick: Callable[[list[Transition]], None] | None = None,
) -> DriveResult:
    """Gather whole episodes totalling at most ``n_frames`` transitions.

    A new episode starts only if a full-length allowance for it and for
    every episode in flight still fits in the budget, so the rollout never
    overshoots (it falls short when crashes end episodes early).
    """
    n_steps = episode_steps(episode_T, pool.dt)
    counter = iter(range(first_index, 1 << 62))

    def next_spec(in_flight: int, frames: int):
        if frames + (in_flight + 1) * n_steps > n_frames:
            return None
        return trajectory_source(next(counter))

    return drive(pool, policy, next_spec, reward_params, episode_T, on_tick=on_tick)


def run_specs(
    pool: WorkerPool, policy: BatchPolicy, specs: Sequence[EpisodeSpec], reward_params: RewardParams, episode_T: float
) -> list[Episode]:
    """Run a fixed list of episodes (re-running any that lose their worker)."""
    queue = list(specs)

    def next_spec(in_flight: int, frames: int):
        return queue.pop(0) if queue else None

    return drive(pool, policy, next_spec, reward_params, episode_T, requeue_dropped=True).episodes


class LocalCluster:
    """Environment-server subprocesses on this machine, for desk-scale runs."""

    def __init__(self, n: int, cfg: PlantConfig, host: str = "127.0.0.1"):
        self.cfg = cfg
        self.host = host
        self._dir = tempfile.TemporaryDirectory(prefix="shoulder_drl_")
        self.cfg_path = Path(self._dir.name) / "plant.cfg"
        cfg.save(self.cfg_path)
        self.procs: list[subprocess.Popen | None] = [None] * n
        self.addresses: list[str] = [""] * n
        for i in range(n):
            self.start(i)

    def start(self, i: int, port: int = 0) -> str:
        if port == 0 and self.addresses[i]:
            port = wire.parse_address(self.addresses[i])[1]
        cmd = [sys.executable, "-m", "shoulder_drl.cli", "serve-env", "--listen", f"{self.host}:{port}", "--plant", str(self.cfg_path)]
        env = dict(os.environ, PYTHONUNBUFFERED="1")
        proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.DEVNULL, text=True, env=env)
        line = proc.stdout.readline().strip()
        if not line.startswith("LISTENING "):
            proc.kill()
            raise RuntimeError(f"env server failed to start: {line!r}")
        self.procs[i] = proc
        self.addresses[i] = line.split()[1]
        return self.addresses[i]

    def kill(self, i: int) -> None:
        proc = self.procs[i]
        if proc is not None and proc.poll() is None:
            proc.kill()
            proc.wait()

    def pool(self, timeout: float = 30.0) -> WorkerPool:
        return WorkerPool.connect(self.addresses, timeout=timeout)

    def close(self) -> None:
        for i in range(len(self.procs)):
            self.kill(i)
        for proc in self.procs:
            if proc is not None and proc.stdout is not None:
                proc.stdout.close()
        self._dir.cleanup()

    def __enter__(self) -> "LocalCluster":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
