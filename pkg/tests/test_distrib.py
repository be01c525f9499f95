import socket
import threading

import numpy as np
import pytest

from shoulder_drl.distrib import wire
from shoulder_drl.distrib.pool import (
    LocalCluster,
    NoWorkersError,
    RemoteEndpoint,
    WorkerPool,
    collect_rollout,
    heal_pool,
    run_specs,
)
from shoulder_drl.distrib.server import serve_env
from shoulder_drl.mdp import EpisodeSpec, RewardParams, constant_policy
from shoulder_drl.plant import reference_config
from shoulder_drl.ppo import PpoAgent, PpoHyper
from shoulder_drl.trajectory import random_trajectory

CFG = reference_config()
P = RewardParams()


@pytest.fixture
def server():
    """An env server on a background thread; yields its address."""
    ready = threading.Event()
    bound = {}

    def on_ready(addr):
        bound["addr"] = "%s:%d" % addr
        ready.set()

    th = threading.Thread(target=serve_env, args=(("127.0.0.1", 0), CFG, on_ready), daemon=True)
    th.start()
    assert ready.wait(10)
    yield bound["addr"]
    try:
        RemoteEndpoint(bound["addr"], timeout=5).shutdown()
    except OSError:
        pass
    th.join(5)


def source(i):
    return EpisodeSpec(i, random_trajectory([3, i]), seed=3)


def stochastic_policy():
    return PpoAgent(4, PpoHyper(hidden=(16,), init_log_std=-1.5), seed=1).policy(False)


def flatten(episodes):
    parts = []
    for ep in episodes:
        for t in ep.transitions:
            parts += [t.obs, t.action, np.array([t.reward, t.done, t.crashed]), t.info["raw"]]
    return np.concatenate(parts).tobytes()


def test_tcp_collection_is_bit_identical_to_in_process(server):
    local = collect_rollout(WorkerPool.local(CFG, 1), stochastic_policy(), 1000, source, P)
    pool = WorkerPool.connect([server])
    try:
        remote = collect_rollout(pool, stochastic_policy(), 1000, source, P)
    finally:
        pool.close()
    assert [e.index for e in local.episodes] == list(range(10))
    assert [e.index for e in remote.episodes] == list(range(10))
    assert flatten(local.episodes) == flatten(remote.episodes)


def test_multi_worker_results_are_ordered_and_match_single_worker():
    one = collect_rollout(WorkerPool.local(CFG, 1), stochastic_policy(), 600, source, P)
    three = collect_rollout(WorkerPool.local(CFG, 3), stochastic_policy(), 600, source, P)
    assert [e.index for e in three.episodes] == list(range(6))
    # Per-episode RNG streams make the outcome independent of worker count, up
    # to last-bit differences between batched matrix products of different heights.
    a = np.frombuffer(flatten(one.episodes))
    b = np.frombuffer(flatten(three.episodes))
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)


def test_budget_is_never_exceeded():
    res = collect_rollout(WorkerPool.local(CFG, 4), constant_policy([0.0] * 4), 2048, source, P)
    assert res.frames == 2000
    assert collect_rollout(WorkerPool.local(CFG, 2), constant_policy([0.0] * 4), 99, source, P).episodes == []


def test_crashed_episodes_are_short_and_terminal():
    def crashing(i):
        return EpisodeSpec(i, random_trajectory([3, i]), seed=3, crash_at=10 if i % 2 else None)

    res = collect_rollout(WorkerPool.local(CFG, 2), stochastic_policy(), 400, crashing, P)
    for ep in res.episodes:
        if ep.index % 2:
            assert ep.crashed and len(ep) == 11 and ep.transitions[-1].reward == P.crash_penalty
        else:
            assert not ep.crashed and len(ep) == 100


def test_unknown_message_type_gets_error_and_connection_survives(server):
    host, port = wire.parse_address(server)
    with socket.create_connection((host, port), timeout=5) as sock:
        wire.write_message(sock, {"type": wire.HELLO, "version": wire.PROTOCOL_VERSION})
        assert wire.read_message(sock)["type"] == wire.HELLO
        wire.write_message(sock, {"type": "TELEPORT"})
        assert wire.read_message(sock)["type"] == wire.ERROR
        wire.write_message(sock, {"type": wire.RESET, "seed": 0, "initial_phi": 50.0})
        assert wire.read_message(sock)["type"] == wire.RESET_OK


def test_version_mismatch_closes_connection(server):
    host, port = wire.parse_address(server)
    with socket.create_connection((host, port), timeout=5) as sock:
        wire.write_message(sock, {"type": wire.HELLO, "version": 2})
        reply = wire.read_message(sock)
        assert reply["type"] == wire.ERROR and "version" in reply["message"]
        with pytest.raises(wire.ConnectionClosed):
            wire.read_message(sock)


def test_malformed_frame_closes_connection(server):
    host, port = wire.parse_address(server)
    with socket.create_connection((host, port), timeout=5) as sock:
        sock.sendall(b"\x00\x00\x00\x05notjs")
        assert wire.read_message(sock)["type"] == wire.ERROR
        with pytest.raises(wire.ConnectionClosed):
            wire.read_message(sock)


def test_endpoint_state_machine_guards(server):
    ep = RemoteEndpoint(server, timeout=5)
    try:
        with pytest.raises(RuntimeError):
            ep.send_step(np.zeros(4))
        ep.reset(source(0))
        ep.send_step(np.zeros(4))
        with pytest.raises(RuntimeError):
            ep.send_step(np.zeros(4))
        with pytest.raises(RuntimeError):
            ep.reset(source(1))
        ep.recv_step()
    finally:
        ep.close()


def test_unreachable_pool_raises():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    pool = WorkerPool.connect([f"127.0.0.1:{port}"], timeout=1)
    assert len(pool) == 0
    with pytest.raises(NoWorkersError):
        collect_rollout(pool, stochastic_policy(), 100, source, P)


def test_worker_kill_loses_exactly_that_episode():
    with LocalCluster(2, CFG) as cluster:
        pool = cluster.pool()
        ticks = [0]

        def on_tick(_):
            ticks[0] += 1
            if ticks[0] == 30:
                cluster.kill(1)

        res = collect_rollout(pool, stochastic_policy(), 500, source, P, on_tick=on_tick)
        pool.close()
    assert res.dropped == [1]
    assert [e.index for e in res.episodes] == [0, 2, 3, 4, 5]
    assert all(len(e) == 100 and not e.crashed for e in res.episodes)
    # The survivors match an undisturbed collection (to batched-matmul rounding).
    clean = collect_rollout(WorkerPool.local(CFG, 1), stochastic_policy(), 600, source, P)
    survivors = [e for e in clean.episodes if e.index != 1]
    np.testing.assert_allclose(np.frombuffer(flatten(res.episodes)), np.frombuffer(flatten(survivors)), rtol=1e-9, atol=1e-9)


def test_restarted_worker_rejoins_and_evaluation_requeues():
    with LocalCluster(2, CFG) as cluster:
        pool = cluster.pool()
        cluster.kill(1)
        specs = [source(i) for i in range(4)]
        episodes = run_specs(pool, stochastic_policy(), specs, P, 10.0)
        assert [e.index for e in episodes] == [0, 1, 2, 3]
        assert len(pool) == 1
        cluster.start(1)
        pool.endpoints[1].next_retry = 0.0
        heal_pool(pool)
        assert len(pool) == 2
        pool.close()


def test_heal_backs_off_exponentially():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    ep = RemoteEndpoint(f"127.0.0.1:{port}", timeout=1, connect=False)
    delays = []
    for _ in range(4):
        ep.next_retry = 0.0
        assert not ep.heal()
        delays.append(ep.failures)
    assert delays == [1, 2, 3, 4]
    assert not ep.heal()  # inside the backoff window: no attempt, no new failure
    assert ep.failures == 4
