import csv

import numpy as np
import pytest

from shoulder_drl import harness, nn
from shoulder_drl.distrib.pool import LocalCluster, WorkerPool
from shoulder_drl.harness import CheckpointError, EvalReport, RunConfig, tracking_metrics
from shoulder_drl.kvfile import ConfigError
from shoulder_drl.mdp import Episode, RewardParams, Transition
from shoulder_drl.trajectory import from_waypoints


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def small_cfg(tmp_path, **kw):
    values = {"output_dir": str(tmp_path), "experiment": "t", "ppo_hidden": "16", "ppo_rollout_frames": "1000", "workers": "2"}
    values.update({k: str(v) for k, v in kw.items()})
    return RunConfig.from_kv(values)


def test_config_types_and_defaults():
    cfg = RunConfig.from_kv({"frames": "2e5", "ppo_lr": "1e-4", "ppo_max_grad_norm": "0.5", "dql_hidden": "64,32", "crash_rate": "0.05"})
    assert cfg.frames == 200_000 and cfg.ppo.lr == 1e-4 and cfg.ppo.max_grad_norm == 0.5
    assert cfg.dql.hidden == (64, 32) and cfg.crash_rate == 0.05
    assert cfg.ppo.hidden == (256,)
    assert RunConfig.from_kv({"n_muscles": "4"}).ppo.hidden == (250, 250, 250)


@pytest.mark.parametrize(
    "values",
    [{"bogus": "1"}, {"ppo_bogus": "1"}, {"frames": "lots"}, {"agent": "dql", "n_muscles": "4"}, {"agent": "sarsa"}, {"ppo_clip": "2"}, {"crash_rate": "1.5"}],
)
def test_config_errors(values):
    with pytest.raises(ConfigError):
        RunConfig.from_kv(values)


def test_config_round_trip(tmp_path):
    cfg = RunConfig.from_kv({"n_muscles": "4", "ppo_lr": "1e-4", "seed": "7"})
    path = tmp_path / "run.cfg"
    from shoulder_drl import kvfile

    path.write_text(kvfile.dump(cfg.to_kv()))
    assert RunConfig.load(path) == cfg
    assert RunConfig.load(path, {"seed": "8"}).seed == 8


def test_reward_params_follow_muscle_count():
    assert RunConfig.from_kv({}).reward_params().tracking_only
    assert not RunConfig.from_kv({"n_muscles": "4"}).reward_params().tracking_only
    assert not RunConfig.from_kv({"reward": "full"}).reward_params().tracking_only


def test_zero_budget_checkpoint_is_initialization(tmp_path):
    cfg = small_cfg(tmp_path, frames=0)
    result = harness.train(cfg, WorkerPool.local(cfg.plant_config(), 2))
    net, extra = nn.load(result.checkpoint)
    fresh = harness.make_agent(cfg)
    assert net.flat().tobytes() == fresh.net.mlp.flat().tobytes()
    assert extra.tobytes() == fresh.net.log_std.tobytes()
    assert rows(result.stats_path) == [] and result.updates == 0


def test_ppo_stats_rows_match_updates(tmp_path):
    cfg = small_cfg(tmp_path, frames=3000, checkpoint_every=2000)
    result = harness.train(cfg, WorkerPool.local(cfg.plant_config(), 2))
    stats = rows(result.stats_path)
    assert len(stats) == result.updates == 3
    assert [int(r["frames"]) for r in stats] == [1000, 2000, 3000]
    assert len(rows(result.episodes_path)) == 30
    assert (cfg.run_dir / "checkpoint_00002000.bin").exists()
    assert (cfg.run_dir / "checkpoint.bin.meta").exists()


def test_dql_stats_rows_match_updates(tmp_path):
    cfg = small_cfg(tmp_path, agent="dql", frames=1600, dql_hidden="16", dql_warmup="200", dql_train_every="4")
    result = harness.train(cfg, WorkerPool.local(cfg.plant_config(), 2))
    stats = rows(result.stats_path)
    assert 1000 < result.frames <= 1600  # random exploration crashes some episodes early
    assert len(stats) == result.updates == result.agent.updates > 0
    assert int(stats[-1]["frames"]) <= result.frames
    assert all(r["epsilon"] != "" for r in stats)


def test_single_worker_training_is_deterministic(tmp_path):
    outs = []
    for name in ("a", "b"):
        cfg = small_cfg(tmp_path, frames=2000, experiment=name, crash_rate=0.3)
        result = harness.train(cfg, WorkerPool.local(cfg.plant_config(), 1))
        outs.append((result.checkpoint.read_bytes(), result.stats_path.read_text(), result.episodes_path.read_text()))
    assert outs[0] == outs[1]


def test_crash_injection_rate(tmp_path):
    cfg = small_cfg(tmp_path, crash_rate=0.5)
    specs = [harness.training_spec(cfg, i, 100) for i in range(400)]
    frac = np.mean([s.crash_at is not None for s in specs])
    assert 0.4 < frac < 0.6
    assert all(0 <= s.crash_at < 100 for s in specs if s.crash_at is not None)
    assert harness.training_spec(small_cfg(tmp_path), 3, 100).crash_at is None


def test_ppo_smoke_run_beats_its_starting_baseline(tmp_path):
    cfg = RunConfig.from_kv({"output_dir": str(tmp_path), "experiment": "smoke", "frames": "50000", "workers": "4"})
    with LocalCluster(4, cfg.plant_config()) as cluster:
        pool = cluster.pool()
        result = harness.train(cfg, pool)
        pool.close()
    assert result.frames <= 50_000
    assert np.mean(result.episode_rewards[-10:]) > result.baseline_reward


def episode(phis, targets, actions, crashed=False, index=0):
    trs = [Transition(np.zeros(5), np.array(a, dtype=float), 0.0, np.zeros(5), False, False) for a in actions]
    return Episode(index, trs, [np.zeros(1)] * len(trs), list(phis), list(targets), crashed)


def test_eval_report_stub_examples():
    perfect = episode([50.0] * 200, [50.0] * 200, [[0.0]] * 200, index=0)
    constant = episode([0.0] * 200, [50.0] * 200, [[0.0]] * 200, index=1)
    crashed = episode([40.0] * 5, [50.0] * 5, [[1.0]] * 5, crashed=True, index=2)
    report = EvalReport.from_episodes([perfect, constant, crashed])
    assert report.indices == [0, 1] and report.crashed == [2]
    assert report.rmse[0] == report.mae[0] == 0.0
    assert report.rmse[1] == report.mae[1] == 50.0
    assert report.summary()["crashed"] == 1 and report.summary()["trajectories"] == 3
    assert report.saturation_fraction == pytest.approx(5 / 405)


def test_eval_report_csv(tmp_path):
    report = EvalReport.from_episodes([episode([1.0, 3.0], [0.0, 0.0], [[0.0]] * 2), episode([0.0], [0.0], [[0.0]], True, 1)])
    per, summary = report.write(tmp_path / "eval.csv")
    assert rows(per) == [{"trajectory": "0", "rmse": repr(float(np.sqrt(5.0))), "mae": "2.0", "crashed": "0"}, {"trajectory": "1", "rmse": "", "mae": "", "crashed": "1"}]
    assert {r["metric"] for r in rows(summary)} >= {"mae_mean", "rmse_median", "crashed", "saturation_fraction"}


def test_tracking_metrics_power_mean_inequality():
    rng = np.random.default_rng(0)
    for _ in range(100):
        err = rng.normal(0, 5, 50)
        rmse, mae = tracking_metrics(err, np.zeros(50))
        assert rmse >= mae >= 0


def test_evaluation_and_trace_from_checkpoint(tmp_path):
    cfg = small_cfg(tmp_path, frames=1000, n_muscles=4, ppo_hidden="16", test_count=3)
    pool = WorkerPool.local(cfg.plant_config(), 2)
    result = harness.train(cfg, pool)
    policy, meta = harness.load_policy(result.checkpoint, 4)
    assert meta["agent"] == "ppo" and meta["frames"] == str(result.frames)
    report = harness.evaluate(pool, policy, cfg.reward_params(), count=3)
    assert len(report.indices) + len(report.crashed) == 3
    assert np.all(report.rmse >= report.mae)
    traj = from_waypoints([30.0, 80.0, 50.0])
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    ep = harness.emit_trace(policy, cfg.plant_config(), traj, a, cfg.reward_params())
    harness.emit_trace(policy, cfg.plant_config(), traj, b, cfg.reward_params())
    assert a.read_bytes() == b.read_bytes()
    lines = a.read_text().splitlines()
    assert lines[0].startswith("t,phi,phi_hat,Omega_ssp")
    if not ep.crashed:
        assert len(lines) - 1 == round(traj.duration / 0.1)
    with pytest.raises(CheckpointError):
        harness.load_policy(result.checkpoint, 1)


def test_dql_checkpoint_policy_is_greedy(tmp_path):
    cfg = small_cfg(tmp_path, agent="dql", frames=0, dql_hidden="8")
    result = harness.train(cfg, WorkerPool.local(cfg.plant_config(), 1))
    policy, meta = harness.load_policy(result.checkpoint)
    obs = np.array([[40.0, 0.0, 41.0, 5.0, 0.3]])
    q = result.agent.online.forward(np.array([[40 / 90, 0.0, 41 / 90, 5 / 90, 0.3]]))[0]
    actions, _ = policy(obs, [np.random.default_rng(0)])
    from shoulder_drl.dql import ACTIONS

    assert actions[0, 0] == ACTIONS[int(np.argmax(q))]
    assert meta["agent"] == "dql"


def test_missing_sidecar(tmp_path):
    net = nn.Mlp([5, 2], rng=0)
    nn.save(tmp_path / "x.bin", net)
    with pytest.raises(CheckpointError):
        harness.load_policy(tmp_path / "x.bin")


def test_reward_params_reach_rollouts():
    assert RunConfig.from_kv({"crash_penalty": "-500"}).reward_params() == RewardParams(crash_penalty=-500.0, tracking_only=True)
