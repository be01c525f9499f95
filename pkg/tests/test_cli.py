import csv
import socket
import subprocess
import sys

import pytest

from shoulder_drl.cli import EXIT_CONFIG, EXIT_OK, EXIT_WORKERS, main


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_gen_testset(tmp_path):
    out = tmp_path / "ts.csv"
    assert main(["gen-testset", "--count", "3", "--out", str(out)]) == EXIT_OK
    with out.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 201
    assert {r["trajectory"] for r in rows} == {"0", "1", "2"}
    assert (tmp_path / "ts_waypoints.csv").exists()


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--set", "bogus=1"],
        ["train", "--agent", "dql", "--muscles", "4"],
        ["train", "--set", "frames"],
        ["train", "--config", "/nonexistent.cfg"],
        ["evaluate", "--checkpoint", "/nonexistent.bin"],
        ["train", "--no-such-flag"],
    ],
)
def test_config_errors_exit_one(argv):
    try:
        code = main(argv)
    except SystemExit as exc:  # argparse usage errors
        code = exc.code
    assert code == EXIT_CONFIG


def test_unreachable_workers_exit_two(tmp_path):
    code = main(["train", "--frames", "100", "--out", str(tmp_path), "--connect", f"127.0.0.1:{free_port()}"])
    assert code == EXIT_WORKERS


def test_train_evaluate_trace_round_trip(tmp_path):
    out = tmp_path / "runs"
    assert main(["train", "--in-process", "--frames", "1000", "--out", str(out), "--experiment", "e",
                 "--set", "ppo_hidden=8", "--set", "ppo_rollout_frames=500", "--workers", "2", "--plot"]) == EXIT_OK
    run = out / "e"
    assert (run / "checkpoint.bin").exists() and (run / "training.png").stat().st_size > 0
    ckpt = str(run / "checkpoint.bin")
    report = tmp_path / "eval.csv"
    assert main(["evaluate", "--in-process", "--checkpoint", ckpt, "--count", "2", "--report", str(report), "--plot"]) == EXIT_OK
    assert report.exists() and report.with_suffix(".png").exists()
    trace = tmp_path / "trace.csv"
    assert main(["trace", "--checkpoint", ckpt, "--waypoints", "30,70", "--trace", str(trace), "--plot"]) == EXIT_OK
    assert len(trace.read_text().splitlines()) == 51
    assert trace.with_suffix(".png").exists()
    assert main(["evaluate", "--in-process", "--checkpoint", ckpt, "--set", "n_muscles=4"]) == EXIT_CONFIG


def test_serve_env_announces_its_address():
    proc = subprocess.Popen([sys.executable, "-m", "shoulder_drl.cli", "serve-env", "--listen", "127.0.0.1:0", "--muscles", "1"],
                            stdout=subprocess.PIPE, text=True)
    try:
        line = proc.stdout.readline().split()
        assert line[0] == "LISTENING"
        from shoulder_drl.distrib.pool import RemoteEndpoint

        ep = RemoteEndpoint(line[1], timeout=5)
        assert ep.n_muscles == 1
        ep.shutdown()
        assert proc.wait(10) == 0
    finally:
        proc.kill()
        proc.stdout.close()
