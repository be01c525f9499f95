"""PNG figures rendered from the run CSVs (training curve, error boxplot, trace)."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _columns(path: str | Path) -> dict[str, list[str]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {key: [r[key] for r in rows] for key in rows[0]}


def _floats(values) -> list[float]:
    return [float(v) if v != "" else float("nan") for v in values]


def training_curve(episodes_csv: str | Path, out_png: str | Path, window: int = 10) -> Path:
    """Episode reward and its trailing mean over training frames; crashes marked."""
    cols = _columns(episodes_csv)
    fig, ax = plt.subplots(figsize=(8, 4))
    if cols:
        frames, rewards = _floats(cols["frames"]), _floats(cols["reward"])
        trailing = [sum(rewards[max(0, i - window + 1) : i + 1]) / min(i + 1, window) for i in range(len(rewards))]
        ax.plot(frames, rewards, lw=0.5, alpha=0.4, label="episode reward")
        ax.plot(frames, trailing, lw=1.5, label=f"mean of last {window}")
        crash_x = [f for f, c in zip(frames, cols["crashed"]) if c == "1"]
        crash_y = [r for r, c in zip(rewards, cols["crashed"]) if c == "1"]
        if crash_x:
            ax.scatter(crash_x, crash_y, s=8, c="red", label="crashed")
        ax.legend(loc="lower right")
    ax.set_xlabel("frames")
    ax.set_ylabel("episode reward")
    return _save(fig, out_png)


def error_boxplot(report_csv: str | Path, out_png: str | Path) -> Path:
    cols = _columns(report_csv)
    fig, ax = plt.subplots(figsize=(4, 4))
    if cols:
        kept = [i for i, c in enumerate(cols["crashed"]) if c == "0"]
        data = [[float(cols[k][i]) for i in kept] for k in ("rmse", "mae")]
        ax.boxplot(data)
        ax.set_xticks([1, 2], ["RMSE", "MAE"])
    ax.set_ylabel("tracking error (deg)")
    return _save(fig, out_png)


def trace_figure(trace_csv: str | Path, out_png: str | Path) -> Path:
    """Joint angle against its target, with activations and increments below."""
    cols = _columns(trace_csv)
    muscles = [k[len("Omega_") :] for k in cols if k.startswith("Omega_")]
    fig, (top, mid, bottom) = plt.subplots(3, 1, sharex=True, figsize=(8, 7))
    t = _floats(cols.get("t", []))
    top.plot(t, _floats(cols.get("phi_hat", [])), "k--", label="target")
    top.plot(t, _floats(cols.get("phi", [])), label="joint")
    top.set_ylabel("angle (deg)")
    top.legend(loc="upper right")
    for m in muscles:
        mid.plot(t, _floats(cols[f"Omega_{m}"]), label=m)
        bottom.plot(t, _floats(cols[f"omega_{m}"]), lw=0.8, label=m)
    mid.set_ylabel("activation")
    mid.legend(loc="upper right", ncol=max(1, len(muscles)))
    bottom.set_ylabel("increment (%)")
    bottom.set_xlabel("t (s)")
    return _save(fig, out_png)


def _save(fig, out_png) -> Path:
    out = Path(out_png)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
