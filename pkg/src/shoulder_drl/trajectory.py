"""Random reference motions built from rest-to-rest quintic sections."""

from __future__ import annotations

import bisect
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

TRAIN_RANGE = (30.0, 90.0)
TEST_RANGE = (20.0, 100.0)
SECTION_T = 5.0
TEST_SET_SEED = 20200522
TEST_SET_SIZE = 100
TEST_TRAJ_T = 20.0


@dataclass(frozen=True)
class QuinticSection:
    coeffs: tuple[float, float, float, float, float, float]
    duration: float

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError("section duration must be > 0")

    def position(self, t: float) -> float:
        a0, a1, a2, a3, a4, a5 = self.coeffs
        return a0 + t * (a1 + t * (a2 + t * (a3 + t * (a4 + t * a5))))

    def velocity(self, t: float) -> float:
        _, a1, a2, a3, a4, a5 = self.coeffs
        return a1 + t * (2 * a2 + t * (3 * a3 + t * (4 * a4 + t * 5 * a5)))

    def acceleration(self, t: float) -> float:
        _, _, a2, a3, a4, a5 = self.coeffs
        return 2 * a2 + t * (6 * a3 + t * (12 * a4 + t * 20 * a5))


def fit_section(p0: float, p1: float, T: float) -> QuinticSection:
    """Quintic from ``p0`` to ``p1`` over ``T`` seconds, at rest at both ends."""
    if not T > 0:
        raise ValueError(f"section duration must be > 0, got {T}")
    delta = p1 - p0
    coeffs = (float(p0), 0.0, 0.0, 10 * delta / T**3, -15 * delta / T**4, 6 * delta / T**5)
    return QuinticSection(coeffs, float(T))


class Trajectory:
    """Sections played back to back; immutable after construction."""

    def __init__(self, sections: Sequence[QuinticSection]):
        if not sections:
            raise ValueError("trajectory needs at least one section")
        self.sections = tuple(sections)
        self._starts = [0.0]
        for s in self.sections:
            self._starts.append(self._starts[-1] + s.duration)

    @property
    def duration(self) -> float:
        return self._starts[-1]

    @property
    def waypoints(self) -> list[float]:
        pts = [s.coeffs[0] for s in self.sections]
        last = self.sections[-1]
        pts.append(last.position(last.duration))
        return pts

    def locate(self, t: float) -> tuple[QuinticSection, float]:
        if not 0.0 <= t <= self.duration + 1e-9:
            raise ValueError(f"t={t} outside [0, {self.duration}]")
        k = min(bisect.bisect_right(self._starts, t) - 1, len(self.sections) - 1)
        return self.sections[k], min(t - self._starts[k], self.sections[k].duration)

    def sample(self, t: float) -> tuple[float, float]:
        section, local = self.locate(t)
        return section.position(local), section.velocity(local)

    def sample_grid(self, dt: float) -> np.ndarray:
        """Rows of (t, phi_hat, phi_dot_hat) at ``dt`` resolution, both ends included."""
        n = int(round(self.duration / dt))
        rows = []
        for k in range(n + 1):
            t = k * dt
            rows.append((t, *self.sample(min(t, self.duration))))
        return np.array(rows)

    def to_csv(self, path: str | Path, dt: float = 0.1) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "phi_hat", "phi_dot_hat"])
            for t, p, v in self.sample_grid(dt):
                w.writerow([repr(float(t)), repr(float(p)), repr(float(v))])


def from_waypoints(points: Sequence[float], section_T: float = SECTION_T) -> Trajectory:
    return Trajectory([fit_section(a, b, section_T) for a, b in zip(points[:-1], points[1:])])


def random_trajectory(
    rng_seed,
    total_T: float = 10.0,
    section_T: float = SECTION_T,
    range_: tuple[float, float] = TRAIN_RANGE,
) -> Trajectory:
    n = total_T / section_T
    if not total_T > 0 or abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise ValueError("total_T must be a positive multiple of section_T")
    rng = np.random.default_rng(rng_seed)
    lo, hi = range_
    points = rng.uniform(lo, hi, size=int(round(n)) + 1)
    return from_waypoints([float(p) for p in points], section_T)


def frozen_test_set(seed: int = TEST_SET_SEED, count: int = TEST_SET_SIZE, total_T: float = TEST_TRAJ_T) -> list[Trajectory]:
    """The frozen evaluation set: every agent is scored on these targets."""
    return [random_trajectory([seed, k], total_T, SECTION_T, TEST_RANGE) for k in range(count)]

