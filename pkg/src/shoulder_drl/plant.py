"""Lumped single-axis shoulder abduction plant.

The humerus is a damped physical pendulum hanging from the glenohumeral
joint, driven by muscle torques ``sign * torque_scale * d(phi) * activation``
with an angle-dependent moment arm ``d(phi) = c0 + c1 * cos(phi)``.

Angles cross this module's boundary in degrees; trig and dynamics use
radians internally.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kvfile

MUSCLE_NAMES = ("ssp", "isp", "dmi", "ld")


@dataclass(frozen=True)
class MuscleParams:
    name: str
    torque_scale: float
    arm_coeffs: tuple[float, float]
    sign: int

    def __post_init__(self):
        if self.name not in MUSCLE_NAMES:
            raise ValueError(f"unknown muscle {self.name!r}")
        if not self.torque_scale > 0:
            raise ValueError(f"{self.name}: torque_scale must be > 0")
        if self.sign not in (1, -1):
            raise ValueError(f"{self.name}: sign must be +1 or -1")
        c0, c1 = self.arm_coeffs
        # cos(phi) spans [-1, 1] over [0, 180] deg, so the extremes are c0 +- c1.
        if max(abs(c0 + c1), abs(c0 - c1)) > 2.0:
            raise ValueError(f"{self.name}: |d(phi)| exceeds 2 on [0, 180] deg")

    def moment_arm(self, phi: float) -> float:
        c0, c1 = self.arm_coeffs
        return c0 + c1 * math.cos(math.radians(phi))

    def torque_per_activation(self, phi: float) -> float:
        """Signed joint torque (N*m) produced at full activation."""
        return self.sign * self.torque_scale * self.moment_arm(phi)


@dataclass(frozen=True)
class JointState:
    phi: float
    phi_dot: float


@dataclass(frozen=True)
class Crashed:
    """Terminal plant outcome; the learner turns it into a penalty."""

    reason: str = "numerical failure"


@dataclass(frozen=True)
class PlantConfig:
    muscles: tuple[MuscleParams, ...]
    inertia: float = 0.12
    mass_arm_term: float = 8.0
    damping: float = 0.4
    dt: float = 0.1
    crash_angle_bounds: tuple[float, float] = (-20.0, 190.0)
    crash_speed_bound: float = 600.0

    def __post_init__(self):
        if not self.muscles:
            raise ValueError("plant needs at least one muscle")
        if not self.dt > 0:
            raise ValueError("dt must be > 0")
        if not self.inertia > 0:
            raise ValueError("inertia must be > 0")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        lo, hi = self.crash_angle_bounds
        if not lo < hi:
            raise ValueError("crash_angle_bounds must satisfy low < high")
        if not self.crash_speed_bound > 0:
            raise ValueError("crash_speed_bound must be > 0")

    @property
    def n_muscles(self) -> int:
        return len(self.muscles)

    @property
    def muscle_names(self) -> tuple[str, ...]:
        return tuple(m.name for m in self.muscles)

    def subset(self, names: Sequence[str]) -> "PlantConfig":
        by_name = {m.name: m for m in self.muscles}
        try:
            muscles = tuple(by_name[n] for n in names)
        except KeyError as exc:
            raise ValueError(f"muscle {exc.args[0]!r} not in plant") from None
        return replace(self, muscles=muscles)

    def first(self, n: int) -> "PlantConfig":
        """Plant restricted to the first ``n`` muscles (n=1 is ssp alone)."""
        if not 1 <= n <= self.n_muscles:
            raise ValueError(f"n_muscles must be in [1, {self.n_muscles}], got {n}")
        return self.subset(self.muscle_names[:n])

    def to_kv(self) -> dict[str, object]:
        out: dict[str, object] = {"muscles": self.muscle_names}
        for m in self.muscles:
            out[f"{m.name}.torque_scale"] = float(m.torque_scale)
            out[f"{m.name}.arm_coeffs"] = tuple(float(c) for c in m.arm_coeffs)
            out[f"{m.name}.sign"] = m.sign
        out.update(
            inertia=float(self.inertia),
            mass_arm_term=float(self.mass_arm_term),
            damping=float(self.damping),
            dt=float(self.dt),
            crash_angle_bounds=tuple(float(b) for b in self.crash_angle_bounds),
            crash_speed_bound=float(self.crash_speed_bound),
        )
        return out

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "PlantConfig":
        kv = dict(kv)
        try:
            names = [n.strip() for n in kv.pop("muscles").split(",") if n.strip()]
            muscles = []
            for n in names:
                c0, c1 = kvfile.floats(kv.pop(f"{n}.arm_coeffs"))
                muscles.append(
                    MuscleParams(
                        name=n,
                        torque_scale=float(kv.pop(f"{n}.torque_scale")),
                        arm_coeffs=(c0, c1),
                        sign=int(kv.pop(f"{n}.sign")),
                    )
                )
            lo, hi = kvfile.floats(kv.pop("crash_angle_bounds"))
            cfg = cls(
                muscles=tuple(muscles),
                inertia=float(kv.pop("inertia")),
                mass_arm_term=float(kv.pop("mass_arm_term")),
                damping=float(kv.pop("damping")),
                dt=float(kv.pop("dt")),
                crash_angle_bounds=(lo, hi),
                crash_speed_bound=float(kv.pop("crash_speed_bound")),
            )
        except KeyError as exc:
            raise kvfile.ConfigError(f"plant config missing key {exc.args[0]!r}") from None
        if kv:
            raise kvfile.ConfigError(f"unknown plant config keys: {sorted(kv)}")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PlantConfig":
        return cls.from_kv(kvfile.load(path))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(kvfile.dump(self.to_kv()))


def reference_config() -> PlantConfig:
    text = resources.files("shoulder_drl.data").joinpath("reference_plant.cfg").read_text()
    return PlantConfig.from_kv(kvfile.parse(text, "reference_plant.cfg"))


def check_activations(acts: Sequence[float], n: int) -> None:
    if len(acts) != n:
        raise ValueError(f"expected {n} activations, got {len(acts)}")
    for a in acts:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"activation {a!r} outside [0, 1]")


def muscle_torque(phi: float, acts: Sequence[float], cfg: PlantConfig) -> float:
    return sum(m.torque_per_activation(phi) * float(a) for m, a in zip(cfg.muscles, acts))


def gravity_torque(phi: float, cfg: PlantConfig) -> float:
    """Adducting torque of the arm's weight, positive when it pulls phi down."""
    return cfg.mass_arm_term * math.sin(math.radians(phi))


def step(state: JointState, acts: Sequence[float], cfg: PlantConfig) -> JointState | Crashed:
    """Advance the joint by one ``cfg.dt`` step.

    Semi-implicit Euler: velocity first, then position from the new
    velocity. The damping term is taken at the new velocity, which keeps
    the unactuated arm's mechanical energy non-increasing at 100 ms steps.
    """
    check_activations(acts, cfg.n_muscles)
    phi = math.radians(state.phi)
    omega = math.radians(state.phi_dot)
    dt, inertia = cfg.dt, cfg.inertia
    drive = muscle_torque(state.phi, acts, cfg) - cfg.mass_arm_term * math.sin(phi)
    omega = (omega + dt * drive / inertia) / (1.0 + dt * cfg.damping / inertia)
    phi = phi + dt * omega
    new = JointState(math.degrees(phi), math.degrees(omega))
    if not (math.isfinite(new.phi) and math.isfinite(new.phi_dot)):
        return Crashed("non-finite state")
    lo, hi = cfg.crash_angle_bounds
    if not lo <= new.phi <= hi:
        return Crashed(f"angle {new.phi:.3f} deg outside [{lo}, {hi}]")
    if abs(new.phi_dot) > cfg.crash_speed_bound:
        return Crashed(f"speed {new.phi_dot:.3f} deg/s exceeds {cfg.crash_speed_bound}")
    return new


def mechanical_energy(state: JointState, cfg: PlantConfig) -> float:
    omega = math.radians(state.phi_dot)
    return 0.5 * cfg.inertia * omega**2 + cfg.mass_arm_term * (1.0 - math.cos(math.radians(state.phi)))


def is_equilibrium_reachable(target_phi: float, cfg: PlantConfig) -> bool:
    lo, hi = cfg.crash_angle_bounds
    if not lo <= target_phi <= hi:
        raise ValueError(f"target {target_phi} deg outside crash bounds [{lo}, {hi}]")
    per_unit = [m.torque_per_activation(target_phi) for m in cfg.muscles]
    # Net muscle torque over the activation box spans [sum of negatives, sum of positives].
    lowest = sum(min(0.0, k) for k in per_unit)
    highest = sum(max(0.0, k) for k in per_unit)
    need = gravity_torque(target_phi, cfg)
    return lowest <= need <= highest


def equilibrium_activations(phi: float, cfg: PlantConfig) -> np.ndarray:
    """Activations that statically hold ``phi``, used as the episode start.

    Every muscle that abducts at ``phi`` gets the same level; adductors
    stay off. The level saturates at 1 when the angle cannot be held.
    """
    per_unit = np.array([m.torque_per_activation(phi) for m in cfg.muscles])
    lifting = per_unit > 0
    need = gravity_torque(phi, cfg)
    acts = np.zeros(cfg.n_muscles)
    if need > 0 and lifting.any():
        acts[lifting] = min(1.0, need / per_unit[lifting].sum())
    return acts
