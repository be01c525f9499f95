import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from shoulder_drl.plant import (
    Crashed,
    JointState,
    MuscleParams,
    PlantConfig,
    equilibrium_activations,
    is_equilibrium_reachable,
    mechanical_energy,
    reference_config,
    step,
)

REF = reference_config()
ABDUCTORS = [i for i, m in enumerate(REF.muscles) if m.sign > 0]


def test_reference_config_values():
    # Invented surrogate constants, frozen in data/reference_plant.cfg.
    assert REF.muscle_names == ("ssp", "isp", "dmi", "ld")
    assert (REF.inertia, REF.mass_arm_term, REF.damping, REF.dt) == (0.12, 8.0, 0.4, 0.1)
    assert REF.crash_angle_bounds == (-20.0, 190.0)
    assert REF.crash_speed_bound == 600.0
    ld = REF.muscles[3]
    assert ld.sign == -1 and ld.torque_scale == 10.0 and ld.arm_coeffs == (0.7, -0.2)


def test_config_round_trip(tmp_path):
    path = tmp_path / "plant.cfg"
    REF.save(path)
    assert PlantConfig.load(path) == REF


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "plant.cfg"
    REF.save(path)
    path.write_text(path.read_text() + "bogus = 1\n")
    with pytest.raises(ValueError, match="bogus"):
        PlantConfig.load(path)


@pytest.mark.parametrize(
    "kwargs",
    [dict(torque_scale=0.0), dict(arm_coeffs=(1.5, 0.6)), dict(sign=0), dict(name="biceps")],
)
def test_muscle_params_invariants(kwargs):
    base = dict(name="ssp", torque_scale=1.0, arm_coeffs=(1.0, 0.5), sign=1)
    with pytest.raises(ValueError):
        MuscleParams(**{**base, **kwargs})


def test_plant_config_invariants():
    muscles = REF.muscles
    for bad in [dict(dt=0.0), dict(inertia=-1.0), dict(damping=-0.1), dict(crash_angle_bounds=(10.0, 10.0))]:
        with pytest.raises(ValueError):
            PlantConfig(muscles=muscles, **bad)


def test_hanging_equilibrium_is_fixed_point():
    assert step(JointState(0.0, 0.0), [0, 0, 0, 0], REF) == JointState(0.0, 0.0)


def test_gravity_adducts_at_90():
    nxt = step(JointState(90.0, 0.0), [0, 0, 0, 0], REF)
    assert nxt.phi_dot < 0


def test_one_step_hand_calculation():
    # tau = 12*(1 + 0.6 cos 30deg)*0.5 - 8 sin 30deg; implicit damping divides by
    # 1 + dt*b/I. Evaluated at 30 digits with mpmath and frozen here.
    nxt = step(JointState(30.0, 0.0), [0.5, 0.0, 0.0, 0.0], REF)
    assert nxt.phi == pytest.approx(48.3263825714265791, abs=1e-9)
    assert nxt.phi_dot == pytest.approx(183.263825714265791, abs=1e-9)


def test_step_rejects_bad_activations():
    with pytest.raises(ValueError):
        step(JointState(0.0, 0.0), [1.2, 0, 0, 0], REF)
    with pytest.raises(ValueError):
        step(JointState(0.0, 0.0), [0.1, 0.1], REF)


def test_crash_on_bounds_and_non_finite():
    assert isinstance(step(JointState(189.9, 590.0), [0, 0, 0, 0], REF), Crashed)
    assert isinstance(step(JointState(-19.0, -500.0), [0, 0, 0, 0], REF), Crashed)
    assert isinstance(step(JointState(math.nan, 0.0), [0, 0, 0, 0], REF), Crashed)
    assert isinstance(step(JointState(10.0, math.inf), [0, 0, 0, 0], REF), Crashed)


def test_determinism():
    s = JointState(42.0, -13.0)
    acts = [0.3, 0.2, 0.7, 0.1]
    a, b = step(s, acts, REF), step(s, acts, REF)
    assert a.phi.hex() == b.phi.hex() and a.phi_dot.hex() == b.phi_dot.hex()


def lp_reachable(target, cfg):
    """Independent oracle: LP feasibility of zero net torque over the activation box."""
    k = [m.torque_per_activation(target) for m in cfg.muscles]
    need = cfg.mass_arm_term * math.sin(math.radians(target))
    res = linprog(np.zeros(len(k)), A_eq=[k], b_eq=[need], bounds=[(0, 1)] * len(k), method="highs")
    return res.status == 0


def test_equilibrium_reachability_examples():
    assert is_equilibrium_reachable(0.0, REF)
    assert is_equilibrium_reachable(100.0, REF)
    assert lp_reachable(100.0, REF)
    weak = PlantConfig(
        muscles=tuple(
            MuscleParams(m.name, 1e-12 if m.sign > 0 else m.torque_scale, m.arm_coeffs, m.sign) for m in REF.muscles
        )
    )
    assert not is_equilibrium_reachable(175.0, weak)


@pytest.mark.parametrize("n", [1, 2, 4])
def test_reachability_matches_lp_oracle(n):
    cfg = REF.first(n)
    for target in np.linspace(-20, 190, 211):
        assert is_equilibrium_reachable(float(target), cfg) == lp_reachable(float(target), cfg), target


def test_reachability_rejects_out_of_bounds():
    with pytest.raises(ValueError):
        is_equilibrium_reachable(200.0, REF)


@pytest.mark.parametrize("n", [1, 4])
def test_equilibrium_activations_hold_the_arm(n):
    cfg = REF.first(n)
    for phi in np.linspace(20, 100, 17):
        acts = equilibrium_activations(float(phi), cfg)
        assert np.all((0 <= acts) & (acts <= 1))
        nxt = step(JointState(float(phi), 0.0), acts, cfg)
        assert nxt.phi == pytest.approx(phi, abs=1e-9)


def test_single_muscle_holds_test_range():
    ssp = REF.first(1)
    for phi in np.linspace(20, 100, 81):
        assert is_equilibrium_reachable(float(phi), ssp)


angles = st.floats(-20.0, 190.0)
speeds = st.floats(-200.0, 200.0)


@settings(max_examples=2000, deadline=None)
@given(angles, speeds)
def test_energy_non_increasing_unactuated(phi, phi_dot):
    s = JointState(phi, phi_dot)
    nxt = step(s, [0, 0, 0, 0], REF)
    if isinstance(nxt, Crashed):
        return
    assert mechanical_energy(nxt, REF) <= mechanical_energy(s, REF) + 1e-12


@settings(max_examples=500, deadline=None)
@given(st.floats(0.5, 89.5), speeds, st.sampled_from(ABDUCTORS), st.floats(0.0, 0.99), st.floats(0.001, 1.0))
def test_monotone_actuation(phi, phi_dot, muscle, low, bump):
    acts = np.zeros(4)
    acts[muscle] = low
    hi = acts.copy()
    hi[muscle] = min(1.0, low + bump)
    a = step(JointState(phi, phi_dot), acts, REF)
    b = step(JointState(phi, phi_dot), hi, REF)
    if isinstance(a, Crashed) or isinstance(b, Crashed):
        return
    assert b.phi_dot > a.phi_dot


@settings(max_examples=500, deadline=None)
@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6), st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_step_never_returns_non_finite(phi, phi_dot, acts):
    nxt = step(JointState(phi, phi_dot), acts, REF)
    if not isinstance(nxt, Crashed):
        assert math.isfinite(nxt.phi) and math.isfinite(nxt.phi_dot)
