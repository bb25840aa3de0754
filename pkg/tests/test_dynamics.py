import math

import numpy as np
import pytest

from nanoarray.analysis import detect_torsion, estimate_psd, fit_lorentzian
from nanoarray.dynamics import (CHANNELS, ParticleState, calibrate_drive_coefficient, max_stable_dt,
                                mechanical_energy, simulate, spin_up, step, terminal_rotation)
from nanoarray.errors import DomainError, StepSizeError, UnboundedSpinError, ZeroTorqueError
from nanoarray.gas import GasEnvironment
from nanoarray.optics import (DRIVE_COEFFICIENT, EllipsoidGeometry, Polarization, TrapArray,
                              find_equilibrium, make_site, trap_frequencies)

from conftest import RADIUS

VACUUM = GasEnvironment(0.0)


def tilted(theta=0.05):
    return np.array([math.cos(theta / 2), 0.0, 0.0, math.sin(theta / 2)])


def test_mass_follows_geometry(spheroid):
    s = ParticleState.at_rest(spheroid)
    assert s.mass == pytest.approx(spheroid.density * 4 / 3 * math.pi * spheroid.r1 * spheroid.r2 * spheroid.r3)
    with pytest.raises(DomainError):
        ParticleState.at_rest(spheroid, orientation=(1, 1, 0, 0))


@pytest.mark.parametrize("shape", ["sphere", "spheroid"])
def test_fixed_point(shape, single, rng):
    g = EllipsoidGeometry.sphere(RADIUS) if shape == "sphere" else EllipsoidGeometry.spheroid(RADIUS, 1.5)
    state = ParticleState.at_equilibrium(single, g)
    dt = 0.5 * max_stable_dt(state, single, VACUUM)
    new = state
    for _ in range(50):
        new = step(new, single, VACUUM, dt, rng, thermal=False)
    scale = single.sites[0].waist_y
    assert np.max(np.abs(new.position - state.position)) < 1e-12 * scale
    assert np.max(np.abs(new.velocity)) < 1e-9
    assert new.orientation == pytest.approx(state.orientation, abs=1e-12)


def test_stability_bound(single, sphere, env, rng):
    state = ParticleState.at_equilibrium(single, sphere)
    limit = max_stable_dt(state, single, env)
    with pytest.raises(StepSizeError):
        step(state, single, env, 1.01 * limit, rng)
    step(state, single, env, 0.99 * limit, rng)
    with pytest.raises(StepSizeError):
        simulate(state, single, env, 1e-4, 3e6, dt=2 * limit)


def test_bit_identical_reruns(single, spheroid, env):
    start = ParticleState.at_equilibrium(single, spheroid)
    a = simulate(start, single, env, 2e-4, 3e6, seed=7)
    b = simulate(start, single, env, 2e-4, 3e6, seed=7)
    c = simulate(start, single, env, 2e-4, 3e6, seed=8)
    for ch in CHANNELS:
        assert np.array_equal(a.channels[ch], b.channels[ch])
    assert not np.array_equal(a.channels["x"], c.channels["x"])


def test_chunking_does_not_change_result(single, sphere, env):
    start = ParticleState.at_equilibrium(single, sphere)
    a = simulate(start, single, env, 3e-4, 3e6, seed=3, chunk_samples=4096)
    b = simulate(start, single, env, 3e-4, 3e6, seed=3, chunk_samples=97)
    # the noise is drawn per chunk, so only the statistics agree; the state layout must match
    assert len(a) == len(b) == 900
    assert a.metadata == b.metadata


def test_empty_trajectory(single, sphere, env):
    traj = simulate(ParticleState.at_equilibrium(single, sphere), single, env, 0.0, 3e6)
    assert len(traj) == 0
    assert traj.metadata["pressure_pa"] == 2000.0 and traj.metadata["sample_rate_hz"] == 3e6


def test_anti_alias_guard(single, sphere, env):
    with pytest.raises(DomainError):
        simulate(ParticleState.at_equilibrium(single, sphere), single, env, 1e-3, 1e5)


def test_memory_cap(single, sphere, env):
    with pytest.raises(DomainError):
        simulate(ParticleState.at_equilibrium(single, sphere), single, env, 1.0, 3e6, max_samples=1000)


@pytest.mark.parametrize("shape", ["sphere", "spheroid"])
def test_energy_conservation(shape, single):
    """No drag, no noise: energy above the minimum is conserved over 1e6 steps."""
    g = EllipsoidGeometry.sphere(RADIUS) if shape == "sphere" else EllipsoidGeometry.spheroid(RADIUS, 1.5)
    eq = find_equilibrium(single, g)
    start = ParticleState.at_rest(g, eq + np.array([20e-9, -15e-9, 30e-9]), tilted(0.1))
    start.angular_velocity = np.array([0.0, 0.0, 2e5])
    ground = mechanical_energy(ParticleState.at_rest(g, eq), single)
    e0 = mechanical_energy(start, single) - ground
    # at omega dt = 2.5e-3 the bounded O(dt^2) energy oscillation of the
    # splitting is below 1e-6, so any excess would be secular drift
    per_sample = 20
    dt = 0.05 * max_stable_dt(start, single, VACUUM)
    rate = 1.0 / (per_sample * dt)
    traj = simulate(start, single, VACUUM, 1e6 / per_sample / rate, rate, dt=dt, thermal=False)
    assert traj.metadata["dt_s"] == pytest.approx(dt)
    q = traj.final_state.orientation
    assert abs(np.linalg.norm(q) - 1) < 1e-9
    e1 = mechanical_energy(traj.final_state, single) - ground
    assert abs(e1 - e0) / e0 < 1e-6


def test_quaternion_norm_per_step(single, spheroid, env, rng):
    state = ParticleState.at_rest(spheroid, find_equilibrium(single, spheroid), tilted(0.3))
    dt = 0.5 * max_stable_dt(state, single, env)
    for _ in range(200):
        state = step(state, single, env, dt, rng)
        assert abs(np.linalg.norm(state.orientation) - 1) < 1e-9


def test_escape_is_reported(single, sphere, env):
    start = ParticleState.at_equilibrium(single, sphere)
    start.velocity = np.array([0.0, 0.0, 400.0])  # far above the trap depth
    traj = simulate(start, single, env, 1e-3, 3e6, seed=0)
    assert traj.metadata["lost_at_s"] is not None
    assert len(traj) < 3000


def test_x_spectrum_matches_trap_frequency(single, sphere, env):
    traj = simulate(ParticleState.at_equilibrium(single, sphere), single, env, 0.02, 2.5e6, seed=11)
    fit = fit_lorentzian(estimate_psd(traj, "x"))
    expect = trap_frequencies(single.sites[0], sphere)[0] / (2 * math.pi)
    assert fit.center_frequency == pytest.approx(expect, rel=0.01)


def test_torsion_only_for_anisotropic(single, sphere, spheroid, env):
    s = simulate(ParticleState.at_equilibrium(single, sphere), single, env, 0.005, 3e6, seed=1)
    e = simulate(ParticleState.at_equilibrium(single, spheroid), single, env, 0.005, 3e6, seed=1)
    assert np.all(s.channels["torsion"] == 0)
    assert detect_torsion(s) is None
    assert detect_torsion(e) is not None


def test_torsion_frequency_scales_with_sqrt_power(spheroid, env):
    freqs = []
    for power in (0.2, 0.4):
        arr = TrapArray.grid(1, 1, power=power)
        traj = simulate(ParticleState.at_equilibrium(arr, spheroid), arr, env, 0.006, 5e6, seed=2)
        freqs.append(detect_torsion(traj).center_frequency)
    assert freqs[1] / freqs[0] == pytest.approx(math.sqrt(2), rel=0.02)


def circular_site():
    return make_site((0, 0, 0), 0.2, Polarization.CIRCULAR)


def test_terminal_rotation_law():
    d = EllipsoidGeometry.dumbbell(RADIUS)
    w1 = terminal_rotation(d, circular_site(), GasEnvironment(0.06))
    w2 = terminal_rotation(d, circular_site(), GasEnvironment(0.03))
    assert w2 / w1 == pytest.approx(2.0, rel=1e-12)
    assert w1 / (2 * math.pi) == pytest.approx(1.75e9, rel=0.1)


def test_rotation_errors(sphere):
    with pytest.raises(ZeroTorqueError):
        terminal_rotation(sphere, circular_site(), GasEnvironment(1.0))
    with pytest.raises(UnboundedSpinError):
        terminal_rotation(EllipsoidGeometry.dumbbell(RADIUS), circular_site(), GasEnvironment(0.0))


def test_calibration_constant_reproduces():
    assert calibrate_drive_coefficient() == pytest.approx(DRIVE_COEFFICIENT, rel=1e-9)


def test_spin_up_converges():
    d = EllipsoidGeometry.dumbbell(RADIUS)
    env = GasEnvironment(0.06)
    closed = terminal_rotation(d, circular_site(), env)
    from nanoarray.gas import rotational_damping_rates
    tau = 1 / rotational_damping_rates(d, env)[2]
    t, w = spin_up(d, circular_site(), env, 5 * tau, 2000, seed=0)
    assert t[-1] == pytest.approx(5 * tau)
    assert w[-1] == pytest.approx(closed * (1 - math.exp(-5)), rel=0.01)
    t, w = spin_up(d, circular_site(), env, 10 * tau, 2000, seed=0)
    assert w[-1] == pytest.approx(closed, rel=0.01)


def test_driven_rotation_in_integrator():
    """The full integrator spins a dumbbell up to the closed-form rate at elevated pressure."""
    d = EllipsoidGeometry.dumbbell(RADIUS)
    arr = make_site((0, 0, 0), 0.2, Polarization.CIRCULAR).as_array()
    env = GasEnvironment(2000.0)
    closed = terminal_rotation(d, arr.sites[0], env)
    from nanoarray.gas import rotational_damping_rates
    tau = 1 / rotational_damping_rates(d, env)[2]
    start = ParticleState.at_equilibrium(arr, d)
    rate = max(20 * closed / (2 * math.pi), 3e6)
    traj = simulate(start, arr, env, 8 * tau, rate, seed=0, thermal=False)
    assert traj.channels["spin"][-1] == pytest.approx(closed, rel=0.02)
