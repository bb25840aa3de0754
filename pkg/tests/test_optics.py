import math

import numpy as np
import pytest
from scipy.constants import c, epsilon_0

from nanoarray.errors import DomainError, NoTrapError
from nanoarray.optics import (EllipsoidGeometry, Polarization, TrapArray, depolarization_factors, field_sq,
                              find_equilibrium, focal_waist, libration_frequencies, make_site, optical_torque,
                              orientation_energy, potential_hessian, trap_force, trap_frequencies,
                              trap_potential)

from conftest import RADIUS


def rotation_z(theta):
    return np.array([math.cos(theta / 2), 0.0, 0.0, math.sin(theta / 2)])


def test_waist_from_na():
    # lambda / (pi NA) for 1064 nm at NA 0.95
    assert focal_waist(1064e-9, 0.95) == pytest.approx(3.5651e-7, rel=1e-4)
    site = make_site((0, 0, 0), 0.2)
    assert site.waist_x == pytest.approx(1.2 * site.waist_y)
    assert site.rayleigh_range == pytest.approx(math.pi * site.waist_y**2 / 1064e-9)


def test_site_invariants():
    with pytest.raises(DomainError):
        make_site((0, 0, 0), 0.0)
    with pytest.raises(DomainError):
        make_site((0, 0, 0), 0.2, waist_anisotropy=0.9)
    with pytest.raises(DomainError):
        TrapArray.grid(1, 1, na=1.2)


def test_lattice_positions(grid3):
    assert grid3.site(2, 1).focus[:2] == pytest.approx((1.77e-6, 2 * 2.66e-6))
    with pytest.raises(DomainError):
        grid3.site(3, 0)


def test_sphere_polarizability_is_clausius_mossotti():
    g = EllipsoidGeometry.sphere(RADIUS)
    expect = 4 * math.pi * epsilon_0 * RADIUS**3 * (2.1 - 1) / (2.1 + 2)
    assert g.polarizabilities() == pytest.approx(np.full(3, expect), rel=1e-12)


def test_depolarization_factors():
    # sum rule, sphere value, and the closed form for a prolate spheroid
    assert depolarization_factors(1, 1, 1) == pytest.approx(np.full(3, 1 / 3))
    a = 2.0
    e = math.sqrt(1 - 1 / a**2)
    n1 = (1 - e**2) / e**3 * (math.atanh(e) - e)
    n = depolarization_factors(a, 1.0, 1.0)
    assert n.sum() == pytest.approx(1.0, abs=1e-10)
    assert n[0] == pytest.approx(n1, rel=1e-9)
    assert n[1] == pytest.approx(n[2])


def test_mass_and_inertia():
    g = EllipsoidGeometry(120e-9, 80e-9, 60e-9)
    assert g.mass == pytest.approx(1850 * 4 / 3 * math.pi * 120e-9 * 80e-9 * 60e-9)
    assert g.inertia()[2] == pytest.approx(g.mass / 5 * (120e-9**2 + 80e-9**2))
    with pytest.raises(DomainError):
        EllipsoidGeometry(50e-9, 80e-9, 60e-9)


def test_dumbbell_geometry():
    d = EllipsoidGeometry.dumbbell(RADIUS)
    s = EllipsoidGeometry.sphere(RADIUS)
    assert d.mass == pytest.approx(2 * s.mass)
    # parallel-axis theorem for two touching spheres
    assert d.inertia()[1] == pytest.approx(2 * (0.4 * s.mass * RADIUS**2 + s.mass * RADIUS**2))
    a = d.polarizabilities()
    assert a[0] > 2 * s.polarizabilities()[0] > a[1]
    assert not d.is_sphere()


def test_sphericity_predicate():
    assert EllipsoidGeometry(100e-9, 98e-9, 96e-9).is_sphere()
    assert not EllipsoidGeometry.spheroid(RADIUS, 1.3).is_sphere()


def test_focus_is_global_minimum(weightless, sphere):
    u0 = trap_potential((0, 0, 0), weightless, sphere)
    axis = np.linspace(-0.5e-6, 0.5e-6, 11)
    grid = np.stack(np.meshgrid(axis, axis, axis), -1).reshape(-1, 3)
    values = [trap_potential(p, weightless, sphere) for p in grid]
    assert u0 <= min(values)


def test_mirror_symmetry(single, sphere):
    p = np.array([1.3e-7, -0.4e-7, 0.8e-7])
    q = p * np.array([-1, 1, 1])
    assert trap_potential(p, single, sphere) == pytest.approx(trap_potential(q, single, sphere), rel=1e-14)


def test_nine_minima(grid3, sphere):
    """A 3x3 array has one stable equilibrium at every lattice site."""
    found = [find_equilibrium(grid3, sphere, r, c) for r in range(3) for c in range(3)]
    pts = np.array(found)
    assert len({(round(x * 1e8), round(y * 1e8)) for x, y, _ in pts}) == 9
    for (r, c), p in zip([(r, c) for r in range(3) for c in range(3)], pts):
        site = grid3.site(r, c)
        assert np.hypot(*(p[:2] - site.focus[:2])) < 0.05e-6
        assert np.all(np.linalg.eigvalsh(potential_hessian(p, grid3, sphere)) > 0)


def test_force_is_minus_gradient(single, sphere, rng):
    for _ in range(20):
        p = rng.uniform(-3e-7, 3e-7, 3)
        h = 1e-11
        grad = np.array([(trap_potential(p + h * e, single, sphere) - trap_potential(p - h * e, single, sphere))
                         / (2 * h) for e in np.eye(3)])
        assert trap_force(p, single, sphere) == pytest.approx(-grad, rel=1e-5, abs=1e-20)


def test_axial_constant_is_non_gradient(sphere):
    arr = make_site((0, 0, 0), 0.2).as_array(axial_force=1e-15)
    base = make_site((0, 0, 0), 0.2).as_array()
    p = (1e-8, 2e-8, 3e-8)
    assert trap_force(p, arr, sphere) - trap_force(p, base, sphere) == pytest.approx([0, 0, 1e-15])
    assert trap_potential(p, arr, sphere) == trap_potential(p, base, sphere)


def test_force_linear_in_power(sphere, rng):
    a = make_site((0, 0, 0), 0.2).as_array(gravity=0.0)
    b = make_site((0, 0, 0), 0.4).as_array(gravity=0.0)
    for p in rng.uniform(-3e-7, 3e-7, (5, 3)):
        assert trap_force(p, b, sphere) == pytest.approx(2 * trap_force(p, a, sphere), rel=1e-12)


def test_equilibrium_force_below_tolerance(single, sphere):
    eq = find_equilibrium(single, sphere)
    assert np.linalg.norm(trap_force(eq, single, sphere)) < 1e-18
    assert eq[2] < 0  # gravity pulls the particle below the focus


def test_no_trap_when_too_heavy(sphere):
    arr = make_site((0, 0, 0), 1e-6).as_array()
    with pytest.raises(NoTrapError):
        find_equilibrium(arr, sphere)


def test_non_finite_position(single, sphere):
    with pytest.raises(DomainError):
        trap_potential((np.nan, 0, 0), single, sphere)


def test_harmonic_frequencies_closed_form(sphere):
    """Without gravity the stiffnesses are 2 alpha E0^2 / w^2 radially and alpha E0^2 / zR^2 axially."""
    site = make_site((0, 0, 0), 0.2)
    omega = trap_frequencies(site, sphere, gravity=0.0)
    alpha = sphere.polarizabilities()[0]
    e0 = 2 * 0.2 / (math.pi * site.waist_x * site.waist_y) / (c * epsilon_0)
    k = np.array([2 * alpha * e0 / site.waist_x**2, 2 * alpha * e0 / site.waist_y**2,
                  alpha * e0 / site.rayleigh_range**2])
    assert omega == pytest.approx(np.sqrt(k / sphere.mass), rel=1e-9)


def test_frequency_ordering(sphere):
    omega = trap_frequencies(make_site((0, 0, 0), 0.2), sphere)
    assert omega[0] < omega[1]
    circ = trap_frequencies(make_site((0, 0, 0), 0.2, Polarization.CIRCULAR), sphere)
    assert circ[0] == pytest.approx(circ[1], rel=1e-9)


def test_ratio_approaches_one():
    g = EllipsoidGeometry.sphere(RADIUS)
    ratios = [trap_frequencies(make_site((0, 0, 0), 0.2, waist_anisotropy=a), g)[:2] for a in (1.2, 1.05, 1.0)]
    r = [w[0] / w[1] for w in ratios]
    assert r[0] < r[1] < 1.0
    assert r[2] == pytest.approx(1.0, rel=1e-9)


def test_hessian_matches_finite_difference(single, sphere):
    eq = find_equilibrium(single, sphere)
    h = 1e-10
    u0 = trap_potential(eq, single, sphere)
    num = np.array([(trap_potential(eq + h * e, single, sphere) - 2 * u0
                     + trap_potential(eq - h * e, single, sphere)) / h**2 for e in np.eye(3)])
    assert np.diag(potential_hessian(eq, single, sphere)) == pytest.approx(num, rel=1e-6)
    omega = trap_frequencies(single.sites[0], sphere)
    assert omega == pytest.approx(np.sqrt(num / sphere.mass), rel=1e-6)


def test_interior_site_matches_single(grid3, sphere):
    centre = find_equilibrium(grid3, sphere, 1, 1)
    lone = find_equilibrium(grid3.single(1, 1), sphere)
    assert np.linalg.norm(centre - lone) < 0.01 * grid3.site(1, 1).waist_y
    k_arr = np.diag(potential_hessian(centre, grid3, sphere))
    k_one = np.diag(potential_hessian(lone, grid3.single(1, 1), sphere))
    assert k_arr == pytest.approx(k_one, rel=0.01)


@pytest.mark.parametrize("pol", ["linear_x", "circular"])
def test_sphere_has_no_torque(pol, rng):
    site = make_site((0, 0, 0), 0.2, pol)
    g = EllipsoidGeometry.sphere(RADIUS)
    for _ in range(5):
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        assert np.all(optical_torque(q, site, g) == 0.0)


def test_alignment_is_stable(spheroid):
    site = make_site((0, 0, 0), 0.2)
    assert optical_torque((1, 0, 0, 0), site, spheroid) == pytest.approx(np.zeros(3), abs=1e-35)
    for theta in (0.1, -0.1):
        tz = optical_torque(rotation_z(theta), site, spheroid)[2]
        assert np.sign(tz) == -np.sign(theta)


def test_torque_matches_energy_derivative(spheroid):
    site = make_site((0, 0, 0), 0.2)
    theta, h = 0.3, 1e-6
    du = (orientation_energy(rotation_z(theta + h), site, spheroid)
          - orientation_energy(rotation_z(theta - h), site, spheroid)) / (2 * h)
    assert optical_torque(rotation_z(theta), site, spheroid)[2] == pytest.approx(-du, rel=1e-4)


def test_circular_drive_about_beam_axis(spheroid):
    site = make_site((0, 0, 0), 0.2, Polarization.CIRCULAR)
    t1 = optical_torque((1, 0, 0, 0), site, spheroid)
    t2 = optical_torque(rotation_z(1.0), site, spheroid)
    assert t1[2] > 0 and t1[2] == pytest.approx(t2[2], rel=1e-12)
    double = make_site((0, 0, 0), 0.4, Polarization.CIRCULAR)
    assert optical_torque((1, 0, 0, 0), double, spheroid)[2] == pytest.approx(2 * t1[2], rel=1e-12)


def test_unnormalized_quaternion(spheroid):
    with pytest.raises(DomainError):
        optical_torque((1, 1, 0, 0), make_site((0, 0, 0), 0.2), spheroid)


def test_libration_scales_with_sqrt_power(spheroid):
    f1 = libration_frequencies(make_site((0, 0, 0), 0.2), spheroid)
    f2 = libration_frequencies(make_site((0, 0, 0), 0.4), spheroid)
    assert f2 == pytest.approx(math.sqrt(2) * f1, rel=1e-12)


def test_field_sq_peak(single):
    site = single.sites[0]
    assert field_sq(site.focus, single) == pytest.approx(site.peak_field_sq, rel=1e-12)
