"""Free-molecular gas damping and the matching thermal noise.

Every drag coefficient here is built from the linearized momentum flux of
a rarefied gas on a surface element moving slowly compared to the thermal
speed. With ``beta = p * sqrt(m_gas / (2 pi kB T))`` (molecular mass flux
per unit velocity) and accommodation ``sigma``, an element with outward
normal ``n`` and velocity ``u`` feels

    dF / dA = -beta * [(4 - sigma * (2 - pi / 2)) * u_n * n + sigma * u_t]

Integrated over a sphere this reproduces Epstein's drag.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.constants import k as KB

from .errors import DomainError
from .optics import EllipsoidGeometry

AIR_MOLECULAR_MASS = 4.8e-26  # kg
AIR_KINETIC_DIAMETER = 3.66e-10  # m
FREE_MOLECULAR_RATIO = 10.0


class FreeMolecularWarning(UserWarning):
    """Mean free path is not much larger than the particle."""


@dataclass(frozen=True)
class GasEnvironment:
    pressure: float = 2000.0  # Pa
    temperature: float = 296.0  # K
    molecular_mass: float = AIR_MOLECULAR_MASS
    accommodation: float = 0.9

    def __post_init__(self):
        if not self.pressure >= 0:
            raise DomainError("pressure must be >= 0")
        if not self.temperature > 0:
            raise DomainError("temperature must be > 0")
        if not 0 <= self.accommodation <= 1:
            raise DomainError("accommodation coefficient must lie in [0, 1]")
        if self.molecular_mass <= 0:
            raise DomainError("molecular mass must be positive")

    def with_pressure(self, pressure: float) -> "GasEnvironment":
        return GasEnvironment(pressure, self.temperature, self.molecular_mass, self.accommodation)

    @property
    def kt(self) -> float:
        return KB * self.temperature

    @property
    def mass_flux_coefficient(self) -> float:
        """beta = p sqrt(m / (2 pi kB T)), in kg m^-2 s^-1 per (m/s)."""
        return self.pressure * math.sqrt(self.molecular_mass / (2 * math.pi * self.kt))

    @property
    def mean_free_path(self) -> float:
        if self.pressure == 0:
            return math.inf
        return self.kt / (math.sqrt(2) * math.pi * AIR_KINETIC_DIAMETER**2 * self.pressure)

    def is_free_molecular(self, size: float) -> bool:
        return self.mean_free_path / size >= FREE_MOLECULAR_RATIO


def _normal_coefficient(sigma: float) -> float:
    return 4.0 - sigma * (2.0 - math.pi / 2.0)


@dataclass(frozen=True)
class DampingRates:
    rates: np.ndarray  # rad/s along body (or lab, when aligned) x, y, z
    free_molecular: bool

    def __iter__(self):
        return iter(self.rates)


def _validity(geometry: EllipsoidGeometry, env: GasEnvironment) -> bool:
    ok = env.is_free_molecular(geometry.r1)
    if not ok:
        warnings.warn(
            f"mean free path {env.mean_free_path:.3g} m is < {FREE_MOLECULAR_RATIO:g} x particle size",
            FreeMolecularWarning, stacklevel=3)
    return ok


def translational_drag(geometry: EllipsoidGeometry, env: GasEnvironment) -> np.ndarray:
    """Drag coefficients F/v (kg/s) along the body axes.

    Spheres get the Epstein value; other shapes scale it by the
    cross-section presented to motion along each axis.
    """
    sigma = env.accommodation
    # Epstein: (4 pi r^2 / 3) beta (4 + pi sigma / 2) = (4/3)(4 + pi sigma/2) beta * (pi r^2)
    per_area = 4.0 / 3.0 * (4.0 + math.pi * sigma / 2.0) * env.mass_flux_coefficient
    return per_area * geometry.projected_areas()


def damping_rates(geometry: EllipsoidGeometry, env: GasEnvironment,
                  orientation_averaged: bool = False) -> DampingRates:
    """CoM damping rates gamma_i = drag_i / m in rad/s."""
    valid = _validity(geometry, env)
    rates = translational_drag(geometry, env) / geometry.mass
    if orientation_averaged:
        rates = np.full(3, rates.mean())
    return DampingRates(rates, valid)


def sphere_rotational_drag(radius: float, env: GasEnvironment) -> float:
    return 8.0 * math.pi / 3.0 * env.accommodation * env.mass_flux_coefficient * radius**4


def ellipsoid_surface_drag(axes, env: GasEnvironment, n_theta: int = 48) -> tuple[np.ndarray, np.ndarray]:
    """Translational (kg/s) and rotational (N m s) drag matrices by surface quadrature.

    Gauss-Legendre in the polar angle, uniform in azimuth, integrating the
    element stress law over the ellipsoid ``x^2/a^2 + y^2/b^2 + z^2/c^2 = 1``.
    """
    a, b, c = axes
    nodes, weights = np.polynomial.legendre.leggauss(n_theta)
    theta = 0.5 * math.pi * (nodes + 1.0)
    w_theta = 0.5 * math.pi * weights
    n_phi = 2 * n_theta
    phi = 2 * math.pi * np.arange(n_phi) / n_phi
    th, ph = np.meshgrid(theta, phi, indexing="ij")
    wgt = np.outer(w_theta, np.full(n_phi, 2 * math.pi / n_phi))
    st, ct, sp, cp = np.sin(th), np.cos(th), np.sin(ph), np.cos(ph)
    pts = np.stack([a * st * cp, b * st * sp, c * ct], axis=-1)
    nvec = np.stack([b * c * st**2 * cp, a * c * st**2 * sp, a * b * st * ct], axis=-1)
    area = np.linalg.norm(nvec, axis=-1)
    unit = nvec / area[..., None]
    da = area * wgt
    beta = env.mass_flux_coefficient
    kn, kt = _normal_coefficient(env.accommodation), env.accommodation

    def stress(u):
        un = np.sum(u * unit, axis=-1)
        ut = u - un[..., None] * unit
        return -beta * (kn * un[..., None] * unit + kt * ut)

    trans = np.zeros((3, 3))
    rot = np.zeros((3, 3))
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        dforce = stress(np.broadcast_to(e, pts.shape)) * da[..., None]
        trans[:, k] = -dforce.sum(axis=(0, 1))
        u = np.cross(e, pts)
        dtorque = np.cross(pts, stress(u)) * da[..., None]
        rot[:, k] = -dtorque.sum(axis=(0, 1))
    return trans, rot


@lru_cache(maxsize=512)
def _unit_pressure_rotational_drag(a, b, c, env):
    _, rot = ellipsoid_surface_drag((a, b, c), env)
    return tuple(np.diag(rot))


def rotational_drag(geometry: EllipsoidGeometry, env: GasEnvironment) -> np.ndarray:
    """Torque per angular velocity (N m s) about the body axes."""
    if env.pressure == 0:
        return np.zeros(3)
    if geometry.shape == "dumbbell":
        r = geometry.r2
        spin = sphere_rotational_drag(r, env)
        trans = translational_drag(EllipsoidGeometry.sphere(r), env)[0]
        # each sphere spins about its own centre and its centre moves on a circle of radius r
        return np.array([2 * spin, 2 * (spin + trans * r * r), 2 * (spin + trans * r * r)])
    if geometry.r1 == geometry.r3:
        return np.full(3, sphere_rotational_drag(geometry.r1, env))
    unit = _unit_pressure_rotational_drag(geometry.r1, geometry.r2, geometry.r3,
                                          env.with_pressure(1.0))
    return np.array(unit) * env.pressure


def rotational_damping_rates(geometry: EllipsoidGeometry, env: GasEnvironment) -> np.ndarray:
    return rotational_drag(geometry, env) / geometry.inertia()


def rotational_damping(geometry: EllipsoidGeometry, env: GasEnvironment) -> float:
    """Damping rate (1/s) of spin about the body axis normal to the two long axes."""
    _validity(geometry, env)
    return float(rotational_damping_rates(geometry, env)[2])


def thermal_kick_covariance(gamma, mass: float, env: GasEnvironment, dt: float):
    """Per-axis momentum-kick variance 2 kB T m gamma dt (kg^2 m^2 / s^2)."""
    if not dt > 0:
        raise DomainError("dt must be positive")
    return 2.0 * env.kt * mass * np.asarray(gamma, dtype=float) * dt
