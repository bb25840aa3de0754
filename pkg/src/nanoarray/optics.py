"""Optical potential, force and torque of a 2D array of Gaussian tweezers.

The beams propagate along +z, against gravity. Each site is a paraxial
Gaussian focus; time-averaged intensities of different sites add (distinct
AOD tones do not interfere). The particle is a point dipole whose
polarizability tensor follows from its ellipsoid (or dumbbell) shape.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
from scipy import integrate
from scipy.constants import epsilon_0, g as STANDARD_GRAVITY

from . import _kernels
from .errors import DomainError, NoTrapError

SILICA_DENSITY = 1850.0  # kg/m^3
SILICA_PERMITTIVITY = 2.1  # relative, at 1064 nm
SPHERICITY_TOLERANCE = 0.05
FORCE_TOLERANCE = 1e-18  # N
DEFAULT_WAIST_ANISOTROPY = 1.2

# Spin torque per unit (alpha_1 - alpha_2) <E^2> under circular polarization.
# Calibrated so the default dumbbell spins at 1.75 GHz at 0.06 Pa; see
# dynamics.calibrate_drive_coefficient.
DRIVE_COEFFICIENT = 1.970790704243547e-03


class Polarization(str, enum.Enum):
    LINEAR_X = "linear_x"
    CIRCULAR = "circular"

    @property
    def code(self) -> int:
        return _kernels.POL_LINEAR_X if self is Polarization.LINEAR_X else _kernels.POL_CIRCULAR


@lru_cache(maxsize=256)
def _depolarization(r1: float, r2: float, r3: float) -> tuple[float, float, float]:
    # lengths scaled by r1 to keep the integrand O(1)
    b, c = r2 / r1, r3 / r1
    pref = 0.5 * b * c
    out = []
    for ai in (1.0, b, c):
        def integrand(s, ai=ai):
            return 1.0 / ((s + ai * ai) * math.sqrt((s + 1.0) * (s + b * b) * (s + c * c)))
        val, _ = integrate.quad(integrand, 0.0, np.inf, epsabs=0.0, epsrel=1e-12, limit=200)
        out.append(pref * val)
    return tuple(out)


def depolarization_factors(r1: float, r2: float, r3: float) -> np.ndarray:
    """Depolarization factors of an ellipsoid along its semi-axes (sum to 1)."""
    if r1 == r2 == r3:
        return np.full(3, 1.0 / 3.0)
    return np.array(_depolarization(float(r1), float(r2), float(r3)))


@dataclass(frozen=True)
class EllipsoidGeometry:
    """Particle shape with semi-axes ``r1 >= r2 >= r3`` along body x, y, z.

    ``shape="dumbbell"`` describes two touching spheres of radius ``r2``
    lying along body x; then ``r1 = 2 * r2`` and mass, projected areas and
    semi-axes coincide with the bounding ellipsoid, while polarizability
    and inertia use the two-sphere composition.
    """

    r1: float
    r2: float
    r3: float
    density: float = SILICA_DENSITY
    permittivity: float = SILICA_PERMITTIVITY
    shape: str = "ellipsoid"

    def __post_init__(self):
        if not (self.r3 > 0 and self.r2 >= self.r3 * (1 - 1e-12) and self.r1 >= self.r2 * (1 - 1e-12)):
            raise DomainError(f"semi-axes must satisfy r1 >= r2 >= r3 > 0, got {self.r1}, {self.r2}, {self.r3}")
        if self.density <= 0 or self.permittivity <= 1:
            raise DomainError("density must be positive and permittivity > 1")
        if self.shape not in ("ellipsoid", "dumbbell"):
            raise DomainError(f"unknown shape {self.shape!r}")
        if self.shape == "dumbbell" and not (
            math.isclose(self.r2, self.r3) and math.isclose(self.r1, 2 * self.r2)
        ):
            raise DomainError("dumbbell requires r1 = 2 r2 = 2 r3")

    @classmethod
    def sphere(cls, radius: float, **kw) -> "EllipsoidGeometry":
        return cls(radius, radius, radius, **kw)

    @classmethod
    def spheroid(cls, radius: float, aspect: float, **kw) -> "EllipsoidGeometry":
        """Prolate spheroid with ``r1 = aspect * r2`` and the volume of a sphere of ``radius``."""
        minor = radius * aspect ** (-1.0 / 3.0)
        return cls(aspect * minor, minor, minor, **kw)

    @classmethod
    def dumbbell(cls, radius: float, **kw) -> "EllipsoidGeometry":
        return cls(2 * radius, radius, radius, shape="dumbbell", **kw)

    @property
    def axes(self) -> np.ndarray:
        return np.array([self.r1, self.r2, self.r3])

    @property
    def volume(self) -> float:
        return 4.0 / 3.0 * math.pi * self.r1 * self.r2 * self.r3

    @property
    def mass(self) -> float:
        return self.density * self.volume

    def is_sphere(self, tolerance: float = SPHERICITY_TOLERANCE) -> bool:
        return (self.r1 - self.r3) / self.r1 < tolerance

    def polarizabilities(self) -> np.ndarray:
        """Static polarizabilities along body x, y, z in C m^2 / V."""
        eps = self.permittivity
        if self.shape == "dumbbell":
            r = self.r2
            a0 = 4 * math.pi * epsilon_0 * r**3 * (eps - 1) / (eps + 2)
            coupling = a0 / (4 * math.pi * epsilon_0 * (2 * r) ** 3)
            par = 2 * a0 / (1 - 2 * coupling)
            perp = 2 * a0 / (1 + coupling)
            return np.array([par, perp, perp])
        if self.r1 == self.r3:
            a0 = 4 * math.pi * epsilon_0 * self.r1**3 * (eps - 1) / (eps + 2)
            return np.full(3, a0)
        dep = depolarization_factors(self.r1, self.r2, self.r3)
        vol = self.r1 * self.r2 * self.r3
        return 4 * math.pi * epsilon_0 * vol * (eps - 1) / (3 + 3 * dep * (eps - 1))

    def inertia(self) -> np.ndarray:
        """Principal moments of inertia about body x, y, z in kg m^2."""
        m = self.mass
        if self.shape == "dumbbell":
            r = self.r2
            return np.array([0.4 * m * r**2, 1.4 * m * r**2, 1.4 * m * r**2])
        a, b, c = self.r1, self.r2, self.r3
        return m / 5.0 * np.array([b * b + c * c, a * a + c * c, a * a + b * b])

    def projected_areas(self) -> np.ndarray:
        """Cross-sections presented to motion along body x, y, z."""
        a, b, c = self.r1, self.r2, self.r3
        return math.pi * np.array([b * c, a * c, a * b])


@dataclass(frozen=True)
class TrapSite:
    focus: tuple[float, float, float]
    power: float
    polarization: Polarization
    waist_x: float
    waist_y: float
    rayleigh_range: float

    def __post_init__(self):
        object.__setattr__(self, "focus", tuple(float(v) for v in self.focus))
        object.__setattr__(self, "polarization", Polarization(self.polarization))
        if self.power <= 0:
            raise DomainError("site power must be positive")
        if min(self.waist_x, self.waist_y, self.rayleigh_range) <= 0:
            raise DomainError("waists and Rayleigh range must be positive")
        if self.polarization is Polarization.LINEAR_X and self.waist_x < self.waist_y:
            raise DomainError("linear_x sites need waist_x >= waist_y")

    @property
    def peak_field_sq(self) -> float:
        """<E^2> at the focus in V^2/m^2."""
        return 2 * self.power / (math.pi * self.waist_x * self.waist_y) * _kernels.E2_PER_INTENSITY

    def packed(self) -> np.ndarray:
        return np.array([*self.focus, self.power, self.waist_x, self.waist_y,
                         self.rayleigh_range, float(self.polarization.code)])

    def as_array(self, axial_force: float = 0.0, gravity: float = STANDARD_GRAVITY) -> "TrapArray":
        return TrapArray((self,), rows=1, cols=1, pitch_x=1.0, pitch_y=1.0,
                         axial_force=axial_force, gravity=gravity)


def focal_waist(wavelength: float, na: float) -> float:
    """Paraxial 1/e^2 intensity radius for a beam focused at numerical aperture ``na``."""
    return wavelength / (math.pi * na)


def make_site(focus, power: float, polarization: Polarization | str = Polarization.LINEAR_X,
              wavelength: float = 1064e-9, na: float = 0.95,
              waist_anisotropy: float = DEFAULT_WAIST_ANISOTROPY) -> TrapSite:
    pol = Polarization(polarization)
    w0 = focal_waist(wavelength, na)
    wx = w0 * waist_anisotropy if pol is Polarization.LINEAR_X else w0
    return TrapSite(tuple(focus), power, pol, wx, w0, math.pi * w0**2 / wavelength)


@dataclass(frozen=True)
class TrapArray:
    """Row-major grid of trap sites with lumped gravity and axial force."""

    sites: tuple[TrapSite, ...]
    rows: int
    cols: int
    pitch_x: float  # column pitch
    pitch_y: float  # row pitch
    wavelength: float = 1064e-9
    na: float = 0.95
    axial_force: float = 0.0
    gravity: float = STANDARD_GRAVITY
    origin: tuple[float, float] = field(default=(0.0, 0.0))

    def __post_init__(self):
        if not self.sites:
            raise DomainError("trap array needs at least one site")
        if len(self.sites) != self.rows * self.cols:
            raise DomainError("site count does not match rows * cols")
        if self.wavelength <= 0 or not 0 < self.na < 1:
            raise DomainError("need wavelength > 0 and 0 < NA < 1")
        if self.rows * self.cols > 1:
            for idx, site in enumerate(self.sites):
                r, c = divmod(idx, self.cols)
                expect = (self.origin[0] + c * self.pitch_x, self.origin[1] + r * self.pitch_y)
                if not (math.isclose(site.focus[0], expect[0], abs_tol=1e-12)
                        and math.isclose(site.focus[1], expect[1], abs_tol=1e-12)):
                    raise DomainError(f"site {r},{c} is off the lattice")

    @classmethod
    def grid(cls, rows: int = 3, cols: int = 3, pitch_x: float = 1.77e-6, pitch_y: float = 2.66e-6,
             power: float = 0.2, wavelength: float = 1064e-9, na: float = 0.95,
             polarization: Polarization | str = Polarization.LINEAR_X,
             waist_anisotropy: float = DEFAULT_WAIST_ANISOTROPY, axial_force: float = 0.0,
             gravity: float = STANDARD_GRAVITY) -> "TrapArray":
        sites = tuple(
            make_site((c * pitch_x, r * pitch_y, 0.0), power, polarization, wavelength, na, waist_anisotropy)
            for r in range(rows) for c in range(cols)
        )
        return cls(sites, rows, cols, pitch_x, pitch_y, wavelength, na, axial_force, gravity)

    def site(self, row: int, col: int) -> TrapSite:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise DomainError(f"site ({row}, {col}) outside a {self.rows}x{self.cols} array")
        return self.sites[row * self.cols + col]

    def single(self, row: int = 0, col: int = 0) -> "TrapArray":
        """The one-site array holding only ``(row, col)``, with the same lumped forces."""
        return self.site(row, col).as_array(self.axial_force, self.gravity)

    @cached_property
    def packed(self) -> np.ndarray:
        return np.ascontiguousarray([s.packed() for s in self.sites])


def _check_position(position) -> np.ndarray:
    pos = np.asarray(position, dtype=float)
    if pos.shape != (3,) or not np.all(np.isfinite(pos)):
        raise DomainError(f"position must be a finite 3-vector, got {position!r}")
    return pos


def aligned_polarizabilities(geometry: EllipsoidGeometry) -> tuple[float, float]:
    """Effective CoM polarizability for (linear_x, circular) sites.

    Under linear polarization the long axis aligns with the field; under
    circular polarization the two largest axes share the rotating field.
    """
    alpha = geometry.polarizabilities()
    return float(alpha[0]), float(0.5 * (alpha[0] + alpha[1]))


def field_sq(position, array: TrapArray) -> float:
    """Total time-averaged <E^2> at ``position``."""
    pos = _check_position(position)
    grad = np.empty((2, 3))
    e_lin, e_circ = _kernels.beam_fields(pos, array.packed, grad)
    return e_lin + e_circ


def trap_potential(position, array: TrapArray, geometry: EllipsoidGeometry) -> float:
    """Dipole potential plus gravitational energy in joules.

    The lumped axial (scattering + photophoretic) force is not derivable
    from a potential and is only included in :func:`trap_force`.
    """
    pos = _check_position(position)
    grad = np.empty((2, 3))
    e_lin, e_circ = _kernels.beam_fields(pos, array.packed, grad)
    a_lin, a_circ = aligned_polarizabilities(geometry)
    return -0.5 * (a_lin * e_lin + a_circ * e_circ) + geometry.mass * array.gravity * pos[2]


def trap_force(position, array: TrapArray, geometry: EllipsoidGeometry) -> np.ndarray:
    pos = _check_position(position)
    grad = np.empty((2, 3))
    _kernels.beam_fields(pos, array.packed, grad)
    a_lin, a_circ = aligned_polarizabilities(geometry)
    force = 0.5 * (a_lin * grad[0] + a_circ * grad[1])
    force[2] += array.axial_force - geometry.mass * array.gravity
    return force


def potential_hessian(position, array: TrapArray, geometry: EllipsoidGeometry) -> np.ndarray:
    """Analytic Hessian of :func:`trap_potential` (J/m^2)."""
    pos = _check_position(position)
    a_lin, a_circ = aligned_polarizabilities(geometry)
    hess = np.zeros((3, 3))
    for site in array.sites:
        alpha = a_lin if site.polarization is Polarization.LINEAR_X else a_circ
        dx, dy, dz = pos - np.asarray(site.focus)
        wx, wy, zr = site.waist_x, site.waist_y, site.rayleigh_range
        zeta = dz / zr
        s = 1 + zeta * zeta
        g = 2 * dx * dx / wx**2 + 2 * dy * dy / wy**2
        val = site.peak_field_sq / s * math.exp(-g / s)
        f = np.array([-4 * dx / (wx**2 * s), -4 * dy / (wy**2 * s),
                      (2 * zeta / zr) * (g / s**2 - 1 / s)])
        h = np.zeros((3, 3))
        h[0, 0] = -4 / (wx**2 * s)
        h[1, 1] = -4 / (wy**2 * s)
        h[0, 2] = h[2, 0] = 8 * dx * zeta / (wx**2 * s**2 * zr)
        h[1, 2] = h[2, 1] = 8 * dy * zeta / (wy**2 * s**2 * zr)
        h[2, 2] = (2 / zr**2) * (g / s**2 - 1 / s) + (4 * zeta**2 / zr**2) * (1 / s**2 - 2 * g / s**3)
        hess += -0.5 * alpha * val * (np.outer(f, f) + h)
    return hess


def find_equilibrium(array: TrapArray, geometry: EllipsoidGeometry, row: int = 0, col: int = 0,
                     force_tolerance: float = FORCE_TOLERANCE, max_iter: int = 100) -> np.ndarray:
    """Stable equilibrium near the focus of site ``(row, col)``.

    Damped Newton iteration on the total force. Raises :class:`NoTrapError`
    when the iteration leaves the focal region or the Hessian is not
    positive definite there.
    """
    site = array.site(row, col)
    pos = np.array(site.focus, dtype=float)
    zr = site.rayleigh_range
    for _ in range(max_iter):
        force = trap_force(pos, array, geometry)
        if np.linalg.norm(force) < force_tolerance:
            break
        hess = potential_hessian(pos, array, geometry)
        try:
            step = np.linalg.solve(hess, force)
        except np.linalg.LinAlgError as exc:
            raise NoTrapError("singular Hessian while searching for equilibrium") from exc
        norm = np.linalg.norm(step)
        if norm > 0.25 * zr:
            step *= 0.25 * zr / norm
        pos = pos + step
        if np.linalg.norm(pos - site.focus) > 2 * zr:
            raise NoTrapError("no equilibrium near the focus: gravity or axial force exceeds the trap")
    else:
        raise NoTrapError("equilibrium search did not converge")
    if np.any(np.linalg.eigvalsh(potential_hessian(pos, array, geometry)) <= 0):
        raise NoTrapError("stationary point is not a potential minimum")
    return pos


def trap_frequencies(site: TrapSite, geometry: EllipsoidGeometry, mass: float | None = None,
                     axial_force: float = 0.0, gravity: float = STANDARD_GRAVITY) -> np.ndarray:
    """Angular CoM frequencies (omega_x, omega_y, omega_z) in rad/s."""
    mass = geometry.mass if mass is None else mass
    single = site.as_array(axial_force, gravity)
    eq = find_equilibrium(single, geometry)
    diag = np.diag(potential_hessian(eq, single, geometry))
    if np.any(diag <= 0):
        raise NoTrapError("non-positive stiffness at equilibrium")
    return np.sqrt(diag / mass)


def _check_quaternion(orientation) -> np.ndarray:
    q = np.asarray(orientation, dtype=float)
    if q.shape != (4,) or not np.all(np.isfinite(q)) or abs(np.linalg.norm(q) - 1) > 1e-9:
        raise DomainError("orientation must be a unit quaternion (w, x, y, z)")
    return q


def lab_polarizability(orientation, geometry: EllipsoidGeometry) -> np.ndarray:
    r = _kernels.quat_to_matrix(_check_quaternion(orientation))
    return r @ np.diag(geometry.polarizabilities()) @ r.T


def drive_per_field(geometry: EllipsoidGeometry, coefficient: float = DRIVE_COEFFICIENT,
                    tolerance: float = SPHERICITY_TOLERANCE) -> float:
    """Spin torque per unit <E^2> under circular polarization (zero for spheres)."""
    if geometry.is_sphere(tolerance):
        return 0.0
    alpha = geometry.polarizabilities()
    return coefficient * float(alpha[0] - alpha[1])


def orientation_energy(orientation, site: TrapSite, geometry: EllipsoidGeometry,
                       field_sq: float | None = None) -> float:
    """Orientation-dependent part of the dipole energy at a given <E^2>."""
    e2 = site.peak_field_sq if field_sq is None else field_sq
    a = lab_polarizability(orientation, geometry)
    if site.polarization is Polarization.LINEAR_X:
        return -0.5 * e2 * a[0, 0]
    return -0.25 * e2 * (a[0, 0] + a[1, 1])


def optical_torque(orientation, site: TrapSite, geometry: EllipsoidGeometry,
                   field_sq: float | None = None, drive_coefficient: float = DRIVE_COEFFICIENT) -> np.ndarray:
    """Torque in N m on the particle, by default at the peak field of ``site``."""
    e2 = site.peak_field_sq if field_sq is None else field_sq
    # only the anisotropic part turns the particle; subtracting the smallest
    # polarizability makes the sphere torque exactly zero
    r = _kernels.quat_to_matrix(_check_quaternion(orientation))
    alpha = geometry.polarizabilities()
    a = r @ np.diag(alpha - alpha[2]) @ r.T
    ex, ey = np.eye(3)[0], np.eye(3)[1]
    if site.polarization is Polarization.LINEAR_X:
        return e2 * np.cross(a @ ex, ex)
    torque = 0.5 * e2 * (np.cross(a @ ex, ex) + np.cross(a @ ey, ey))
    torque[2] += drive_per_field(geometry, drive_coefficient) * e2
    return torque


def libration_frequencies(site: TrapSite, geometry: EllipsoidGeometry,
                          field_sq: float | None = None) -> np.ndarray:
    """Small-angle torsional frequencies (about lab z, about lab y) under linear polarization."""
    e2 = site.peak_field_sq if field_sq is None else field_sq
    alpha = geometry.polarizabilities()
    inertia = geometry.inertia()
    return np.sqrt(np.array([(alpha[0] - alpha[1]) * e2 / inertia[2],
                             (alpha[0] - alpha[2]) * e2 / inertia[1]]))
