"""Stochastic translational and rotational dynamics of one trapped particle.

Integration uses a BAOAB splitting: half kicks from the optical force and
torque, half drifts (straight-line translation and a symmetric split of free
rigid-body rotation), and an exact Ornstein-Uhlenbeck update of velocity and
body angular momentum that carries both gas drag and thermal noise. The
drag tensor is resolved along the body axes, so it rotates with the particle.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import _kernels
from .errors import (DomainError, NoTrapError, ParticleLostError, StepSizeError,
                     UnboundedSpinError, ZeroTorqueError)
from .gas import GasEnvironment, damping_rates, rotational_damping_rates, rotational_drag
from .optics import (DRIVE_COEFFICIENT, EllipsoidGeometry, Polarization, TrapArray, TrapSite,
                     drive_per_field, field_sq, find_equilibrium, libration_frequencies,
                     trap_frequencies)

STABILITY_FACTOR = 0.05
ESCAPE_WAISTS = 3.0
MAX_SAMPLES = 50_000_000
CHANNELS = ("x", "y", "z", "torsion", "spin")
CHANNEL_UNITS = {"t": "s", "x": "m", "y": "m", "z": "m", "torsion": "1", "spin": "rad/s"}
IDENTITY = (1.0, 0.0, 0.0, 0.0)


@dataclass
class ParticleState:
    """Translational and rotational state of one nanoparticle.

    ``angular_velocity`` is expressed in the lab frame. The mass always
    follows from the geometry.
    """

    position: np.ndarray
    velocity: np.ndarray
    orientation: np.ndarray
    angular_velocity: np.ndarray
    geometry: EllipsoidGeometry
    charge: float = 0.0

    def __post_init__(self):
        self.position = np.array(self.position, dtype=float)
        self.velocity = np.array(self.velocity, dtype=float)
        self.orientation = np.array(self.orientation, dtype=float)
        self.angular_velocity = np.array(self.angular_velocity, dtype=float)
        if abs(np.linalg.norm(self.orientation) - 1.0) > 1e-9:
            raise DomainError("orientation must be a unit quaternion")

    @property
    def mass(self) -> float:
        return self.geometry.mass

    @classmethod
    def at_rest(cls, geometry: EllipsoidGeometry, position=(0.0, 0.0, 0.0), orientation=IDENTITY,
                charge: float = 0.0) -> "ParticleState":
        return cls(np.asarray(position, float), np.zeros(3), np.asarray(orientation, float),
                   np.zeros(3), geometry, charge)

    @classmethod
    def at_equilibrium(cls, array: TrapArray, geometry: EllipsoidGeometry, row: int = 0, col: int = 0,
                       charge: float = 0.0) -> "ParticleState":
        return cls.at_rest(geometry, find_equilibrium(array, geometry, row, col), charge=charge)

    def copy(self) -> "ParticleState":
        return replace(self)

    def body_momentum(self) -> np.ndarray:
        rot = _kernels.quat_to_matrix(self.orientation)
        return self.geometry.inertia() * (rot.T @ self.angular_velocity)


@dataclass
class Trajectory:
    """Uniformly sampled channels of one particle, sample ``i`` at ``t = i / sample_rate``."""

    sample_rate: float
    channels: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    final_state: ParticleState | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        lengths = {len(v) for v in self.channels.values()}
        if len(lengths) > 1:
            raise DomainError("all channels must have equal length")

    def __len__(self) -> int:
        return len(next(iter(self.channels.values()))) if self.channels else 0

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    @property
    def time(self) -> np.ndarray:
        return np.arange(len(self)) / self.sample_rate

    @property
    def pressure(self) -> float:
        return float(self.metadata["pressure_pa"])


@dataclass(frozen=True)
class _Model:
    sites: np.ndarray
    alpha: np.ndarray
    inertia: np.ndarray
    mass: float
    gamma_t: np.ndarray
    gamma_r: np.ndarray
    kt: float
    drive: float
    gravity: float
    axial_force: float
    home: np.ndarray
    home_index: tuple[int, int]
    escape_radius: float
    max_rate: float
    max_frequency_hz: float
    isotropic: bool


def home_site(array: TrapArray, position) -> tuple[int, int]:
    """Grid index of the site whose focus is nearest in the transverse plane."""
    foci = np.array([s.focus for s in array.sites])
    idx = int(np.argmin(np.sum((foci[:, :2] - np.asarray(position)[:2]) ** 2, axis=1)))
    return divmod(idx, array.cols)


@lru_cache(maxsize=256)
def _static_rates(array: TrapArray, geometry: EllipsoidGeometry, row: int, col: int) -> tuple[float, ...]:
    site = array.site(row, col)
    try:
        omega = trap_frequencies(site, geometry, axial_force=array.axial_force, gravity=array.gravity)
        eq = find_equilibrium(array.single(row, col), geometry)
        e2 = field_sq(eq, array)
    except NoTrapError:
        omega = np.zeros(3)
        e2 = site.peak_field_sq
    lib = libration_frequencies(site, geometry, e2)
    return (*omega, *lib)


def _build_model(state: ParticleState, array: TrapArray, env: GasEnvironment, thermal: bool,
                 drive_coefficient: float) -> _Model:
    geometry = state.geometry
    row, col = home_site(array, state.position)
    site = array.site(row, col)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        gamma_t = damping_rates(geometry, env).rates
    gamma_r = rotational_damping_rates(geometry, env)
    static = _static_rates(array, geometry, row, col)
    spin = float(np.linalg.norm(state.angular_velocity))
    inertia = geometry.inertia()
    drive = drive_per_field(geometry, drive_coefficient)
    # free spin-up terminal rate bounds the rotation speed the step has to resolve
    if drive and any(s.polarization is Polarization.CIRCULAR for s in array.sites):
        c_rot = rotational_drag(geometry, env)[2]
        terminal = abs(drive) * site.peak_field_sq / c_rot if c_rot > 0 else 0.0
        spin = max(spin, terminal)
    max_rate = max(*static, *gamma_t, *gamma_r, spin)
    return _Model(
        sites=array.packed,
        alpha=geometry.polarizabilities(),
        inertia=inertia,
        mass=geometry.mass,
        gamma_t=np.ascontiguousarray(gamma_t, dtype=float),
        gamma_r=np.ascontiguousarray(gamma_r, dtype=float),
        kt=env.kt if thermal else 0.0,
        drive=drive,
        gravity=array.gravity,
        axial_force=array.axial_force,
        home=np.array(site.focus),
        home_index=(row, col),
        escape_radius=ESCAPE_WAISTS * max(site.waist_x, site.waist_y),
        max_rate=max_rate,
        max_frequency_hz=max(static) / (2 * math.pi),
        isotropic=bool(geometry.r1 == geometry.r3 and drive == 0.0),
    )


def max_stable_dt(state: ParticleState, array: TrapArray, env: GasEnvironment,
                  drive_coefficient: float = DRIVE_COEFFICIENT) -> float:
    """Largest step obeying ``dt < 0.05 / max(omega_i, gamma_i)``."""
    model = _build_model(state, array, env, True, drive_coefficient)
    return STABILITY_FACTOR / model.max_rate if model.max_rate > 0 else math.inf


def _draw(model: _Model, rng: np.random.Generator, n_samples: int, record_every: int):
    steps = n_samples * record_every
    noise_t = rng.standard_normal((steps, 3))
    noise_r = rng.standard_normal((n_samples if model.isotropic else steps, 3))
    return noise_t, noise_r


def _run(model: _Model, state: ParticleState, dt: float, record_every: int, noise,
         out: np.ndarray, lb: np.ndarray) -> int:
    return _kernels.integrate(
        state.position, state.velocity, state.orientation, lb, model.sites, model.alpha,
        model.inertia, model.mass, model.gamma_t, model.gamma_r, model.kt, model.drive,
        model.gravity, model.axial_force, model.home, model.escape_radius, dt, record_every,
        model.isotropic, noise[0], noise[1], out)


def _finish(state: ParticleState, lb: np.ndarray) -> None:
    rot = _kernels.quat_to_matrix(state.orientation)
    state.angular_velocity = rot @ (lb / state.geometry.inertia())


def step(state: ParticleState, array: TrapArray, env: GasEnvironment, dt: float,
         rng: np.random.Generator, thermal: bool = True,
         drive_coefficient: float = DRIVE_COEFFICIENT) -> ParticleState:
    """Advance one BAOAB step and return the new state.

    Raises :class:`StepSizeError` when ``dt`` breaks the stability bound and
    :class:`ParticleLostError` when the particle leaves the escape radius.
    """
    model = _build_model(state, array, env, thermal, drive_coefficient)
    if not dt > 0 or dt * model.max_rate >= STABILITY_FACTOR:
        raise StepSizeError(f"dt={dt:g} s violates dt < {STABILITY_FACTOR} / {model.max_rate:.4g} s^-1")
    new = state.copy()
    lb = new.body_momentum()
    out = np.empty((1, 5))
    n = _run(model, new, dt, 1, _draw(model, rng, 1, 1), out, lb)
    _finish(new, lb)
    if n == 1 and np.sum(out[0, :3] ** 2) > model.escape_radius**2:
        raise ParticleLostError("particle left the escape radius")
    return new


def simulate(initial: ParticleState, array: TrapArray, env: GasEnvironment, duration: float,
             sample_rate: float, seed=0, dt: float | None = None, thermal: bool = True,
             drive_coefficient: float = DRIVE_COEFFICIENT, max_samples: int = MAX_SAMPLES,
             chunk_samples: int = 4096) -> Trajectory:
    """Integrate from ``initial`` and sample x, y, z, torsion and spin.

    Positions are relative to the focus of the particle's home site. The
    integration step defaults to the largest step that both obeys the
    stability bound and divides the sampling interval. If the particle
    escapes, sampling stops and ``metadata["lost_at_s"]`` records when.
    """
    if duration < 0 or sample_rate <= 0:
        raise DomainError("need duration >= 0 and sample_rate > 0")
    n_samples = int(round(duration * sample_rate))
    if n_samples > max_samples:
        raise DomainError(f"{n_samples} samples exceed the memory cap of {max_samples}")
    model = _build_model(initial, array, env, thermal, drive_coefficient)
    if sample_rate <= 2 * model.max_frequency_hz:
        raise DomainError(f"sample rate {sample_rate:g} Hz must exceed twice the highest "
                          f"trap frequency ({model.max_frequency_hz:.4g} Hz)")
    if dt is None:
        per_sample = max(1, math.ceil(model.max_rate / (STABILITY_FACTOR * sample_rate) * (1 + 1e-12)))
    else:
        per_sample = max(1, int(round(1.0 / (sample_rate * dt))))
    dt = 1.0 / (sample_rate * per_sample)
    if dt * model.max_rate >= STABILITY_FACTOR:
        raise StepSizeError(f"dt={dt:g} s violates the stability bound")

    site = array.site(*model.home_index)
    metadata = {
        "pressure_pa": env.pressure,
        "temperature_k": env.temperature,
        "seed": seed if isinstance(seed, (int, np.integer)) or seed is None else str(seed),
        "sample_rate_hz": sample_rate,
        "dt_s": dt,
        "site": list(model.home_index),
        "polarization": site.polarization.value,
        "power_w": site.power,
        "geometry": {"r1": initial.geometry.r1, "r2": initial.geometry.r2, "r3": initial.geometry.r3,
                     "shape": initial.geometry.shape},
        "thermal": thermal,
        "lost_at_s": None,
    }
    data = np.empty((n_samples, 5))
    state = initial.copy()
    lb = state.body_momentum()
    rng = np.random.default_rng(seed)
    if n_samples:
        rel = state.position - model.home
        data[0, :3] = rel
        data[0, 3] = _kernels.torsion_signal(state.orientation, model.alpha)
        data[0, 4] = state.angular_velocity[2]
        done = 1
        while done < n_samples:
            m = min(chunk_samples, n_samples - done)
            noise = _draw(model, rng, m, per_sample)
            written = _run(model, state, dt, per_sample, noise, data[done:done + m], lb)
            done += written
            # the escaping sample is recorded, so it may be the last one of a chunk
            if written < m or np.sum(data[done - 1, :3] ** 2) > model.escape_radius**2:
                metadata["lost_at_s"] = (done - 1) / sample_rate
                data = data[:done]
                break
    _finish(state, lb)
    channels = {name: np.ascontiguousarray(data[:, i]) for i, name in enumerate(CHANNELS)}
    return Trajectory(sample_rate, channels, metadata, final_state=state)


def mechanical_energy(state: ParticleState, array: TrapArray,
                      drive_coefficient: float = DRIVE_COEFFICIENT) -> float:
    """Kinetic + optical + gravitational energy, minus the work potential of the axial force."""
    geometry = state.geometry
    force = np.empty(3)
    torque = np.empty(3)
    u_opt = _kernels.forces(state.position, state.orientation, array.packed, geometry.polarizabilities(),
                            0.0, geometry.mass, array.gravity, array.axial_force, force, torque)
    lb = state.body_momentum()
    kinetic = 0.5 * geometry.mass * state.velocity @ state.velocity + 0.5 * np.sum(lb**2 / geometry.inertia())
    return kinetic + u_opt + (geometry.mass * array.gravity - array.axial_force) * state.position[2]


def drive_torque(geometry: EllipsoidGeometry, site: TrapSite, env: GasEnvironment | None = None,
                 drive_coefficient: float = DRIVE_COEFFICIENT, axial_force: float = 0.0) -> float:
    """Spin torque (N m) on ``geometry`` sitting at its equilibrium in a circular ``site``."""
    if site.polarization is not Polarization.CIRCULAR:
        raise DomainError("spin drive needs a circularly polarized site")
    if geometry.is_sphere():
        raise ZeroTorqueError("a sphere has no polarizability anisotropy to drive")
    single = site.as_array(axial_force)
    eq = find_equilibrium(single, geometry)
    return drive_per_field(geometry, drive_coefficient) * field_sq(eq, single)


def terminal_rotation(geometry: EllipsoidGeometry, site: TrapSite, env: GasEnvironment,
                      drive_coefficient: float = DRIVE_COEFFICIENT) -> float:
    """Steady spin rate Omega = tau_drive / (I_spin gamma_rot) in rad/s."""
    if geometry.is_sphere():
        raise ZeroTorqueError("a sphere has no polarizability anisotropy to drive")
    if env.pressure <= 0:
        raise UnboundedSpinError("without gas drag the spin rate grows without bound")
    torque = drive_torque(geometry, site, env, drive_coefficient)
    c_rot = rotational_drag(geometry, env)[2]
    return torque / c_rot


def spin_up(geometry: EllipsoidGeometry, site: TrapSite, env: GasEnvironment, duration: float,
            n_steps: int = 1000, seed=0, thermal: bool = True, omega0: float = 0.0,
            drive_coefficient: float = DRIVE_COEFFICIENT) -> tuple[np.ndarray, np.ndarray]:
    """Spin rate about the beam axis versus time, integrated step by step.

    Each step applies the exact Ornstein-Uhlenbeck update of the spin
    angular momentum under constant drive torque, drag and thermal torque
    noise. Returns ``(t, omega)`` with ``n_steps + 1`` points.
    """
    if env.pressure <= 0:
        raise UnboundedSpinError("without gas drag the spin rate grows without bound")
    torque = drive_torque(geometry, site, env, drive_coefficient)
    inertia = geometry.inertia()[2]
    gamma = rotational_damping_rates(geometry, env)[2]
    h = duration / n_steps
    decay = math.exp(-gamma * h)
    sigma = math.sqrt(env.kt / inertia * (1 - decay**2)) if thermal else 0.0
    rng = np.random.default_rng(seed)
    kicks = rng.standard_normal(n_steps) * sigma
    terminal = torque / (inertia * gamma)
    omega = np.empty(n_steps + 1)
    omega[0] = omega0
    for i in range(n_steps):
        omega[i + 1] = omega[i] * decay + terminal * (1 - decay) + kicks[i]
    return np.arange(n_steps + 1) * h, omega


def calibrate_drive_coefficient(radius: float = 85e-9, power: float = 0.2, pressure: float = 0.06,
                                target_hz: float = 1.75e9, env: GasEnvironment | None = None,
                                wavelength: float = 1064e-9, na: float = 0.95) -> float:
    """Drive coefficient that makes the default dumbbell spin at ``target_hz``."""
    from .optics import make_site

    env = GasEnvironment(pressure) if env is None else env.with_pressure(pressure)
    site = make_site((0.0, 0.0, 0.0), power, Polarization.CIRCULAR, wavelength, na)
    unit = terminal_rotation(EllipsoidGeometry.dumbbell(radius), site, env, drive_coefficient=1.0)
    return 2 * math.pi * target_hz / unit
