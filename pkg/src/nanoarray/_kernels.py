"""Compiled inner loops shared by the optics and dynamics modules.

Site parameters are packed row-wise as
``(fx, fy, fz, power, waist_x, waist_y, rayleigh_range, pol)`` with
``pol = 0`` for linear polarization along x and ``pol = 1`` for circular.
Quaternions are scalar-first and rotate body-frame vectors into the lab.
"""

import math

import numpy as np
from numba import njit

from scipy.constants import c as _C, epsilon_0 as _EPS0

# <E^2> = intensity * E2_PER_INTENSITY
E2_PER_INTENSITY = 1.0 / (_C * _EPS0)
# Beyond this many 1/e^2 radii a beam contributes < 1e-26 of its peak.
_CUTOFF = 60.0

POL_LINEAR_X = 0
POL_CIRCULAR = 1


@njit(cache=True, nogil=True)
def quat_to_matrix(q):
    r = np.empty((3, 3))
    rotation_matrix(q, r)
    return r


@njit(cache=True, nogil=True, inline="always")
def rotation_matrix(q, r):
    w, x, y, z = q[0], q[1], q[2], q[3]
    r[0, 0] = 1.0 - 2.0 * (y * y + z * z)
    r[0, 1] = 2.0 * (x * y - w * z)
    r[0, 2] = 2.0 * (x * z + w * y)
    r[1, 0] = 2.0 * (x * y + w * z)
    r[1, 1] = 1.0 - 2.0 * (x * x + z * z)
    r[1, 2] = 2.0 * (y * z - w * x)
    r[2, 0] = 2.0 * (x * z - w * y)
    r[2, 1] = 2.0 * (y * z + w * x)
    r[2, 2] = 1.0 - 2.0 * (x * x + y * y)


@njit(cache=True, nogil=True)
def beam_fields(pos, sites, grad):
    """Time-averaged E^2 summed over sites, split by polarization.

    ``grad`` (2, 3) receives the gradients; row 0 linear, row 1 circular.
    Returns ``(e2_linear, e2_circular)``.
    """
    e2l, e2c, g0x, g0y, g0z, g1x, g1y, g1z = _fields(pos[0], pos[1], pos[2], sites)
    grad[0, 0], grad[0, 1], grad[0, 2] = g0x, g0y, g0z
    grad[1, 0], grad[1, 1], grad[1, 2] = g1x, g1y, g1z
    return e2l, e2c


@njit(cache=True, nogil=True)
def forces(pos, q, sites, alpha, drive, mass, gravity, axial_force, force, torque):
    """Force and torque on an anisotropic dipole; returns the optical potential.

    ``drive`` is the spin torque per unit <E^2> for circular sites (N m per V^2/m^2).
    Gravity and the lumped axial force are added to ``force`` but not to the
    returned potential.
    """
    e2l, e2c = _fields(pos[0], pos[1], pos[2], sites)[:2]
    r00, r01, r02, r10, r11, r12, r20, r21, r22 = _matrix(q[0], q[1], q[2], q[3])
    d1 = alpha[1] - alpha[0]
    d2 = alpha[2] - alpha[0]
    out = _load(pos[0], pos[1], pos[2], r01, r11, r21, r02, r12, r22, sites, alpha[0], d1, d2,
                drive, axial_force - mass * gravity)
    for k in range(3):
        force[k] = out[k]
        torque[k] = out[3 + k]
    # the lab polarizability tensor minus its isotropic alpha[0] part is zero for spheres
    a00 = d1 * r01 * r01 + d2 * r02 * r02
    a11 = d1 * r11 * r11 + d2 * r12 * r12
    return -0.5 * ((alpha[0] + a00) * e2l + (alpha[0] + 0.5 * (a00 + a11)) * e2c)


@njit(cache=True, nogil=True, inline="always")
def torsion_signal(q, alpha):
    """Cross-polarized (xy) polarizability element normalized by the mean."""
    x, y, z, w = q[1], q[2], q[3], q[0]
    # rows 0 and 1, columns 1 and 2 of the rotation matrix
    r01 = 2.0 * (x * y - w * z)
    r02 = 2.0 * (x * z + w * y)
    r11 = 1.0 - 2.0 * (x * x + z * z)
    r12 = 2.0 * (y * z - w * x)
    acc = (alpha[1] - alpha[0]) * r01 * r11 + (alpha[2] - alpha[0]) * r02 * r12
    return acc / ((alpha[0] + alpha[1] + alpha[2]) / 3.0)


@njit(cache=True, nogil=True, inline="always")
def _fields(px, py, pz, sites):
    e2_0 = 0.0
    e2_1 = 0.0
    g0x = g0y = g0z = 0.0
    g1x = g1y = g1z = 0.0
    for i in range(sites.shape[0]):
        dx = px - sites[i, 0]
        dy = py - sites[i, 1]
        dz = pz - sites[i, 2]
        wx = sites[i, 4]
        wy = sites[i, 5]
        zr = sites[i, 6]
        zeta = dz / zr
        inv_s = 1.0 / (1.0 + zeta * zeta)
        ix = 1.0 / (wx * wx)
        iy = 1.0 / (wy * wy)
        g = 2.0 * (dx * dx * ix + dy * dy * iy)
        if g * inv_s > _CUTOFF:
            continue
        val = 2.0 * sites[i, 3] / (math.pi * wx * wy) * E2_PER_INTENSITY * inv_s * math.exp(-g * inv_s)
        gx = -4.0 * val * dx * ix * inv_s
        gy = -4.0 * val * dy * iy * inv_s
        gz = val * (2.0 * zeta / zr) * (g * inv_s - 1.0) * inv_s
        if sites[i, 7] == 0.0:
            e2_0 += val
            g0x += gx
            g0y += gy
            g0z += gz
        else:
            e2_1 += val
            g1x += gx
            g1y += gy
            g1z += gz
    return e2_0, e2_1, g0x, g0y, g0z, g1x, g1y, g1z


@njit(cache=True, nogil=True, inline="always")
def _matrix(w, x, y, z):
    return (1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
            2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
            2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y))


@njit(cache=True, nogil=True, inline="always")
def _load(px, py, pz, r01, r11, r21, r02, r12, r22, sites, a0, d1, d2, drive, fz0):
    """Lab force and torque from position and the last two rotation columns.

    Only the anisotropic part of the lab polarizability tensor enters the
    torque: (A e) x e is (0, A_zx, -A_yx) for e = x and (-A_zy, 0, A_xy) for e = y.
    """
    e2l, e2c, g0x, g0y, g0z, g1x, g1y, g1z = _fields(px, py, pz, sites)
    a00 = d1 * r01 * r01 + d2 * r02 * r02
    a11 = d1 * r11 * r11 + d2 * r12 * r12
    a10 = d1 * r11 * r01 + d2 * r12 * r02
    a20 = d1 * r21 * r01 + d2 * r22 * r02
    a21 = d1 * r21 * r11 + d2 * r22 * r12
    al = 0.5 * (a0 + a00)
    ac = 0.5 * (a0 + 0.5 * (a00 + a11))
    return (al * g0x + ac * g1x, al * g0y + ac * g1y, al * g0z + ac * g1z + fz0,
            -0.5 * e2c * a21, (e2l + 0.5 * e2c) * a20, -e2l * a10 + drive * e2c)


@njit(cache=True, nogil=True, inline="always")
def _turn(axis, theta, w, x, y, z, l0, l1, l2):
    # Cayley half-angle pair: an exact rotation by 4 atan(theta / 4) = theta - theta^3 / 48 + ...
    # without trigonometric calls. It is the exact flow of a slightly modified kinetic energy,
    # so the splitting stays symplectic.
    u = 0.25 * theta
    inv = 1.0 / (1.0 + u * u)
    hc = (1.0 - u * u) * inv
    hs = 2.0 * u * inv
    c = hc * hc - hs * hs
    s = 2.0 * hc * hs
    if axis == 0:
        return (w * hc - x * hs, x * hc + w * hs, y * hc + z * hs, z * hc - y * hs,
                l0, c * l1 + s * l2, -s * l1 + c * l2)
    if axis == 1:
        return (w * hc - y * hs, x * hc - z * hs, y * hc + w * hs, z * hc + x * hs,
                c * l0 - s * l2, l1, s * l0 + c * l2)
    return (w * hc - z * hs, x * hc + y * hs, y * hc - x * hs, z * hc + w * hs,
            c * l0 + s * l1, -s * l0 + c * l1, l2)


@njit(cache=True, nogil=True, inline="always")
def _rotor(h, w, x, y, z, l0, l1, l2, i0, i1, i2):
    w, x, y, z, l0, l1, l2 = _turn(0, 0.5 * h * l0 * i0, w, x, y, z, l0, l1, l2)
    w, x, y, z, l0, l1, l2 = _turn(1, 0.5 * h * l1 * i1, w, x, y, z, l0, l1, l2)
    w, x, y, z, l0, l1, l2 = _turn(2, h * l2 * i2, w, x, y, z, l0, l1, l2)
    w, x, y, z, l0, l1, l2 = _turn(1, 0.5 * h * l1 * i1, w, x, y, z, l0, l1, l2)
    return _turn(0, 0.5 * h * l0 * i0, w, x, y, z, l0, l1, l2)


@njit(cache=True, nogil=True)
def integrate(pos, vel, q, lb, sites, alpha, inertia, mass, gamma_t, gamma_r,
              kt, drive, gravity, axial_force, home, escape_radius, dt,
              record_every, isotropic, noise_t, noise_r, out):
    """Advance the state in place, writing ``out.shape[0]`` samples.

    Each sample is taken after ``record_every`` BAOAB steps. ``noise_t``
    holds three standard normals per step for translation. ``noise_r``
    holds three per step for rotation, or three per sample when
    ``isotropic``: a sphere feels no torque and isotropic drag, so its lab
    angular momentum is an Ornstein-Uhlenbeck process advanced exactly once
    per sample, and the orientation is turned about the mean angular
    velocity of the interval. Columns of ``out``: x, y, z (relative to
    ``home``), torsion signal, lab-frame spin rate about z. Returns the
    number of samples written; fewer than requested means the particle
    escaped.
    """
    px, py, pz = pos[0], pos[1], pos[2]
    vx, vy, vz = vel[0], vel[1], vel[2]
    qw, qx, qy, qz = q[0], q[1], q[2], q[3]
    l0, l1, l2 = lb[0], lb[1], lb[2]
    a0 = alpha[0]
    d1 = alpha[1] - alpha[0]
    d2 = alpha[2] - alpha[0]
    fz0 = axial_force - mass * gravity
    i0, i1, i2 = 1.0 / inertia[0], 1.0 / inertia[1], 1.0 / inertia[2]
    half = 0.5 * dt
    kick = half / mass
    ct0, ct1, ct2 = math.exp(-gamma_t[0] * dt), math.exp(-gamma_t[1] * dt), math.exp(-gamma_t[2] * dt)
    st0 = math.sqrt(max(kt / mass * (1.0 - ct0 * ct0), 0.0))
    st1 = math.sqrt(max(kt / mass * (1.0 - ct1 * ct1), 0.0))
    st2 = math.sqrt(max(kt / mass * (1.0 - ct2 * ct2), 0.0))
    h_r = dt * record_every if isotropic else dt
    cr0, cr1, cr2 = math.exp(-gamma_r[0] * h_r), math.exp(-gamma_r[1] * h_r), math.exp(-gamma_r[2] * h_r)
    sr0 = math.sqrt(max(kt * inertia[0] * (1.0 - cr0 * cr0), 0.0))
    sr1 = math.sqrt(max(kt * inertia[1] * (1.0 - cr1 * cr1), 0.0))
    sr2 = math.sqrt(max(kt * inertia[2] * (1.0 - cr2 * cr2), 0.0))
    esc2 = escape_radius * escape_radius

    r00, r01, r02, r10, r11, r12, r20, r21, r22 = _matrix(qw, qx, qy, qz)
    fx, fy, fz, tx, ty, tz = _load(px, py, pz, r01, r11, r21, r02, r12, r22,
                                   sites, a0, d1, d2, drive, fz0)
    n = 0
    written = out.shape[0]
    for sample in range(out.shape[0]):
        if isotropic:
            for inner in range(record_every):
                vx += kick * fx
                vy += kick * fy
                vz += kick * fz
                px += half * vx
                py += half * vy
                pz += half * vz
                # isotropic drag: the body-frame O step equals the lab-frame one
                vx = ct0 * vx + st0 * noise_t[n, 0]
                vy = ct1 * vy + st1 * noise_t[n, 1]
                vz = ct2 * vz + st2 * noise_t[n, 2]
                px += half * vx
                py += half * vy
                pz += half * vz
                fx, fy, fz, tx, ty, tz = _load(px, py, pz, r01, r11, r21, r02, r12, r22,
                                               sites, a0, d1, d2, drive, fz0)
                vx += kick * fx
                vy += kick * fy
                vz += kick * fz
                n += 1
            # lab angular momentum over the whole sample interval
            ll0 = r00 * l0 + r01 * l1 + r02 * l2
            ll1 = r10 * l0 + r11 * l1 + r12 * l2
            ll2 = r20 * l0 + r21 * l1 + r22 * l2
            m0 = cr0 * ll0 + sr0 * noise_r[sample, 0]
            m1 = cr1 * ll1 + sr1 * noise_r[sample, 1]
            m2 = cr2 * ll2 + sr2 * noise_r[sample, 2]
            wx_ = 0.5 * (ll0 + m0) * i0
            wy_ = 0.5 * (ll1 + m1) * i0
            wz_ = 0.5 * (ll2 + m2) * i0
            ang = math.sqrt(wx_ * wx_ + wy_ * wy_ + wz_ * wz_) * h_r
            if ang > 0.0:
                k = math.sin(0.5 * ang) / (ang / h_r)
                cw, cx, cy, cz = math.cos(0.5 * ang), wx_ * k, wy_ * k, wz_ * k
                qw, qx, qy, qz = (cw * qw - cx * qx - cy * qy - cz * qz,
                                  cw * qx + cx * qw + cy * qz - cz * qy,
                                  cw * qy - cx * qz + cy * qw + cz * qx,
                                  cw * qz + cx * qy - cy * qx + cz * qw)
            r00, r01, r02, r10, r11, r12, r20, r21, r22 = _matrix(qw, qx, qy, qz)
            l0 = r00 * m0 + r10 * m1 + r20 * m2
            l1 = r01 * m0 + r11 * m1 + r21 * m2
            l2 = r02 * m0 + r12 * m1 + r22 * m2
        else:
            for inner in range(record_every):
                # B; the rotation still matches the last force evaluation
                vx += kick * fx
                vy += kick * fy
                vz += kick * fz
                l0 += half * (r00 * tx + r10 * ty + r20 * tz)
                l1 += half * (r01 * tx + r11 * ty + r21 * tz)
                l2 += half * (r02 * tx + r12 * ty + r22 * tz)
                # A
                px += half * vx
                py += half * vy
                pz += half * vz
                qw, qx, qy, qz, l0, l1, l2 = _rotor(half, qw, qx, qy, qz, l0, l1, l2, i0, i1, i2)
                # O, drag tensor resolved in the body frame
                r00, r01, r02, r10, r11, r12, r20, r21, r22 = _matrix(qw, qx, qy, qz)
                b0 = r00 * vx + r10 * vy + r20 * vz
                b1 = r01 * vx + r11 * vy + r21 * vz
                b2 = r02 * vx + r12 * vy + r22 * vz
                b0 = ct0 * b0 + st0 * noise_t[n, 0]
                b1 = ct1 * b1 + st1 * noise_t[n, 1]
                b2 = ct2 * b2 + st2 * noise_t[n, 2]
                l0 = cr0 * l0 + sr0 * noise_r[n, 0]
                l1 = cr1 * l1 + sr1 * noise_r[n, 1]
                l2 = cr2 * l2 + sr2 * noise_r[n, 2]
                vx = r00 * b0 + r01 * b1 + r02 * b2
                vy = r10 * b0 + r11 * b1 + r12 * b2
                vz = r20 * b0 + r21 * b1 + r22 * b2
                # A
                px += half * vx
                py += half * vy
                pz += half * vz
                qw, qx, qy, qz, l0, l1, l2 = _rotor(half, qw, qx, qy, qz, l0, l1, l2, i0, i1, i2)
                inv_norm = 1.0 / math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
                qw *= inv_norm
                qx *= inv_norm
                qy *= inv_norm
                qz *= inv_norm
                # B
                r00, r01, r02, r10, r11, r12, r20, r21, r22 = _matrix(qw, qx, qy, qz)
                fx, fy, fz, tx, ty, tz = _load(px, py, pz, r01, r11, r21, r02, r12, r22,
                                               sites, a0, d1, d2, drive, fz0)
                vx += kick * fx
                vy += kick * fy
                vz += kick * fz
                l0 += half * (r00 * tx + r10 * ty + r20 * tz)
                l1 += half * (r01 * tx + r11 * ty + r21 * tz)
                l2 += half * (r02 * tx + r12 * ty + r22 * tz)
                n += 1
        ox = px - home[0]
        oy = py - home[1]
        oz = pz - home[2]
        out[sample, 0] = ox
        out[sample, 1] = oy
        out[sample, 2] = oz
        out[sample, 3] = (d1 * r01 * r11 + d2 * r02 * r12) / (a0 + (d1 + d2) / 3.0)
        out[sample, 4] = r20 * l0 * i0 + r21 * l1 * i1 + r22 * l2 * i2
        if ox * ox + oy * oy + oz * oz > esc2:
            written = sample + 1
            break
    pos[0], pos[1], pos[2] = px, py, pz
    vel[0], vel[1], vel[2] = vx, vy, vz
    q[0], q[1], q[2], q[3] = qw, qx, qy, qz
    lb[0], lb[1], lb[2] = l0, l1, l2
    return written
