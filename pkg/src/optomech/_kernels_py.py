"""Pure-NumPy SDE stepping kernel, vectorised over trajectories.

Mirrors ``_kernels.pyx`` operation for operation; used when the compiled
extension is unavailable or explicitly requested.

Coefficient vector layout (shared with the compiled kernel)::

    0 kappa1  1 kappa2  2 det1  3 det2  4 g1  5 g2  6 gamma  7 omega
    8 beta_nl  9 phi  10 dt  11 pdh flag  12 divergence guard on |b|
    13/14 Re/Im exp(L_b dt)  15/16 Re/Im phi1(L_b dt)

Noise columns (already scaled to increments)::

    0,1 pump in-port  2,3 pump ex-port  4,5 probe in-port  6,7 probe ex-port  8,9 mechanics
"""
from __future__ import annotations

import numpy as np

N_COEF = 17
N_NOISE = 10


def phi1(z):
    """``(exp(z) - 1)/z`` with a series near zero."""
    z = np.asarray(z, dtype=complex)
    small = np.abs(z) < 1e-5
    zs = np.where(small, 1.0, z)
    return np.where(small, 1.0 + z / 2 + z * z / 6, np.expm1(zs) / zs)


def _mech_force(b, a1, a2, c):
    bnl = c[8]
    s, co = np.sin(c[9]), np.cos(c[9])
    pi = 2.0 * (b.real * s + b.imag * co)
    nl = c[7] * bnl / 3.0 * pi ** 3 * (co - 1j * s)
    return nl + 1j * (c[4] * (a1.real ** 2 + a1.imag ** 2) + c[5] * (a2.real ** 2 + a2.imag ** 2))


def step_chunk(state, noise, drive1, drive2, coef, pdh_buf, pdh_sum, pdh_idx,
               rec_every, rec, diverged, n_done, method=0, nthreads=1):
    """Advance all trajectories by ``noise.shape[1]`` steps.

    ``drive1``/``drive2`` hold the drive at every grid point of the chunk
    including its right end.  Returns the updated ring-buffer position.
    """
    c = np.asarray(coef, dtype=float)
    ntraj, nsteps, _ = noise.shape
    dt = c[10]
    pdh = c[11] != 0.0
    guard2 = c[12] ** 2
    eb = complex(c[13], c[14])
    p1b = complex(c[15], c[16])
    W = pdh_buf.shape[1]
    a1 = state[:, 0].copy()
    a2 = state[:, 1].copy()
    b = state[:, 2].copy()
    alive = diverged < 0
    for n in range(nsteps):
        if n % rec_every == 0:
            r = n // rec_every
            rec[:, r, 0] = a1
            rec[:, r, 1] = a2
            rec[:, r, 2] = b
        xi = noise[:, n, :]
        w1 = (xi[:, 0] + 1j * xi[:, 1]) + (xi[:, 2] + 1j * xi[:, 3])
        w2 = (xi[:, 4] + 1j * xi[:, 5]) + (xi[:, 6] + 1j * xi[:, 7])
        wb = xi[:, 8] + 1j * xi[:, 9]
        x = 2.0 * b.real
        if pdh:
            old = pdh_buf[:, pdh_idx].copy()
            pdh_buf[:, pdh_idx] = x
            pdh_sum += x - old
            pdh_idx += 1
            if pdh_idx == W:
                pdh_idx = 0
                pdh_sum[:] = pdh_buf.sum(axis=1)
            xp = pdh_sum / W
        else:
            xp = 0.0
        if method == 0:
            z1 = (-c[0] + 1j * (c[2] + c[4] * (x - xp))) * dt
            z2 = (-c[1] + 1j * (c[3] + c[5] * (x - xp))) * dt
            f = _mech_force(b, a1, a2, c)
            n1 = np.exp(z1) * a1 + phi1(z1) * dt * drive1[n] + w1
            n2 = np.exp(z2) * a2 + phi1(z2) * dt * drive2[n] + w2
            nb = eb * b + p1b * dt * f + wb
        else:
            def rhs(a1_, a2_, b_, k):
                xx = 2.0 * b_.real - xp
                d1 = (-c[0] + 1j * (c[2] + c[4] * xx)) * a1_ + drive1[k]
                d2 = (-c[1] + 1j * (c[3] + c[5] * xx)) * a2_ + drive2[k]
                db = (-c[6] - 1j * c[7]) * b_ + _mech_force(b_, a1_, a2_, c)
                return d1, d2, db

            k1 = rhs(a1, a2, b, n)
            p1_, p2_, pb_ = a1 + dt * k1[0] + w1, a2 + dt * k1[1] + w2, b + dt * k1[2] + wb
            k2 = rhs(p1_, p2_, pb_, n + 1)
            n1 = a1 + 0.5 * dt * (k1[0] + k2[0]) + w1
            n2 = a2 + 0.5 * dt * (k1[1] + k2[1]) + w2
            nb = b + 0.5 * dt * (k1[2] + k2[2]) + wb
        bad = alive & ~(np.isfinite(nb) & np.isfinite(n1) & np.isfinite(n2)
                        & (nb.real ** 2 + nb.imag ** 2 <= guard2))
        if bad.any():
            diverged[bad] = n_done + n
            alive &= ~bad
        a1 = np.where(alive, n1, a1)
        a2 = np.where(alive, n2, a2)
        b = np.where(alive, nb, b)
    state[:, 0] = a1
    state[:, 1] = a2
    state[:, 2] = b
    return pdh_idx
