# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled SDE stepping kernel.  Same contract as ``_kernels_py.step_chunk``."""

from cython.parallel cimport prange
from libc.math cimport exp, cos, sin, expm1, isfinite, fabs, sqrt

import numpy as np


cdef inline void _cexp(double re, double im, double* ore, double* oim) noexcept nogil:
    cdef double m = exp(re)
    ore[0] = m * cos(im)
    oim[0] = m * sin(im)


cdef inline void _phi1(double re, double im, double* ore, double* oim) noexcept nogil:
    # (exp(z) - 1)/z
    cdef double er, ei, d, nr, ni, zr2, zi2
    if sqrt(re * re + im * im) < 1e-5:
        # 1 + z/2 + z^2/6
        zr2 = re * re - im * im
        zi2 = 2.0 * re * im
        ore[0] = 1.0 + re / 2.0 + zr2 / 6.0
        oim[0] = im / 2.0 + zi2 / 6.0
        return
    # expm1(z) = expm1(re) cos(im) - 2 sin^2(im/2) + i exp(re) sin(im)
    nr = expm1(re) * cos(im) - 2.0 * sin(im / 2.0) * sin(im / 2.0)
    ni = exp(re) * sin(im)
    d = re * re + im * im
    ore[0] = (nr * re + ni * im) / d
    oim[0] = (ni * re - nr * im) / d


cdef inline void _mech(double br, double bi, double a1r, double a1i, double a2r, double a2i,
                       const double[::1] c, double sphi, double cphi,
                       double* fr, double* fi) noexcept nogil:
    cdef double pi = 2.0 * (br * sphi + bi * cphi)
    cdef double amp = c[7] * c[8] / 3.0 * pi * pi * pi
    fr[0] = amp * cphi
    fi[0] = -amp * sphi + c[4] * (a1r * a1r + a1i * a1i) + c[5] * (a2r * a2r + a2i * a2i)


def step_chunk(complex[:, ::1] state, const double[:, :, ::1] noise,
               const complex[::1] drive1, const complex[::1] drive2,
               const double[::1] coef, double[:, ::1] pdh_buf, double[::1] pdh_sum,
               Py_ssize_t pdh_idx, Py_ssize_t rec_every, complex[:, :, ::1] rec,
               long[::1] diverged, long n_done, int method=0, int nthreads=1):
    cdef Py_ssize_t ntraj = noise.shape[0]
    cdef Py_ssize_t nsteps = noise.shape[1]
    cdef Py_ssize_t W = pdh_buf.shape[1]
    cdef Py_ssize_t k
    cdef Py_ssize_t end_idx = (pdh_idx + nsteps) % W
    if ntraj == 0:
        return pdh_idx
    if nthreads < 1:
        nthreads = 1
    for k in prange(ntraj, nogil=True, num_threads=nthreads, schedule="static"):
        _one(k, state, noise, drive1, drive2, coef, pdh_buf, pdh_sum, pdh_idx,
             rec_every, rec, diverged, n_done, method)
    return end_idx


cdef void _one(Py_ssize_t k, complex[:, ::1] state, const double[:, :, ::1] noise,
               const complex[::1] drive1, const complex[::1] drive2,
               const double[::1] c, double[:, ::1] pdh_buf, double[::1] pdh_sum,
               Py_ssize_t idx, Py_ssize_t rec_every, complex[:, :, ::1] rec,
               long[::1] diverged, long n_done, int method) noexcept nogil:
    cdef Py_ssize_t nsteps = noise.shape[1]
    cdef Py_ssize_t W = pdh_buf.shape[1]
    cdef Py_ssize_t n, m, r
    cdef double dt = c[10]
    cdef bint pdh = c[11] != 0.0
    cdef double guard2 = c[12] * c[12]
    cdef double sphi = sin(c[9]), cphi = cos(c[9])
    cdef double a1r = state[k, 0].real, a1i = state[k, 0].imag
    cdef double a2r = state[k, 1].real, a2i = state[k, 1].imag
    cdef double br = state[k, 2].real, bi = state[k, 2].imag
    cdef double x, xp, old, s
    cdef double zr, zi, er, ei, pr, pi_, fr, fi
    cdef double n1r, n1i, n2r, n2i, nbr, nbi
    cdef double d1r, d1i, d2r, d2i, dbr, dbi, q1r, q1i, q2r, q2i, qbr, qbi
    cdef double w1r, w1i, w2r, w2i, wbr, wbi, xx
    cdef double e1r, e1i, e2r, e2i
    if diverged[k] >= 0:
        return
    for n in range(nsteps):
        if n % rec_every == 0:
            r = n // rec_every
            rec[k, r, 0] = a1r + 1j * a1i
            rec[k, r, 1] = a2r + 1j * a2i
            rec[k, r, 2] = br + 1j * bi
        w1r = noise[k, n, 0] + noise[k, n, 2]
        w1i = noise[k, n, 1] + noise[k, n, 3]
        w2r = noise[k, n, 4] + noise[k, n, 6]
        w2i = noise[k, n, 5] + noise[k, n, 7]
        wbr = noise[k, n, 8]
        wbi = noise[k, n, 9]
        x = 2.0 * br
        xp = 0.0
        if pdh:
            old = pdh_buf[k, idx]
            pdh_buf[k, idx] = x
            pdh_sum[k] = pdh_sum[k] + x - old
            idx = idx + 1
            if idx == W:
                idx = 0
                s = 0.0
                for m in range(W):
                    s = s + pdh_buf[k, m]
                pdh_sum[k] = s
            xp = pdh_sum[k] / W
        e1r = drive1[n].real
        e1i = drive1[n].imag
        e2r = drive2[n].real
        e2i = drive2[n].imag
        if method == 0:
            _mech(br, bi, a1r, a1i, a2r, a2i, c, sphi, cphi, &fr, &fi)
            # pump
            zr = -c[0] * dt
            zi = (c[2] + c[4] * (x - xp)) * dt
            _cexp(zr, zi, &er, &ei)
            _phi1(zr, zi, &pr, &pi_)
            n1r = er * a1r - ei * a1i + (pr * e1r - pi_ * e1i) * dt + w1r
            n1i = er * a1i + ei * a1r + (pr * e1i + pi_ * e1r) * dt + w1i
            # probe
            zr = -c[1] * dt
            zi = (c[3] + c[5] * (x - xp)) * dt
            _cexp(zr, zi, &er, &ei)
            _phi1(zr, zi, &pr, &pi_)
            n2r = er * a2r - ei * a2i + (pr * e2r - pi_ * e2i) * dt + w2r
            n2i = er * a2i + ei * a2r + (pr * e2i + pi_ * e2r) * dt + w2i
            # mechanics
            nbr = c[13] * br - c[14] * bi + (c[15] * fr - c[16] * fi) * dt + wbr
            nbi = c[13] * bi + c[14] * br + (c[15] * fi + c[16] * fr) * dt + wbi
        else:
            xx = x - xp
            _mech(br, bi, a1r, a1i, a2r, a2i, c, sphi, cphi, &fr, &fi)
            zi = c[2] + c[4] * xx
            d1r = -c[0] * a1r - zi * a1i + e1r
            d1i = -c[0] * a1i + zi * a1r + e1i
            zi = c[3] + c[5] * xx
            d2r = -c[1] * a2r - zi * a2i + e2r
            d2i = -c[1] * a2i + zi * a2r + e2i
            dbr = -c[6] * br + c[7] * bi + fr
            dbi = -c[6] * bi - c[7] * br + fi
            q1r = a1r + dt * d1r + w1r
            q1i = a1i + dt * d1i + w1i
            q2r = a2r + dt * d2r + w2r
            q2i = a2i + dt * d2i + w2i
            qbr = br + dt * dbr + wbr
            qbi = bi + dt * dbi + wbi
            xx = 2.0 * qbr - xp
            _mech(qbr, qbi, q1r, q1i, q2r, q2i, c, sphi, cphi, &fr, &fi)
            e1r = drive1[n + 1].real
            e1i = drive1[n + 1].imag
            e2r = drive2[n + 1].real
            e2i = drive2[n + 1].imag
            zi = c[2] + c[4] * xx
            n1r = a1r + 0.5 * dt * (d1r + (-c[0] * q1r - zi * q1i + e1r)) + w1r
            n1i = a1i + 0.5 * dt * (d1i + (-c[0] * q1i + zi * q1r + e1i)) + w1i
            zi = c[3] + c[5] * xx
            n2r = a2r + 0.5 * dt * (d2r + (-c[1] * q2r - zi * q2i + e2r)) + w2r
            n2i = a2i + 0.5 * dt * (d2i + (-c[1] * q2i + zi * q2r + e2i)) + w2i
            nbr = br + 0.5 * dt * (dbr + (-c[6] * qbr + c[7] * qbi + fr)) + wbr
            nbi = bi + 0.5 * dt * (dbi + (-c[6] * qbi - c[7] * qbr + fi)) + wbi
        if not (isfinite(n1r) and isfinite(n1i) and isfinite(n2r) and isfinite(n2i)
                and isfinite(nbr) and isfinite(nbi)) or nbr * nbr + nbi * nbi > guard2:
            diverged[k] = n_done + n
            break
        a1r = n1r
        a1i = n1i
        a2r = n2r
        a2i = n2i
        br = nbr
        bi = nbi
    state[k, 0] = a1r + 1j * a1i
    state[k, 1] = a2r + 1j * a2i
    state[k, 2] = br + 1j * bi
