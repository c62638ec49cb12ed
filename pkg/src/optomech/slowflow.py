"""Reduced dynamics of the slowly varying mechanical amplitude.

The mechanical mean amplitude is written as ``beta(t) = beta0 + A_b(t)
exp(-i nu t)`` with a carrier ``nu`` equal to the modulation frequency
while the pump modulation is on (``regime="stationary"``) and to
``omega_m`` after it is switched off (``"turnoff"``: pump and modulation
off, probe only; ``"appendix"``: modulation off, pump kept on).

Everything here is closed form or a small ODE and works in any
consistent unit system.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import SystemParams

REGIMES = ("stationary", "turnoff", "appendix")
MAX_TRUNC = 4096


class TruncationError(RuntimeError):
    """The Bessel band sum has not converged at the largest allowed order."""


class FiniteTimeSingularity(ValueError):
    """Nonlinear anti-damping blows the amplitude up within the requested time."""


class NewtonError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (residual {residual:.3e})")
        self.residual = residual


# ---------------------------------------------------------------------------
# Bessel functions of integer order


def bessel_jn(n_max: int, x: float) -> np.ndarray:
    """``J_0(x) .. J_{n_max}(x)`` by Miller's backward recurrence.

    Normalised with ``J_0 + 2 sum_k J_{2k} = 1``.  Accurate to a few ulp
    of ``max |J_n|`` for any real ``x``.
    """
    n_max = int(n_max)
    if n_max < 0:
        raise ValueError("n_max must be non-negative")
    out = np.zeros(n_max + 1)
    if x == 0.0:
        out[0] = 1.0
        return out
    sign = 1.0
    if x < 0:
        x, sign = -x, -1.0
    if x < 1e-8:
        # two-term series; the recurrence would overflow on 2/x
        h = 0.5 * x
        term = 1.0
        for n in range(n_max + 1):
            out[n] = term * (1.0 - h * h / (n + 1))
            term *= h / (n + 1)
        if sign < 0:
            out[1::2] *= -1.0
        return out
    top = max(n_max, int(x))
    start = top + 20 + int(math.sqrt(40.0 * (top + 1)))
    start += start % 2
    j_next, j_cur = 0.0, 1e-300
    norm = 0.0
    two_over_x = 2.0 / x
    for k in range(start, 0, -1):
        j_prev = k * two_over_x * j_cur - j_next
        j_next, j_cur = j_cur, j_prev
        if k - 1 <= n_max:
            out[k - 1] = j_cur
        if (k - 1) % 2 == 0 and k - 1 > 0:
            norm += 2.0 * j_cur
        if abs(j_cur) > 1e250:
            j_cur *= 1e-250
            j_next *= 1e-250
            out *= 1e-250
            norm *= 1e-250
        if k == 1:
            norm += j_cur
        # k-1 == n for stored value; loop ends with j_cur == J_0 (unnormalised)
    out /= norm
    if sign < 0:
        out[1::2] *= -1.0
    return out


def bessel_band(n_lo: int, n_hi: int, x: float) -> np.ndarray:
    """``J_n(x)`` for ``n_lo <= n <= n_hi`` (negative orders allowed)."""
    m = max(abs(n_lo), abs(n_hi))
    pos = bessel_jn(m, x)
    n = np.arange(n_lo, n_hi + 1)
    vals = pos[np.abs(n)]
    neg = n < 0
    vals[neg] *= np.where(np.abs(n[neg]) % 2 == 1, -1.0, 1.0)
    return vals


# ---------------------------------------------------------------------------
# static shift


def beta0_approx(params: SystemParams, include_pump: bool = True) -> complex:
    """Approximate static mechanical displacement (probe only if ``include_pump`` is False)."""
    w, gm = params.omega_m, params.gamma_m
    modes = (0, 1) if include_pump else (1,)
    s = sum(params.g[j] * params.E[j] ** 2 / (params.kappa[j] ** 2 + params.delta_eff[j] ** 2)
            for j in modes)
    return complex(w, gm) / (w * w + gm * gm) * s


def _im_rot_sq(beta, phi):
    return (beta * complex(math.cos(phi), math.sin(phi))).imag ** 2


def mechanical_detuning(params: SystemParams, regime: str = "stationary",
                        p_phi_sq: float | None = 1.0) -> float:
    """Mechanical detuning from the carrier, before radiation-pressure corrections.

    ``p_phi_sq`` is the fluctuation variance of the rotated momentum; the
    default 1 is that of a pure coherent state.  It only enters the
    stationary regime.
    """
    b, w, phi = params.beta_nl, params.omega_m, params.phi_nl
    if regime == "stationary":
        extra = 0.0 if p_phi_sq is None else p_phi_sq
        return w - params.delta_m + b * w * (4.0 * _im_rot_sq(beta0_approx(params), phi) + extra)
    if regime == "turnoff":
        return 4.0 * b * w * _im_rot_sq(beta0_approx(params, include_pump=False), phi)
    if regime == "appendix":
        # static shift is unchanged while the pump stays on
        return 4.0 * b * w * _im_rot_sq(beta0_approx(params), phi)
    raise ValueError(f"unknown regime {regime!r}")


# ---------------------------------------------------------------------------
# radiation pressure band sums


def _regime_setup(params: SystemParams, regime: str):
    if regime == "stationary":
        return params.delta_m, (0, 1), params.E_m
    if regime == "turnoff":
        return params.omega_m, (1,), 0.0
    if regime == "appendix":
        return params.omega_m, (0, 1), 0.0
    raise ValueError(f"unknown regime {regime!r}")


@dataclass(frozen=True)
class BesselForce:
    value: complex
    truncation: float   # magnitude of the outermost retained band
    leading: float      # largest single band magnitude
    trunc_N: int


def _band_terms(g, E, E_m, L, nu, xi, theta, N, drop_em2):
    n = np.arange(-N - 2, N + 3)
    J = bessel_band(-N - 2, N + 2, -xi)
    idx = np.arange(2, 2 * N + 3)   # positions of n = -N .. N
    nn = n[idx]
    Jn, Jn1, Jn2 = J[idx], J[idx + 1], J[idx + 2]
    eth = complex(math.cos(theta), math.sin(theta))
    num = E * E * eth * Jn * Jn1
    if E_m:
        num = num + E * E_m * (eth * eth * Jn * Jn2 + Jn1 * Jn1)
        if not drop_em2:
            num = num + E_m * E_m * eth * Jn1 * Jn2
    den = (1j * nu * nn - L) * (-1j * nu * (nn + 1) - np.conj(L))
    return nn, 1j * g * num / den


def bessel_force(params: SystemParams, A: complex, regime: str = "stationary",
                 trunc_N: int | None = None, drop_em2: bool = False,
                 modes=None) -> BesselForce:
    """Quasi-resonant radiation-pressure force on the slow amplitude.

    Sums the ``n - n' = -1`` band products of the Jacobi-Anger expansion
    of the intracavity fields for every driven mode.  ``drop_em2`` removes
    the terms quadratic in the modulation drive, matching the third-order
    coefficients of :func:`rp_coefficients`.
    """
    nu, default_modes, E_m = _regime_setup(params, regime)
    modes = default_modes if modes is None else modes
    amp = abs(A)
    theta = math.atan2(A.imag, A.real) if amp > 0 else 0.0
    xis = [2.0 * params.g[j] * amp / nu for j in modes]
    auto = trunc_N is None
    N = int(math.ceil(4 * max(xis, default=0.0))) + 30 if auto else int(trunc_N)
    if N < 1:
        raise ValueError("trunc_N must be >= 1")
    while True:
        total = 0.0j
        edge = 0.0
        lead = 0.0
        for j, xi in zip(modes, xis):
            L = complex(-params.kappa[j], params.delta_eff[j])
            em = E_m if j == 0 else 0.0
            nn, terms = _band_terms(params.g[j], params.E[j], em, L, nu, xi, theta, N, drop_em2)
            # pair n with -(n+1): these cancel identically for a resonant mode
            pos, neg = terms[nn >= 0], terms[nn < 0][::-1]
            total += (pos[: neg.size] + neg).sum() + pos[neg.size:].sum()
            mag = np.abs(terms)
            lead = max(lead, float(mag.max()))
            edge = max(edge, float(mag[0]), float(mag[-1]))
        scale = max(abs(total), lead)
        if edge <= 1e-8 * scale or scale == 0.0:
            return BesselForce(total, edge, lead, N)
        if N >= MAX_TRUNC:
            raise TruncationError(
                f"band sum not converged at trunc_N={N}: edge {edge:.3e} vs {scale:.3e}")
        if not auto:
            # an explicit truncation is honoured unless it is hopeless
            return BesselForce(total, edge, lead, N)
        N = min(2 * N, MAX_TRUNC)


# ---------------------------------------------------------------------------
# third-order coefficients


@dataclass(frozen=True)
class RPCoefficients:
    """Radiation-pressure expansion coefficients and effective mechanical response."""

    c0: complex
    c1: complex
    c2: complex
    c2m: complex
    c3: complex
    gamma_eff: float
    delta_eff: float
    regime: str
    nu: float
    delta_m_bare: float

    @property
    def Gamma(self) -> complex:
        return complex(self.gamma_eff, self.delta_eff)


def _D(n, nu, kappa, delta):
    L = complex(-kappa, delta)
    return (1j * nu * n - L) * (-1j * nu * (n + 1) - L.conjugate())


def rp_coefficients(params: SystemParams, regime: str = "stationary",
                    form: str = "series", p_phi_sq: float | None = 1.0) -> RPCoefficients:
    """Coefficients of the third-order expansion of the radiation-pressure force.

    ``F = c0 + c1 A + c2 A^2 + c2m |A|^2 + c3 A |A|^2`` with terms
    quadratic in the modulation drive neglected in ``c1`` and ``c3``.

    ``form="series"`` (default) gives the exact small-amplitude expansion
    of :func:`bessel_force`.  ``form="closed"`` uses alternative closed
    forms for ``c2``, ``c2m`` and ``c3``, which differ from that expansion
    at second and third order.
    """
    if form not in ("series", "closed"):
        raise ValueError("form must be 'series' or 'closed'")
    nu, modes, E_m = _regime_setup(params, regime)
    k1, d1, g1, E1 = params.kappa[0], params.delta_eff[0], params.g[0], params.E[0]
    c0 = c2 = c2m = 0j
    if regime == "stationary" and E_m and 0 in modes:
        c0 = 1j * g1 * E1 * E_m / (complex(k1, d1) * complex(k1, -(d1 + nu)))
        if form == "closed":
            c2m = (-2j * g1 ** 3 * E1 * E_m * complex(-k1, d1 + nu)
                   / (nu ** 2 * complex(-k1, d1) * complex(-k1, d1 + 2 * nu) * complex(k1, d1 + nu)))
            c2 = c2m / 2 - g1 ** 2 / nu ** 2 * c0
        else:
            c2m = (-2.0 * g1 ** 2 / nu ** 2 * c0
                   + 1j * g1 ** 3 * E1 * E_m / nu ** 2
                   * (1 / _D(0, nu, k1, d1) + 1 / _D(-2, nu, k1, d1)))
            c2 = c2m / 2
    c1 = c3 = 0j
    for j in modes:
        k, d, gj, Ej = params.kappa[j], params.delta_eff[j], params.g[j], params.E[j]
        if gj == 0 or Ej == 0:
            continue
        c1 += 1j * gj ** 2 * Ej ** 2 / nu * (1 / _D(-1, nu, k, d) - 1 / _D(0, nu, k, d))
        outer = 1 / _D(-2, nu, k, d) - 1 / _D(1, nu, k, d)
        if form == "series":
            outer += 3.0 * (1 / _D(0, nu, k, d) - 1 / _D(-1, nu, k, d))
        c3 += 1j * gj ** 4 * Ej ** 2 / (2 * nu ** 3) * outer
    dm = mechanical_detuning(params, regime, p_phi_sq)
    return RPCoefficients(c0, c1, c2, c2m, c3, params.gamma_m - c1.real, dm - c1.imag,
                          regime, nu, dm)


def rp_polynomial(coeffs: RPCoefficients, A):
    A = np.asarray(A, dtype=complex)
    a2 = np.abs(A) ** 2
    return coeffs.c0 + coeffs.c1 * A + coeffs.c2 * A * A + coeffs.c2m * a2 + coeffs.c3 * A * a2


# ---------------------------------------------------------------------------
# slow amplitude equations


def slow_rhs(regime: str, A, t, params: SystemParams, coeffs: RPCoefficients | None = None,
             exact: bool = False):
    """Time derivative of the slow amplitude.

    ``exact=True`` replaces the third-order polynomial by the full Bessel
    band sum (stationary and appendix regimes).
    """
    w, b = params.omega_m, params.beta_nl
    A = complex(A)
    kerr = -1j * b * w * abs(A) ** 2 * A
    if regime == "turnoff":
        dm = mechanical_detuning(params, "turnoff")
        return complex(-params.gamma_m, -dm) * A + kerr
    if coeffs is None:
        coeffs = rp_coefficients(params, regime)
    if exact:
        force = bessel_force(params, A, regime).value
        return complex(-params.gamma_m, -coeffs.delta_m_bare) * A + kerr + force
    if regime == "stationary":
        a2 = abs(A) ** 2
        return (-coeffs.Gamma * A + coeffs.c0 + coeffs.c2 * A * A + coeffs.c2m * a2
                + (coeffs.c3 - 1j * b * w) * a2 * A)
    if regime == "appendix":
        return -coeffs.Gamma * A + (coeffs.c3 - 1j * b * w) * abs(A) ** 2 * A
    raise ValueError(f"unknown regime {regime!r}")


@dataclass(frozen=True)
class SteadyAmplitude:
    linear: complex        # c0 / Gamma
    lowest_order: complex  # first nonlinear correction included
    fixed_point: complex   # stationary point of the third-order equation
    iterations: int
    residual: float


def steady_amplitude(params: SystemParams, coeffs: RPCoefficients | None = None,
                     max_iter: int = 100) -> SteadyAmplitude:
    """Stationary slow amplitude under pump plus modulation."""
    if coeffs is None:
        coeffs = rp_coefficients(params, "stationary")
    G = coeffs.Gamma
    if G == 0:
        raise ZeroDivisionError("effective mechanical response Gamma vanishes")
    c0, c2, c2m = coeffs.c0, coeffs.c2, coeffs.c2m
    k3 = coeffs.c3 - 1j * params.beta_nl * params.omega_m
    a_lin = c0 / G
    a_low = a_lin + c2 / G * a_lin ** 2 + abs(a_lin) ** 2 * (c2m / G + k3 / G * a_lin)

    def F(A):
        a2 = abs(A) ** 2
        return -G * A + c0 + c2 * A * A + c2m * a2 + k3 * a2 * A

    def jac(A):
        FA = -G + 2 * c2 * A + c2m * A.conjugate() + 2 * k3 * abs(A) ** 2
        FAc = c2m * A + k3 * A * A
        s, d = FA + FAc, 1j * (FA - FAc)
        return np.array([[s.real, d.real], [s.imag, d.imag]])

    scale = abs(G * a_lin) + abs(c0)
    A = a_lin
    r = abs(F(A))
    it = 0
    while r > 1e-13 * scale:
        if it >= max_iter:
            raise NewtonError("steady amplitude Newton iteration did not converge", r)
        f = F(A)
        step = np.linalg.solve(jac(A), [-f.real, -f.imag])
        lam = 1.0
        while True:
            trial = A + lam * complex(step[0], step[1])
            rt = abs(F(trial))
            if rt < r or lam < 1e-6:
                break
            lam *= 0.5
        A, r = trial, rt
        it += 1
    return SteadyAmplitude(a_lin, a_low, A, it, r / scale if scale else r)


# ---------------------------------------------------------------------------
# free decays


def analytic_decay(A0, t, params: SystemParams):
    """Slow amplitude after pump and modulation switch-off (resonant probe)."""
    t = np.asarray(t, dtype=float)
    g, w, b = params.gamma_m, params.omega_m, params.beta_nl
    if g <= 0:
        raise ValueError("gamma_m must be positive")
    dm = mechanical_detuning(params, "turnoff")
    a2 = abs(A0) ** 2
    phase = -b * w / (2 * g) * a2 * (-np.expm1(-2 * g * t))
    return A0 * np.exp(complex(-g, -dm) * t) * np.exp(1j * phase)


def _singular_check(x):
    if np.any(1.0 + np.asarray(x) <= 0):
        raise FiniteTimeSingularity(
            "nonlinear anti-damping drives the amplitude to a finite-time singularity")


def _appendix_log(A0, t, coeffs):
    g = coeffs.gamma_eff
    u = -np.expm1(-2 * g * np.asarray(t, dtype=float))
    a2 = abs(A0) ** 2
    R = coeffs.c3.real
    x = -a2 * R / g * u   # denominator is 1 + x
    _singular_check(x)
    # log1p(x)/R without cancellation as R -> 0
    small = np.abs(x) < 1e-8
    h = np.where(small, 1.0 - x / 2 + x * x / 3, np.log1p(np.where(small, 0.0, x)) / np.where(small, 1.0, x))
    log_over_R = -a2 * u / g * h
    return x, log_over_R


def appendix_decay(A0, t, params: SystemParams, coeffs: RPCoefficients | None = None):
    """Slow amplitude after the modulation alone is switched off."""
    if coeffs is None:
        coeffs = rp_coefficients(params, "appendix")
    t = np.asarray(t, dtype=float)
    x, log_over_R = _appendix_log(A0, t, coeffs)
    K = coeffs.c3.imag - params.beta_nl * params.omega_m
    # denominator^(1/2 + iK/2R) = exp((1/2) log1p(x) + (iK/2) log1p(x)/R)
    expo = 0.5 * np.log1p(x) + 0.5j * K * log_over_R
    return A0 * np.exp(-coeffs.Gamma * t) * np.exp(-expo)


def instantaneous_frequency(regime: str, t, A0_sq: float, params: SystemParams,
                            coeffs: RPCoefficients | None = None):
    """Amplitude-dependent oscillation frequency during a free decay."""
    t = np.asarray(t, dtype=float)
    w, b = params.omega_m, params.beta_nl
    if regime == "turnoff":
        dm = mechanical_detuning(params, "turnoff")
        return dm + w * (1.0 + b * np.exp(-2 * params.gamma_m * t) * A0_sq)
    if regime == "appendix":
        if coeffs is None:
            coeffs = rp_coefficients(params, "appendix")
        g = coeffs.gamma_eff
        x = -A0_sq * coeffs.c3.real / g * (-np.expm1(-2 * g * t))
        _singular_check(x)
        return (w + coeffs.delta_eff
                + (b * w - coeffs.c3.imag) * np.exp(-2 * g * t) * A0_sq / (1.0 + x))
    raise ValueError("instantaneous frequency is defined for 'turnoff' and 'appendix'")


def thermal_relax(n0, n_bath, gamma_m, t):
    """Mean phonon number relaxing from ``n0`` towards the bath occupancy."""
    e = np.exp(-2.0 * gamma_m * np.asarray(t, dtype=float))
    return n0 * e + n_bath * (1.0 - e)


def coefficient_report(params: SystemParams, form: str = "series") -> dict:
    """JSON-ready summary of the stationary-regime coefficients."""
    co = rp_coefficients(params, "stationary", form=form)
    st = steady_amplitude(params, co)

    def pair(z):
        z = complex(z)
        return [z.real, z.imag]

    return {
        "c0": pair(co.c0), "c1": pair(co.c1), "c2": pair(co.c2), "c2m": pair(co.c2m),
        "c3": pair(co.c3), "gamma_eff": co.gamma_eff, "delta_eff": co.delta_eff,
        "beta0": pair(beta0_approx(params)),
        "beta0_prime": pair(beta0_approx(params, include_pump=False)),
        "A_b_st_linear": pair(st.linear), "A_b_st_fixedpoint": pair(st.fixed_point),
    }
