import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special
from scipy.integrate import solve_ivp

from optomech import slowflow as sf


def averaged_force(p, A, regime):
    """Radiation-pressure force on the slow amplitude from the fast cavity dynamics.

    Integrates each driven cavity with the mechanical displacement frozen at
    ``A exp(-i nu t)`` until the periodic regime is reached, then averages
    ``i g |a|^2 exp(i nu t)`` over one period.
    """
    nu = p.delta_m if regime == "stationary" else p.omega_m
    E_m = p.E_m if regime == "stationary" else 0.0
    modes = (1,) if regime == "turnoff" else (0, 1)
    T = 2 * math.pi / nu
    total = 0j
    for j in modes:
        k, d, g, E = p.kappa[j], p.delta_eff[j], p.g[j], p.E[j]
        em = E_m if j == 0 else 0.0

        def f(t, u):
            a = u[0] + 1j * u[1]
            x = 2 * (A * np.exp(-1j * nu * t)).real
            da = (-k + 1j * (d + g * x)) * a + E + em * np.exp(-1j * nu * t)
            return [da.real, da.imag]

        a0 = E / complex(k, -d)
        n0 = int(np.ceil(150 / T))
        sol = solve_ivp(f, (0, (n0 + 1) * T), [a0.real, a0.imag], rtol=1e-12, atol=1e-10,
                        method="DOP853", dense_output=True)
        tt = n0 * T + np.linspace(0, T, 4097)[:-1]
        a = sol.sol(tt)
        a = a[0] + 1j * a[1]
        total += np.mean(1j * g * np.abs(a) ** 2 * np.exp(1j * nu * tt))
    return total


def resonant_probe(p):
    return p.replace(delta_eff=(p.delta_eff[0], 0.0))


# -- Bessel functions -----------------------------------------------------------

@settings(max_examples=200, deadline=None)
@given(x=st.floats(-60.0, 60.0), n_max=st.integers(0, 90))
def test_bessel_jn_matches_scipy(x, n_max):
    ours = sf.bessel_jn(n_max, x)
    ref = special.jv(np.arange(n_max + 1), x)
    assert np.max(np.abs(ours - ref)) <= 1e-13 * max(1.0, np.max(np.abs(ref)))


def test_bessel_band_negative_orders():
    n = np.arange(-7, 8)
    assert np.allclose(sf.bessel_band(-7, 7, 2.3), special.jv(n, 2.3), rtol=0, atol=1e-15)


def test_bessel_jn_zero_argument():
    assert np.array_equal(sf.bessel_jn(3, 0.0), [1.0, 0.0, 0.0, 0.0])


# -- radiation-pressure force -----------------------------------------------------

@pytest.mark.parametrize("regime, A", [("stationary", 1e3), ("stationary", 2e4 * np.exp(0.7j)),
                                       ("appendix", 2e4 * np.exp(0.7j)), ("turnoff", 1e3)])
def test_bessel_force_matches_cavity_integration(fig2, regime, A):
    oracle = averaged_force(fig2, A, regime)
    ours = sf.bessel_force(fig2, A, regime).value
    assert abs(ours - oracle) <= 1e-9 * abs(oracle)


@pytest.mark.parametrize("xi", [0.1, 1.0, 5.0])
def test_backaction_null_resonant_probe(fig2, xi):
    p = resonant_probe(fig2)
    A = xi * p.omega_m / (2 * p.g[1]) * np.exp(0.3j)
    bf = sf.bessel_force(p, A, "turnoff", trunc_N=64)
    assert abs(bf.value) <= 1e-10 * bf.leading


@settings(max_examples=40, deadline=None)
@given(xi=st.floats(1e-3, 10.0), theta=st.floats(-math.pi, math.pi), extra=st.integers(0, 40))
def test_backaction_null_property(fig2, xi, theta, extra):
    p = resonant_probe(fig2)
    A = xi * p.omega_m / (2 * p.g[1]) * np.exp(1j * theta)
    N = int(math.ceil(4 * xi)) + 20 + extra
    bf = sf.bessel_force(p, A, "turnoff", trunc_N=N)
    assert abs(bf.value) <= 1e-10 * bf.leading


# without the modulation drive the force is odd in A and the remainder is fifth order
@pytest.mark.parametrize("regime, bounds", [("stationary", (14.0, 18.0)), ("appendix", (30.0, 34.0))])
def test_series_order_of_polynomial(fig2, regime, bounds):
    co = sf.rp_coefficients(fig2, regime)
    nu = fig2.delta_m if regime == "stationary" else fig2.omega_m

    def resid(xi):
        A = xi * nu / (2 * fig2.g[0]) * np.exp(0.4j)
        exact = sf.bessel_force(fig2, A, regime, drop_em2=True).value
        return abs(exact - complex(sf.rp_polynomial(co, A)))

    ratio = resid(0.2) / resid(0.1)
    assert bounds[0] <= ratio <= bounds[1]


def test_coefficients_reference_values(fig2):
    co = sf.rp_coefficients(fig2, "stationary")
    assert co.c0 == pytest.approx(-149.23091923 + 28.42493700j, rel=1e-9)
    assert co.c1 == pytest.approx(-7.0436691929e-3 + 6.730734203e-4j, rel=1e-9)
    assert co.c3 == pytest.approx(6.361885307e-13 - 4.089040931e-14j, rel=1e-8)
    assert co.c2m == pytest.approx(2 * co.c2, rel=1e-14)
    assert co.gamma_eff == pytest.approx(7.043670193e-3, rel=1e-9)
    assert co.gamma_eff == pytest.approx(fig2.gamma_m - co.c1.real, rel=1e-15)


def test_coefficients_vanish_without_coupling(fig2):
    p = fig2.replace(g=(0.0, 0.0))
    for regime in ("stationary", "appendix"):
        for form in ("series", "closed"):
            co = sf.rp_coefficients(p, regime, form=form)
            assert co.c0 == co.c1 == co.c2 == co.c2m == co.c3 == 0
            assert co.gamma_eff == p.gamma_m


def test_static_shifts(fig2):
    assert sf.beta0_approx(fig2).real == pytest.approx(142.2, rel=1e-3)
    assert sf.beta0_approx(fig2, include_pump=False).real == pytest.approx(0.0872, rel=1e-3)


@settings(max_examples=30, deadline=None)
@given(E1=st.floats(0.0, 1e4), d1=st.floats(-3.0, 3.0), k1=st.floats(0.01, 1.0))
def test_probe_shift_ignores_pump(fig2, E1, d1, k1):
    q = fig2.replace(E=(E1, fig2.E[1]), delta_eff=(d1, fig2.delta_eff[1]),
                     kappa=(k1, fig2.kappa[1]), kappa_in=(k1 / 2, fig2.kappa_in[1]),
                     kappa_ex=(k1 / 2, fig2.kappa_ex[1]))
    assert sf.beta0_approx(q, False) == sf.beta0_approx(fig2, False)


def test_steady_amplitude(fig2):
    st_ = sf.steady_amplitude(fig2)
    assert st_.residual < 1e-12
    assert abs(st_.fixed_point) ** 2 == pytest.approx(4.4313e8, rel=1e-4)
    assert abs(sf.slow_rhs("stationary", st_.fixed_point, 0.0, fig2)) < 1e-9 * abs(
        sf.rp_coefficients(fig2).c0)
    assert st_.linear == pytest.approx(sf.rp_coefficients(fig2).c0 / sf.rp_coefficients(fig2).Gamma)


def test_coefficient_report_keys(fig2):
    rep = sf.coefficient_report(fig2)
    assert set(rep) == {"c0", "c1", "c2", "c2m", "c3", "gamma_eff", "delta_eff", "beta0",
                        "beta0_prime", "A_b_st_linear", "A_b_st_fixedpoint"}
    assert rep["c0"] == [pytest.approx(-149.2309192), pytest.approx(28.4249370)]


# -- decays ----------------------------------------------------------------------

def _integrate_log(regime, p, A0, T, coeffs=None, n=301):
    # log-amplitude coordinates keep the large accumulated phase well conditioned
    te = np.linspace(0.0, T, n)

    def f(t, u):
        A = np.exp(u[0] + 1j * u[1])
        d = sf.slow_rhs(regime, A, t, p, coeffs) / A
        return [d.real, d.imag]

    sol = solve_ivp(f, (0, T), [math.log(abs(A0)), float(np.angle(A0))], t_eval=te,
                    rtol=1e-13, atol=1e-12, method="DOP853")
    return te, np.exp(sol.y[0] + 1j * sol.y[1])


@pytest.mark.parametrize("beta", [1e-14, 0.0, -3e-14])
def test_analytic_decay_matches_integration(fig2, beta):
    p = fig2.replace(beta_nl=beta)
    A0 = sf.steady_amplitude(p).fixed_point
    t, num = _integrate_log("turnoff", p, A0, 3 / p.gamma_m)
    ana = sf.analytic_decay(A0, t, p)
    assert np.max(np.abs(num - ana) / np.abs(ana)) < 1e-8


@pytest.mark.parametrize("beta", [1e-14, 1e-12])
def test_appendix_decay_matches_integration(fig2, beta):
    p = fig2.replace(beta_nl=beta)
    co = sf.rp_coefficients(p, "appendix")
    A0 = sf.steady_amplitude(p).fixed_point
    t, num = _integrate_log("appendix", p, A0, 3 / co.gamma_eff, co)
    ana = sf.appendix_decay(A0, t, p, co)
    assert np.max(np.abs(num - ana) / np.abs(ana)) < 1e-6


def test_appendix_modulus_closed_form(fig2):
    co = sf.rp_coefficients(fig2, "appendix")
    A0 = 3e4 + 1e4j
    t = np.linspace(0, 1000, 101)
    g, R = co.gamma_eff, co.c3.real
    r2 = abs(A0) ** 2 * np.exp(-2 * g * t) / (1 - abs(A0) ** 2 * R / g * (1 - np.exp(-2 * g * t)))
    assert np.allclose(np.abs(sf.appendix_decay(A0, t, fig2, co)) ** 2, r2, rtol=1e-10, atol=0)


def test_appendix_small_cubic_limit(fig2):
    co = sf.rp_coefficients(fig2, "appendix")
    co0 = type(co)(co.c0, co.c1, co.c2, co.c2m, complex(0.0, co.c3.imag), co.gamma_eff,
                   co.delta_eff, co.regime, co.nu, co.delta_m_bare)
    A0 = 2e4 * np.exp(0.2j)
    t = np.linspace(0, 2000, 51)
    g, K = co.gamma_eff, co.c3.imag - fig2.beta_nl * fig2.omega_m
    # with Re c3 = 0 only the phase depends on the amplitude
    expected = A0 * np.exp(-co0.Gamma * t) * np.exp(
        0.5j * K * abs(A0) ** 2 / g * (1 - np.exp(-2 * g * t)))
    num = sf.appendix_decay(A0, t, fig2, co0)
    assert np.allclose(np.abs(num), np.abs(A0) * np.exp(-g * t), rtol=1e-12)
    assert np.allclose(num, expected, rtol=1e-10)


def test_appendix_no_dephasing_when_kerr_cancels(fig2):
    co = sf.rp_coefficients(fig2, "appendix")
    p = fig2.replace(beta_nl=co.c3.imag / fig2.omega_m)
    A0 = 2e4
    t = np.linspace(0, 3000, 61)
    phase = np.unwrap(np.angle(sf.appendix_decay(A0, t, p, co)))
    assert np.allclose(phase, -co.delta_eff * t, rtol=0, atol=1e-10)


def test_appendix_finite_time_singularity(fig2):
    co = sf.rp_coefficients(fig2, "appendix")
    anti = type(co)(co.c0, co.c1, co.c2, co.c2m, complex(1e-6, 0.0), co.gamma_eff,
                    co.delta_eff, co.regime, co.nu, co.delta_m_bare)
    with pytest.raises(sf.FiniteTimeSingularity):
        sf.appendix_decay(1e4, np.linspace(0, 1e4, 11), fig2, anti)


def test_instantaneous_frequency_turnoff(fig2):
    t = np.array([0.0, 1e8, 5e8])
    A2 = 4e8
    w = sf.instantaneous_frequency("turnoff", t, A2, fig2)
    dm = sf.mechanical_detuning(fig2, "turnoff")
    assert w == pytest.approx(1 + dm + fig2.beta_nl * A2 * np.exp(-2 * fig2.gamma_m * t), rel=1e-15)


# -- thermal relaxation -------------------------------------------------------------

def test_thermal_relax_limits():
    assert sf.thermal_relax(0.015, 3968.38, 1e-9, 0.0) == pytest.approx(0.015)
    assert sf.thermal_relax(0.015, 3968.38, 1e-9, 1e12) == pytest.approx(3968.38)


@settings(max_examples=100, deadline=None)
@given(n0=st.floats(0, 1e4), nb=st.floats(0, 1e4), g=st.floats(1e-9, 1.0),
       s=st.floats(0.0, 20.0))
def test_thermal_relax_bounded_and_slope(n0, nb, g, s):
    t = s / g
    n = sf.thermal_relax(n0, nb, g, t)
    assert min(n0, nb) * (1 - 1e-12) <= n <= max(n0, nb) * (1 + 1e-12)
    h = 1e-6 / g
    slope = (sf.thermal_relax(n0, nb, g, h) - n0) / h
    assert slope == pytest.approx(2 * g * (nb - n0), rel=1e-4, abs=1e-9 * g * max(n0, nb, 1.0))
