import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from optomech import gaussfluct as gf
from optomech import slowflow as sf
from optomech.schedule import DriveSchedule

OMEGA_SYMPLECTIC = np.kron(np.eye(3), np.array([[0.0, 1.0], [-1.0, 0.0]]))


def kron_lyapunov(S, N):
    """Solve ``S C + C S^T + N = 0`` by vectorisation (independent of Bartels-Stewart)."""
    n = S.shape[0]
    I = np.eye(n)
    M = np.kron(I, S) + np.kron(S, I)
    return np.linalg.solve(M, -N.reshape(-1)).reshape(n, n)


def stable_matrix(seed, n=6):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((n, n))
    K = rng.standard_normal((n, n))
    return -(A @ A.T + 0.1 * np.eye(n)) + (K - K.T)


# -- matrices -------------------------------------------------------------------------

def test_basis_map_round_trip(fig2):
    st0 = gf.mean_steady_state(fig2)
    S_u = gf.drift_matrix_complex(fig2, st0)
    assert np.allclose(gf.from_quadrature(gf.to_quadrature(S_u)), S_u, rtol=0, atol=1e-12 * np.abs(S_u).max())
    S_x = gf.to_quadrature(S_u)
    assert np.max(np.abs(S_x.imag)) <= 1e-12 * np.abs(S_x).max()


def test_uncoupled_drift_blocks(fig2):
    p = fig2.replace(g=(0.0, 0.0), beta_nl=0.0)
    S = gf.drift_matrix(p, gf.ModeState(1 + 1j, 2j, 3.0))
    off = S.copy()
    for r in range(0, 6, 2):
        off[r:r + 2, r:r + 2] = 0
    assert np.all(off == 0)
    for j in range(2):
        ev = np.sort_complex(np.linalg.eigvals(S[2 * j:2 * j + 2, 2 * j:2 * j + 2]))
        expect = np.sort_complex([complex(-p.kappa[j], p.delta0[j]), complex(-p.kappa[j], -p.delta0[j])])
        assert np.allclose(ev, expect, atol=1e-14)
    ev = np.sort_complex(np.linalg.eigvals(S[4:, 4:]))
    assert np.allclose(ev, np.sort_complex([complex(-p.gamma_m, p.omega_m), complex(-p.gamma_m, -p.omega_m)]))


def test_diffusion_matrix(fig2):
    N = gf.diffusion_matrix(fig2)
    assert np.array_equal(N, N.T)
    assert np.all(np.linalg.eigvalsh(N) >= 0)
    assert N[0, 0] == fig2.kappa[0]   # vacuum only: no optical thermal photons
    assert N[4, 4] == pytest.approx(fig2.gamma_m * (2 * fig2.n_bath + 1), rel=1e-15)


def test_p_phi_variance_vacuum():
    C = 0.5 * np.eye(6)
    for phi in (0.0, 0.3, math.pi / 2):
        assert gf.p_phi_variance(C, phi) == pytest.approx(1.0)


# -- Lyapunov solver --------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_steady_covariance_matches_vectorised_solve(seed):
    S = stable_matrix(seed)
    B = np.random.default_rng(seed + 1).standard_normal((6, 6))
    N = B @ B.T
    C = gf.steady_covariance(S, N)
    ref = kron_lyapunov(S, N)
    assert np.allclose(C, ref, rtol=1e-8, atol=1e-10 * np.abs(ref).max())
    assert np.max(np.abs(C - C.T)) <= 1e-12 * np.abs(C).max()
    assert np.all(np.linalg.eigvalsh(C) >= -1e-10 * np.abs(C).max())


def test_unstable_drift_rejected():
    S = -stable_matrix(3)
    with pytest.raises(gf.UnstableDynamicsError):
        gf.steady_covariance(S, np.eye(6))


@settings(max_examples=30, deadline=None)
@given(P1=st.floats(0.01, 2.0), d1=st.floats(-1.6, -0.4), d2=st.floats(-1.5, 1.5),
       nb=st.floats(0.0, 1e4), q=st.sampled_from([1e5, 1e7, 1e9]))
def test_stationary_covariance_is_physical(fig2, P1, d1, d2, nb, q):
    p = fig2.replace(E=(fig2.E[0] * math.sqrt(P1), fig2.E[1]), delta_eff=(d1, d2),
                     delta0=(d1, d2), gamma_m=1 / q, n_bath=nb, E_m=0.0)
    S = gf.drift_matrix(p, gf.mean_steady_state(p))
    try:
        C = gf.steady_covariance(S, gf.diffusion_matrix(p))
    except gf.UnstableDynamicsError:
        return
    assert np.max(np.abs(C - C.T)) <= 1e-12 * np.abs(C).max()
    assert gf._mech_det(C) >= 0.25 - 1e-9
    ev = np.linalg.eigvals(C + 0.5j * OMEGA_SYMPLECTIC)
    assert ev.real.min() >= -1e-9 * max(1.0, np.abs(C).max())


# -- readouts -----------------------------------------------------------------------------

def test_occupancy_and_purity_of_reference_blocks():
    C = 0.5 * np.eye(6)
    assert gf.occupancy(C) == pytest.approx(0.0, abs=1e-15)
    assert gf.purity(C) == pytest.approx(1.0)
    C[4, 4] = C[5, 5] = 7.25 + 0.5
    assert gf.occupancy(C) == pytest.approx(7.25)
    assert gf.purity(C) == pytest.approx(1 / (2 * 7.25 + 1))


def test_unphysical_state_rejected():
    C = 0.4 * np.eye(6)
    with pytest.raises(gf.UnphysicalStateError):
        gf.purity(C)
    with pytest.raises(gf.UnphysicalStateError):
        gf.occupancy(C)


def test_cooling_matches_weak_coupling_rates(fig2):
    # sideband cooling rate equation, valid for G << kappa
    p = fig2.replace(E=(fig2.E[0] * 0.1, 0.0), E_m=0.0, gamma_m=1e-7)
    cs = gf.cooling_steady_state(p)
    a1 = cs.state.alpha1
    G2 = (p.g[0] * abs(a1)) ** 2
    k, d, w = p.kappa[0], p.delta_eff[0], p.omega_m
    A_minus = 2 * G2 * k / (k * k + (d + w) ** 2)
    A_plus = 2 * G2 * k / (k * k + (d - w) ** 2)
    n_rate = (2 * p.gamma_m * p.n_bath + A_plus) / (2 * p.gamma_m + A_minus - A_plus)
    assert cs.occupancy == pytest.approx(n_rate, rel=1e-2)


def test_cooling_damping_matches_coefficient(fig2):
    # perturbative in G/kappa, so compared at reduced pump
    p = fig2.replace(E=(fig2.E[0] * 0.1, 0.0), E_m=0.0)
    cs = gf.cooling_steady_state(p)
    S = gf.drift_matrix(p, cs.state)
    ev = np.linalg.eigvals(S)
    mech = ev[np.argmin(np.abs(ev.real))]   # least-damped mode
    co = sf.rp_coefficients(p, "appendix")
    assert -mech.real == pytest.approx(co.gamma_eff, rel=1e-2)


# -- mean fields ----------------------------------------------------------------------------

def test_undriven_fixed_point(fig2):
    p = fig2.replace(E=(0.0, 0.0), E_m=0.0)
    assert gf.meanfield_rhs(gf.ModeState(0j, 0j, 0j), 0.0, p) == (0j, 0j, 0j)


def test_linear_cavity_relaxation(fig2):
    p = fig2.replace(g=(0.0, 0.0), E_m=0.0)
    t = np.linspace(0, 80, 9)
    tr = gf.integrate_means(p, t, state0=gf.ModeState(0j, 0j, 0j), rtol=1e-11, atol=1e-11)
    for j, a in enumerate((tr.alpha1, tr.alpha2)):
        L = complex(-p.kappa[j], p.delta0[j])
        exact = -p.E[j] / L * (1 - np.exp(L * t))
        assert np.allclose(a, exact, rtol=1e-8, atol=1e-8 * abs(p.E[j] / L))


def test_divergence_reported(fig2):
    with pytest.raises(gf.DivergenceError):
        gf.meanfield_rhs(gf.ModeState(complex(math.nan, 0), 0j, 0j), 1.5, fig2)


def test_mean_steady_state_is_stationary(fig2):
    st0 = gf.mean_steady_state(fig2)
    p = fig2.replace(E_m=0.0)
    d = gf.meanfield_rhs(st0, 0.0, p)
    assert max(abs(z) for z in d) < 1e-8
    assert st0.beta.real == pytest.approx(sf.beta0_approx(fig2).real, rel=1e-3)


def test_means_solver_agrees_with_full_solver(scaled):
    p = scaled.replace(beta_nl=1e-8)
    t = np.linspace(0, 40, 81)
    sch = DriveSchedule.for_protocol("turnoff", 20.0, 40.0)
    s0 = gf.ModeState(0j, 0j, 0j)
    a = gf.integrate_means(p, t, sch, s0, rtol=1e-11, atol=1e-11, max_step=0.05)
    b = gf.integrate(p, t, sch, s0, np.zeros((6, 6)), rtol=1e-11, atol=1e-11)
    for x, y in ((a.alpha1, b.alpha1), (a.beta, b.beta)):
        assert np.max(np.abs(x - y)) <= 1e-6 * np.max(np.abs(y))


# -- covariance integration ---------------------------------------------------------------

def test_covariance_trajectory_symmetric_and_physical(scaled):
    p = scaled.replace(E_m=0.0)
    st0 = gf.mean_steady_state(p)
    t = np.linspace(0, 300, 31)
    tr = gf.integrate(p, t, None, st0, gf.initial_covariance(p, n_mech=0.0))
    for C in tr.cov:
        assert np.max(np.abs(C - C.T)) <= 1e-10 * np.abs(C).max()
        assert gf._mech_det(C) >= 0.25 - 1e-9
    # relaxes towards the algebraic solution
    Cs = gf.steady_covariance(gf.drift_matrix(p, st0), gf.diffusion_matrix(p))
    t_long = np.linspace(0, 3000, 4)
    tr = gf.integrate(p, t_long, None, st0, gf.initial_covariance(p, n_mech=0.0), method="Radau")
    assert gf.occupancy(tr.cov[-1]) == pytest.approx(gf.occupancy(Cs), rel=1e-6)


def test_thermal_relaxation_against_closed_form(fig2):
    p = fig2.replace(g=(0.0, 0.0), beta_nl=0.0, E=(0.0, 0.0), E_m=0.0)
    n0 = 0.015
    t = np.linspace(0, 3 / p.gamma_m, 61)
    # optical rates exceed gamma_m by 1e8: stiff, so an implicit stepper
    tr = gf.integrate(p, t, None, gf.ModeState(0j, 0j, 0j), gf.initial_covariance(p, n_mech=n0),
                      method="Radau")
    ref = sf.thermal_relax(n0, p.n_bath, p.gamma_m, t)
    assert np.max(np.abs(tr.occupancy - ref) / ref) < 1e-6


def test_trajectory_csv(tmp_path, scaled):
    p = scaled.replace(E_m=0.0)
    tr = gf.integrate(p, np.linspace(0, 5, 6), None, gf.mean_steady_state(p), gf.initial_covariance(p))
    text = tr.to_csv(tmp_path / "g.csv").read_text().splitlines()
    assert len(text) == 1 + 6 + sum(1 for line in text if line.startswith("#"))
