"""Acceptance criteria; each test prints one PASS/FAIL line."""
import math
import subprocess
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import pytest

from optomech import estimate as es
from optomech import gaussfluct as gf
from optomech import langevin as lv
from optomech import slowflow as sf
from optomech.core import SystemParams, load_config, normalize
from optomech.schedule import always_on

from conftest import CONFIG_DIR, OMEGA_M
from test_slowflow import _integrate_log, resonant_probe

ROOT = Path(__file__).resolve().parents[1]


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
        assert ok, detail
    return emit


def _sde_config(name, beta=None):
    cfg = load_config(CONFIG_DIR / name)
    p = cfg.params if beta is None else cfg.params.replace(beta_nl=beta)
    s = es.PipelineSettings.from_run(cfg.run, cfg.params)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return es.run_protocol(cfg.run["protocol"], p, cfg.run["P_m"], "sde",
                               n_traj=cfg.run["n_traj"], seed=cfg.run["seed"], settings=s)


def test_criterion_1_cooling_fixed_point(fig2, report):
    t0 = time.perf_counter()
    cs = gf.cooling_steady_state(fig2)
    dt = time.perf_counter() - t0
    n0, P = cs.occupancy, cs.purity
    ok = 0.015 * 0.7 <= n0 <= 0.015 * 1.3 and abs(P - 0.97) <= 0.03 and dt < 1.0
    report(1, ok, f"n0={n0:.5f} (target 0.015 +-30%), purity={P:.5f} (target 0.97 +-0.03), {dt:.3f}s")


def test_criterion_2_backaction_null(fig2, report):
    t0 = time.perf_counter()
    p = resonant_probe(fig2)
    worst = 0.0
    for xi in (0.1, 1.0, 5.0):
        A = xi * p.omega_m / (2 * p.g[1]) * np.exp(0.3j)
        bf = sf.bessel_force(p, A, "turnoff", trunc_N=64)
        worst = max(worst, abs(bf.value) / bf.leading)
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-10 and dt < 1.0, f"max |F|/leading = {worst:.2e} (<= 1e-10), {dt:.3f}s")


def test_criterion_3_analytic_vs_integration(fig2, report):
    t0 = time.perf_counter()
    p = fig2.replace(beta_nl=1e-14)
    A0 = sf.steady_amplitude(p).fixed_point
    t, num = _integrate_log("turnoff", p, A0, 3 / p.gamma_m)
    e_turn = np.max(np.abs(num - sf.analytic_decay(A0, t, p)) / np.abs(num))
    co = sf.rp_coefficients(p, "appendix")
    t, num = _integrate_log("appendix", p, A0, 3 / co.gamma_eff, co)
    e_app = np.max(np.abs(num - sf.appendix_decay(A0, t, p, co)) / np.abs(num))
    dt = time.perf_counter() - t0
    ok = e_turn < 1e-8 and e_app < 1e-6 and dt < 5.0
    report(3, ok, f"turnoff rel err {e_turn:.2e} (< 1e-8), appendix {e_app:.2e} (< 1e-6), {dt:.2f}s")


def test_criterion_4_thermal_relaxation(fig2, report):
    t0 = time.perf_counter()
    p = fig2.replace(g=(0.0, 0.0), beta_nl=0.0, E=(0.0, 0.0), E_m=0.0)
    n0 = 0.015
    t = np.linspace(0, 3 / p.gamma_m, 61)
    tr = gf.integrate(p, t, None, gf.ModeState(0j, 0j, 0j), gf.initial_covariance(p, n_mech=n0),
                      method="Radau")
    ref = sf.thermal_relax(n0, p.n_bath, p.gamma_m, t)
    err = np.max(np.abs(tr.occupancy - ref) / ref)
    dt = time.perf_counter() - t0
    ok = err < 1e-6 and dt < 5.0 and abs(p.n_bath - 3.97e3) < 10
    report(4, ok, f"rel err {err:.2e} (< 1e-6), n_bath={p.n_bath:.1f}, {dt:.2f}s")


def test_criterion_5_sde_vs_lyapunov(report):
    t0 = time.perf_counter()
    w = OMEGA_M
    p = normalize(SystemParams.build(
        omega_m=w, Q=1e5, kappa=(2 * math.pi * 1e5,) * 2, kappa_in=(math.pi * 1e5,) * 2,
        g=(2 * math.pi * 5,) * 2, T=0.1, delta_eff=(-w, 0.0), P=(5e-5, 5e-8), P_m=0.0,
        beta_nl=0.0))
    cs = gf.cooling_steady_state(p)
    ens = lv.ensemble_run(p, always_on(1500.0), 500, seed0=11, state0=cs.state, rec_every=500)
    iu = np.triu_indices(6)
    z = ((ens.cov[-1] - cs.cov) / ens.cov_stderr[-1])[iu]
    dt = time.perf_counter() - t0
    ok = np.max(np.abs(z)) < 3.0 and dt < 300.0
    report(5, ok, f"500 trajectories, max |z| over 21 covariance entries = {np.max(np.abs(z)):.2f} "
                  f"(< 3), {dt:.1f}s")


def test_criterion_6_estimator_consistency(report):
    t0 = time.perf_counter()
    cfg = load_config(CONFIG_DIR / "scaled_q1e5.json")
    pm = cfg.run["P_m"]
    _, res = es.run_protocol("turnoff", cfg.params, pm, "analytic")
    p0 = cfg.params.replace(beta_nl=0.0)
    _, st0 = es.run_protocol("stationary", p0, pm, "analytic")
    _, to0 = es.run_protocol("turnoff", p0, pm, "analytic")
    im_c3 = sf.rp_coefficients(normalize(p0), "stationary").c3.imag
    dt = time.perf_counter() - t0
    ok = (res.E_r < 1e-10 and abs(to0.slope) <= max(to0.stderr, 1e-30)
          and st0.slope != 0 and abs(abs(st0.slope) - abs(im_c3)) <= 1e-8 * abs(im_c3) and dt < 10)
    report(6, ok, f"E_r={res.E_r:.1e} (< 1e-10); beta=0: turnoff slope {to0.slope:.1e}, "
                  f"stationary slope {st0.slope:.4e} vs |Im c3|={abs(im_c3):.4e}; {dt:.2f}s")


def _window_ratios(name, beta=None):
    """(gamma_m * window, expected shift / FFT resolution) of a shipped config."""
    cfg = load_config(CONFIG_DIR / name)
    p = normalize(cfg.params)
    s = es.PipelineSettings.from_run(cfg.run, cfg.params)
    beta = p.beta_nl if beta is None else beta
    A2 = abs(sf.steady_amplitude(p.with_modulation_power(max(cfg.run["P_m"]))).fixed_point) ** 2
    return p.gamma_m * s.window, beta * A2 / (2 * math.pi / s.window)


def test_criterion_7_scaled_round_trip(report):
    t0 = time.perf_counter()
    run, res = _sde_config("scaled_q1e5.json")
    dt = time.perf_counter() - t0
    n_pm = len(run.P_m)
    n_seeds = len({pt.rep for pt in run.points})
    gw, ratio = _window_ratios("scaled_q1e5.json")
    gw_ref, ratio_ref = _window_ratios("fullscale_estimate_longrun.json", beta=1e-14)
    ok = (res.E_r < 0.25 and res.R > 0.9 and n_pm >= 5 and n_seeds >= 5 and dt < 600
          and abs(ratio / ratio_ref - 1) < 0.25)
    report(7, ok, f"beta_est={res.beta_est:.4e} vs {res.beta_true:.1e}, E_r={res.E_r:.3f} (< 0.25), "
                  f"R={res.R:.4f} (> 0.9), {n_pm} powers x {n_seeds} seeds, {dt:.1f}s; "
                  f"shift/resolution {ratio:.2f} (full scale {ratio_ref:.2f}); gamma_m*window "
                  f"{gw:.2g} (full scale {gw_ref:.2g}, not jointly attainable with weak-Kerr "
                  f"preparation at Q=1e5)")


def test_criterion_8_appendix_non_resolution(report):
    t0 = time.perf_counter()
    _, res = _sde_config("appendix.json")
    _, res0 = _sde_config("appendix.json", beta=0.0)
    dt = time.perf_counter() - t0
    beta = res.beta_true
    ok = (res.stderr > abs(beta) and abs(res.slope - res0.slope) < res.stderr
          and not res.resolved and dt < 600)
    report(8, ok, f"slope {res.slope:.3e} +- {res.stderr:.3e} at beta={beta:.0e}; "
                  f"{res0.slope:.3e} +- {res0.stderr:.3e} at beta=0; stderr > beta, {dt:.1f}s")


def test_criterion_9_longrun_documented(report):
    fig4 = load_config(CONFIG_DIR / "fullscale_estimate_longrun.json")
    fig5 = load_config(CONFIG_DIR / "fullscale_sweep_longrun.json")
    ok = (fig4.run.get("longrun") and fig5.run.get("longrun")
          and fig4.run["targets"]["beta_est"] == 1.13e-14
          and fig5.run["targets"]["beta_floor"] == 2.5e-15
          and fig4.params.Q == 1e9 and fig5.run["repetitions"] == 13)
    report(9, bool(ok), "full-scale configs shipped as opt-in long runs with targets "
                        "beta_est=1.13e-14 and floor 2.5e-15 (run with -m longrun)")


PROPERTY_SUITES = {
    "covariance symmetry/physicality": [
        "tests/test_gaussfluct.py::test_stationary_covariance_is_physical",
        "tests/test_gaussfluct.py::test_steady_covariance_matches_vectorised_solve"],
    "Parseval": ["tests/test_detect.py::test_parseval"],
    "sqrt(P) drive scaling": ["tests/test_core.py::test_drive_rate_sqrt_power_scaling"],
    "phase-parameter independence": [
        "tests/test_estimate.py::test_analytic_slope_independent_of_phase",
        "tests/test_estimate.py::test_analytic_round_trip_property"],
    "seed determinism": [
        "tests/test_langevin.py::test_same_seed_identical",
        "tests/test_langevin.py::test_determinism_independent_of_chunking",
        "tests/test_estimate.py::test_sde_seed_determinism"],
}


def test_criterion_10_property_suites(report):
    lines, ok = [], True
    for name, nodes in PROPERTY_SUITES.items():
        t0 = time.perf_counter()
        proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *nodes],
                              cwd=ROOT, capture_output=True, text=True)
        dt = time.perf_counter() - t0
        good = proc.returncode == 0 and dt < 60
        ok &= good
        lines.append(f"{name}: {'ok' if good else 'failed'} ({dt:.1f}s)")
    report(10, ok, "; ".join(lines))


@pytest.mark.longrun
def test_longrun_fullscale_estimate():
    """Full-scale turn-off estimate at Q = 1e9; hours of compute."""
    cfg = load_config(CONFIG_DIR / "fullscale_estimate_longrun.json")
    s = es.PipelineSettings.from_run(cfg.run, cfg.params)
    _, res = es.run_protocol("turnoff", cfg.params, cfg.run["P_m"], "sde", 1, 0, s)
    target = cfg.run["targets"]["beta_est"]
    assert abs(res.beta_est - target) / target < 0.25
