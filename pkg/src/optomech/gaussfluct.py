"""Mean fields coupled to Gaussian fluctuations.

Covariances live in the real quadrature basis ``(x1, y1, x2, y2, q, p)``
with ``delta a = (x + i y)/sqrt(2)`` for each mode, so the vacuum
covariance is ``I/2``.  Time is in the same units as the rates of the
supplied :class:`~optomech.core.SystemParams` (normally ``omega_m = 1``).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg, optimize
from scipy.integrate import solve_ivp

from .core import SystemParams
from .schedule import DriveSchedule

RTOL = 1e-9
ATOL = 1e-12


class DivergenceError(RuntimeError):
    def __init__(self, t, msg="state diverged"):
        super().__init__(f"{msg} at t={t:.6g}")
        self.t = t


class UnstableDynamicsError(RuntimeError):
    """The linearised drift has an eigenvalue with non-negative real part."""

    def __init__(self, eigenvalue):
        super().__init__(f"unstable linearized dynamics: eigenvalue {eigenvalue:.6g}")
        self.eigenvalue = eigenvalue


class UnphysicalStateError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(f"{msg} (last residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class ModeState:
    alpha1: complex
    alpha2: complex
    beta: complex
    t: float = 0.0

    def pi_phi(self, phi: float) -> float:
        """Mean rotated momentum ``2 Im(beta e^{i phi})``."""
        return 2.0 * (self.beta * complex(math.cos(phi), math.sin(phi))).imag

    def as_real(self) -> np.ndarray:
        return np.array([self.alpha1.real, self.alpha1.imag, self.alpha2.real,
                         self.alpha2.imag, self.beta.real, self.beta.imag])

    @classmethod
    def from_real(cls, y, t=0.0) -> "ModeState":
        return cls(complex(y[0], y[1]), complex(y[2], y[3]), complex(y[4], y[5]), float(t))


@dataclass(frozen=True)
class Feedback:
    """Fluctuation moments entering the mean-field equations."""

    cross: tuple = (0j, 0j)        # <(db + db^+) da_j>
    photons: tuple = (0.0, 0.0)    # <da_j^+ da_j>
    p_phi_sq: float = 0.0          # <dp_phi^2>

    @classmethod
    def from_cov(cls, C, phi: float) -> "Feedback":
        C = np.asarray(C)
        cross = tuple(complex(C[4, 2 * j], C[4, 2 * j + 1]) for j in range(2))
        photons = tuple(0.5 * (C[2 * j, 2 * j] + C[2 * j + 1, 2 * j + 1]) - 0.5 for j in range(2))
        return cls(cross, photons, p_phi_variance(C, phi))


ZERO_FEEDBACK = Feedback()


def p_phi_variance(C, phi: float) -> float:
    """``<dp_phi^2>`` for ``p_phi = -i(b e^{i phi} - b^+ e^{-i phi})``.

    With ``db = (q + i p)/sqrt(2)`` one has ``dp_phi = sqrt(2)(q sin phi + p cos phi)``.
    """
    s, c = math.sin(phi), math.cos(phi)
    return 2.0 * (s * s * C[4, 4] + 2 * s * c * C[4, 5] + c * c * C[5, 5])


# ---------------------------------------------------------------------------
# mean fields


def _drives(params: SystemParams, t, schedule: DriveSchedule | None):
    if schedule is None:
        fp = fm = 1.0
    else:
        fp = schedule.pump_factor(t)
        fm = schedule.modulation_factor(t)
    e1 = params.E[0] * fp
    if params.E_m:
        e1 = e1 + params.E_m * fp * fm * complex(math.cos(params.delta_m * t), -math.sin(params.delta_m * t))
    e2 = params.E[1]
    if schedule is not None and schedule.calibration and params.phi_cal:
        ph = params.phi_cal * math.sin(params.Omega_c * t)
        e2 = e2 * complex(math.cos(ph), -math.sin(ph))
    return e1, e2


def meanfield_rhs(state: ModeState, t: float, params: SystemParams,
                  feedback: Feedback | None = None, schedule: DriveSchedule | None = None):
    """Time derivatives ``(d alpha1, d alpha2, d beta)`` of the mean amplitudes."""
    fb = ZERO_FEEDBACK if feedback is None else feedback
    a = (state.alpha1, state.alpha2)
    b = state.beta
    for z in (*a, b):
        if not (math.isfinite(z.real) and math.isfinite(z.imag)):
            raise DivergenceError(t)
    w, phi, bnl = params.omega_m, params.phi_nl, params.beta_nl
    drive = _drives(params, t, schedule)
    x = 2.0 * b.real
    da = []
    for j in range(2):
        g = params.g[j]
        da.append(complex(-params.kappa[j], params.delta0[j] + g * x) * a[j]
                  + drive[j] + 1j * g * fb.cross[j])
    eph = complex(math.cos(phi), -math.sin(phi))
    pi = 2.0 * (b * eph.conjugate()).imag
    db = (complex(-params.gamma_m, -w) * b
          + w * bnl / 3.0 * eph * pi ** 3
          + w * bnl * pi * eph * fb.p_phi_sq
          + 1j * sum(params.g[j] * (abs(a[j]) ** 2 + fb.photons[j]) for j in range(2)))
    return da[0], da[1], db


# ---------------------------------------------------------------------------
# drift and diffusion

_M1 = np.array([[1.0, 1.0j], [1.0, -1.0j]]) / math.sqrt(2.0)
QUAD_MAP = linalg.block_diag(_M1, _M1, _M1)   # u = QUAD_MAP @ x
QUAD_MAP_INV = np.linalg.inv(QUAD_MAP)


def drift_matrix_complex(params: SystemParams, state: ModeState) -> np.ndarray:
    """Drift in the basis ``(da1, da1^+, da2, da2^+, db, db^+)``."""
    S = np.zeros((6, 6), dtype=complex)
    b = state.beta
    w, phi, bnl = params.omega_m, params.phi_nl, params.beta_nl
    im2 = (b * complex(math.cos(phi), math.sin(phi))).imag ** 2
    for j, a in enumerate((state.alpha1, state.alpha2)):
        g = params.g[j]
        lam = complex(-params.kappa[j], params.delta0[j] + 2 * g * b.real)
        r = 2 * j
        S[r, r] = lam
        S[r, 4] = S[r, 5] = 1j * g * a
        S[r + 1, r + 1] = lam.conjugate()
        S[r + 1, 4] = S[r + 1, 5] = -1j * g * a.conjugate()
        S[4, r] = 1j * g * a.conjugate()
        S[4, r + 1] = 1j * g * a
        S[5, r] = -1j * g * a.conjugate()
        S[5, r + 1] = -1j * g * a
    w_eff = w * (1 + 4 * bnl * im2)
    S[4, 4] = complex(-params.gamma_m, -w_eff)
    S[5, 5] = complex(-params.gamma_m, w_eff)
    S[4, 5] = 4j * complex(math.cos(2 * phi), -math.sin(2 * phi)) * w * bnl * im2
    S[5, 4] = -4j * complex(math.cos(2 * phi), math.sin(2 * phi)) * w * bnl * im2
    return S


def to_quadrature(S_u: np.ndarray) -> np.ndarray:
    return QUAD_MAP_INV @ S_u @ QUAD_MAP


def from_quadrature(S_x: np.ndarray) -> np.ndarray:
    return QUAD_MAP @ S_x @ QUAD_MAP_INV


def drift_matrix(params: SystemParams, state: ModeState) -> np.ndarray:
    """Real drift matrix in the quadrature basis."""
    S = to_quadrature(drift_matrix_complex(params, state))
    return S.real


def diffusion_matrix(params: SystemParams) -> np.ndarray:
    d = []
    for j in range(2):
        d += [params.kappa[j] * (2 * params.n_opt[j] + 1)] * 2
    d += [params.gamma_m * (2 * params.n_bath + 1)] * 2
    return np.diag(d)


def initial_covariance(params: SystemParams, n_mech: float | None = None) -> np.ndarray:
    """Thermal mechanics (bath occupancy unless ``n_mech`` given), thermal optics."""
    nb = params.n_bath if n_mech is None else n_mech
    return np.diag([params.n_opt[0] + 0.5] * 2 + [params.n_opt[1] + 0.5] * 2 + [nb + 0.5] * 2)


def lyapunov_rhs(C, S, N):
    return S @ C + C @ S.T + N


def steady_covariance(S, N, check: bool = True) -> np.ndarray:
    """Algebraic solution of ``S C + C S^T + N = 0`` (Bartels-Stewart)."""
    S = np.asarray(S, dtype=float)
    N = np.asarray(N, dtype=float)
    ev = np.linalg.eigvals(S)
    worst = ev[np.argmax(ev.real)]
    if worst.real >= 0:
        raise UnstableDynamicsError(worst)
    C = linalg.solve_continuous_lyapunov(S, -N)
    C = 0.5 * (C + C.T)
    if check:
        res = np.max(np.abs(lyapunov_rhs(C, S, N)))
        if res > 1e-10 * np.max(np.abs(N)):
            # one refinement step on the residual
            C = C + linalg.solve_continuous_lyapunov(S, -lyapunov_rhs(C, S, N))
            C = 0.5 * (C + C.T)
    return C


# ---------------------------------------------------------------------------
# readouts

PHYS_TOL = 1e-9


def _mech_det(C):
    C = np.asarray(C)
    return C[4, 4] * C[5, 5] - C[4, 5] * C[5, 4]


def purity(C) -> float:
    det = _mech_det(C)
    if det < 0.25 - PHYS_TOL:
        raise UnphysicalStateError(f"mechanical determinant {det:.6g} below 1/4")
    return 1.0 / (2.0 * math.sqrt(max(det, 0.25)))


def occupancy(C) -> float:
    det = _mech_det(C)
    if det < 0.25 - PHYS_TOL:
        raise UnphysicalStateError(f"mechanical determinant {det:.6g} below 1/4")
    C = np.asarray(C)
    return 0.5 * (C[4, 4] + C[5, 5]) - 0.5


# ---------------------------------------------------------------------------
# stationary state without modulation


def mean_steady_state(params: SystemParams, feedback: Feedback | None = None,
                      pump: bool = True) -> ModeState:
    """Fixed point of the mean-field equations with the modulation off."""
    p = params.replace(E_m=0.0) if pump else params.replace(E_m=0.0, E=(0.0, params.E[1]))
    # linear guess around the effective detunings
    a0 = [p.E[j] / complex(p.kappa[j], -p.delta_eff[j]) for j in range(2)]
    b0 = 1j * sum(p.g[j] * abs(a0[j]) ** 2 for j in range(2)) / complex(p.gamma_m, p.omega_m)
    y0 = ModeState(a0[0], a0[1], b0).as_real()
    scale = np.maximum(np.abs(y0), 1.0)

    def f(ys):
        da1, da2, db = meanfield_rhs(ModeState.from_real(ys * scale), 0.0, p, feedback)
        return np.array([da1.real, da1.imag, da2.real, da2.imag, db.real, db.imag]) / scale

    sol = optimize.root(f, y0 / scale, method="hybr", tol=1e-14)
    if not sol.success and np.max(np.abs(f(sol.x))) > 1e-9:
        raise ConvergenceError("mean-field steady state not found", float(np.max(np.abs(f(sol.x)))))
    return ModeState.from_real(sol.x * scale)


@dataclass(frozen=True)
class CoolingState:
    state: ModeState
    cov: np.ndarray
    occupancy: float
    purity: float


def cooling_steady_state(params: SystemParams, feedback_iters: int = 3) -> CoolingState:
    """Algebraic stationary state under the cooling pump (modulation off)."""
    fb = None
    for _ in range(max(1, feedback_iters)):
        st = mean_steady_state(params, fb)
        C = steady_covariance(drift_matrix(params, st), diffusion_matrix(params))
        fb = Feedback.from_cov(C, params.phi_nl)
    return CoolingState(st, C, occupancy(C), purity(C))


# ---------------------------------------------------------------------------
# time integration


@dataclass
class GaussTrajectory:
    t: np.ndarray
    alpha1: np.ndarray
    alpha2: np.ndarray
    beta: np.ndarray
    cov: np.ndarray | None   # (n_t, 6, 6); None for a means-only run
    iterations: int = 1
    residual: float = 0.0

    @property
    def occupancy(self) -> np.ndarray:
        C = self.cov
        return 0.5 * (C[:, 4, 4] + C[:, 5, 5]) - 0.5

    @property
    def purity(self) -> np.ndarray:
        det = self.cov[:, 4, 4] * self.cov[:, 5, 5] - self.cov[:, 4, 5] ** 2
        return 1.0 / (2.0 * np.sqrt(det))

    def means(self) -> np.ndarray:
        return np.stack([self.alpha1, self.alpha2, self.beta], axis=1)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            fh.write("# units: normalized (omega_m = 1, time in 1/omega_m)\n")
            w = csv.writer(fh)
            if self.cov is None:
                w.writerow(["t", "re_alpha1", "im_alpha1", "re_alpha2", "im_alpha2",
                            "re_beta", "im_beta"])
                for k in range(len(self.t)):
                    w.writerow([repr(float(v)) for v in (
                        self.t[k], self.alpha1[k].real, self.alpha1[k].imag, self.alpha2[k].real,
                        self.alpha2[k].imag, self.beta[k].real, self.beta[k].imag)])
                return path
            w.writerow(["t", "re_alpha1", "im_alpha1", "re_alpha2", "im_alpha2", "re_beta", "im_beta",
                        "C_x1x1", "C_y1y1", "C_x2x2", "C_y2y2", "C_qq", "C_pp", "n", "purity"])
            n, pur = self.occupancy, self.purity
            for k in range(len(self.t)):
                d = np.diag(self.cov[k])
                w.writerow([repr(float(v)) for v in (
                    self.t[k], self.alpha1[k].real, self.alpha1[k].imag, self.alpha2[k].real,
                    self.alpha2[k].imag, self.beta[k].real, self.beta[k].imag, *d, n[k], pur[k])])
        return path


_IU = np.triu_indices(6)


def _pack(state: ModeState, C) -> np.ndarray:
    return np.concatenate([state.as_real(), np.asarray(C)[_IU]])


def _unpack_cov(v):
    C = np.zeros((6, 6))
    C[_IU] = v
    return C + np.triu(C, 1).T


def integrate(params: SystemParams, t_eval, schedule: DriveSchedule | None = None,
              state0: ModeState | None = None, cov0=None, feedback="none",
              method: str = "DOP853", rtol: float = RTOL, atol: float = ATOL,
              beta_guard: float = 1e15, max_step: float = np.inf) -> GaussTrajectory:
    """Co-step the mean fields and the Lyapunov equation.

    ``feedback`` is ``"none"`` (means see no fluctuation moments),
    ``"coupled"`` (means see the instantaneous covariance), a
    :class:`Feedback` (held constant) or a callable ``t -> Feedback``.
    """
    t_eval = np.asarray(t_eval, dtype=float)
    if state0 is None:
        state0 = ModeState(0j, 0j, 0j)
    if cov0 is None:
        cov0 = initial_covariance(params)
    N = diffusion_matrix(params)
    phi = params.phi_nl

    def rhs(t, y):
        st = ModeState.from_real(y[:6], t)
        if abs(st.beta) > beta_guard:
            raise DivergenceError(t, "mechanical amplitude exceeded guard")
        C = _unpack_cov(y[6:])
        if feedback == "none":
            fb = None
        elif feedback == "coupled":
            fb = Feedback.from_cov(C, phi)
        elif isinstance(feedback, Feedback):
            fb = feedback
        else:
            fb = feedback(t)
        d1, d2, db = meanfield_rhs(st, t, params, fb, schedule)
        S = drift_matrix(params, st)
        dC = lyapunov_rhs(C, S, N)
        return np.concatenate([[d1.real, d1.imag, d2.real, d2.imag, db.real, db.imag], dC[_IU]])

    y0 = _pack(state0, cov0)
    t0 = float(min(t_eval[0], 0.0)) if state0.t == 0 else state0.t
    # integrate segment by segment so drive switches are hit exactly
    bounds = [t0, float(t_eval[-1])]
    if schedule is not None and t0 < schedule.t1 < bounds[1]:
        bounds = [t0, schedule.t1, bounds[1]]
    ys = []
    ts = []
    y = y0
    for k in range(len(bounds) - 1):
        lo, hi = bounds[k], bounds[k + 1]
        last = k == len(bounds) - 2
        mask = (t_eval >= lo) & ((t_eval <= hi) if last else (t_eval < hi))
        want = t_eval[mask]
        grid = want if (want.size and want[-1] == hi) else np.append(want, hi)
        sol = solve_ivp(rhs, (lo, hi), y, method=method, rtol=rtol, atol=atol,
                        t_eval=grid, max_step=max_step)
        if sol.status < 0:
            raise DivergenceError(float(sol.t[-1]) if sol.t.size else lo, sol.message)
        ts.append(sol.t[: want.size])
        ys.append(sol.y[:, : want.size])
        y = sol.y[:, -1]
    t = np.concatenate(ts)
    Y = np.concatenate(ys, axis=1)
    covs = np.array([_unpack_cov(Y[6:, i]) for i in range(Y.shape[1])])
    return GaussTrajectory(t, Y[0] + 1j * Y[1], Y[2] + 1j * Y[3], Y[4] + 1j * Y[5], covs)


def integrate_means(params: SystemParams, t_eval, schedule: DriveSchedule | None = None,
                    state0: ModeState | None = None, rtol: float = RTOL, atol: float = 1e-9,
                    max_step: float = 0.5) -> GaussTrajectory:
    """Mean-field amplitudes alone, without the covariance.

    When the schedule requests a PDH lock the probe detuning is held at
    ``delta_eff`` and corrected by ``g2 (x - x_f)``, where ``x_f`` follows
    the displacement through a first-order low-pass of time constant
    ``tau_pdh``.
    """
    t_eval = np.asarray(t_eval, dtype=float)
    if state0 is None:
        state0 = ModeState(0j, 0j, 0j)
    pdh = bool(schedule is not None and schedule.pdh)
    if pdh and not params.tau_pdh:
        raise ValueError("PDH lock requested but tau_pdh is not set")
    w, phi, bnl = params.omega_m, params.phi_nl, params.beta_nl
    k1, k2 = params.kappa
    g1, g2 = params.g
    det = params.delta_eff if pdh else params.delta0
    eph = complex(math.cos(phi), -math.sin(phi))

    def rhs(t, y):
        a1, a2, b = complex(y[0], y[1]), complex(y[2], y[3]), complex(y[4], y[5])
        e1, e2 = _drives(params, t, schedule)
        x = 2.0 * b.real
        xe = x - y[6] if pdh else x
        d1 = complex(-k1, det[0] + g1 * xe) * a1 + e1
        d2 = complex(-k2, det[1] + g2 * xe) * a2 + e2
        pi = 2.0 * (b * eph.conjugate()).imag
        db = (complex(-params.gamma_m, -w) * b + w * bnl / 3.0 * eph * pi ** 3
              + 1j * (g1 * abs(a1) ** 2 + g2 * abs(a2) ** 2))
        dxf = (x - y[6]) / params.tau_pdh if pdh else 0.0
        return [d1.real, d1.imag, d2.real, d2.imag, db.real, db.imag, dxf]

    y = np.concatenate([state0.as_real(), [2.0 * state0.beta.real if pdh else 0.0]])
    t0 = state0.t
    bounds = [t0, float(t_eval[-1])]
    if schedule is not None and t0 < schedule.t1 < bounds[1]:
        bounds = [t0, schedule.t1, bounds[1]]
    ts, ys = [], []
    for k in range(len(bounds) - 1):
        lo, hi = bounds[k], bounds[k + 1]
        last = k == len(bounds) - 2
        mask = (t_eval >= lo) & ((t_eval <= hi) if last else (t_eval < hi))
        want = t_eval[mask]
        grid = want if (want.size and want[-1] == hi) else np.append(want, hi)
        sol = solve_ivp(rhs, (lo, hi), y, method="DOP853", rtol=rtol, atol=atol,
                        t_eval=grid, max_step=max_step)
        if sol.status < 0:
            raise DivergenceError(float(sol.t[-1]) if sol.t.size else lo, sol.message)
        ts.append(sol.t[: want.size])
        ys.append(sol.y[:, : want.size])
        y = sol.y[:, -1]
    t = np.concatenate(ts)
    Y = np.concatenate(ys, axis=1)
    return GaussTrajectory(t, Y[0] + 1j * Y[1], Y[2] + 1j * Y[3], Y[4] + 1j * Y[5], None)


def _feedback_interp(traj: GaussTrajectory, phi: float):
    fbs = [Feedback.from_cov(C, phi) for C in traj.cov]
    t = traj.t
    cols = np.array([[f.cross[0].real, f.cross[0].imag, f.cross[1].real, f.cross[1].imag,
                      f.photons[0], f.photons[1], f.p_phi_sq] for f in fbs])

    def fb(tq):
        v = [np.interp(tq, t, cols[:, i]) for i in range(cols.shape[1])]
        return Feedback((complex(v[0], v[1]), complex(v[2], v[3])), (v[4], v[5]), v[6])

    return fb


def iterate_coupled(params: SystemParams, t_eval, schedule: DriveSchedule | None = None,
                    max_iters: int = 5, tol: float = 1e-6, state0: ModeState | None = None,
                    cov0=None, use_feedback: bool = True, **kw) -> GaussTrajectory:
    """Alternate mean-field and Lyapunov solves until the mean path settles.

    The first pass feeds back the moments of the initial covariance; each
    later pass uses the covariance path of the previous one.  ``tol`` is
    the sup-norm change of the means relative to their sup-norm.
    """
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    if cov0 is None:
        cov0 = initial_covariance(params)
    if not use_feedback:
        return integrate(params, t_eval, schedule, state0, cov0, "none", **kw)
    fb = Feedback.from_cov(cov0, params.phi_nl)
    prev = None
    resid = math.inf
    for it in range(1, max_iters + 1):
        traj = integrate(params, t_eval, schedule, state0, cov0, fb, **kw)
        m = traj.means()
        if prev is not None:
            resid = float(np.max(np.abs(m - prev)) / max(np.max(np.abs(m)), 1e-300))
            if resid < tol:
                traj.iterations, traj.residual = it, resid
                return traj
        prev = m
        fb = _feedback_interp(traj, params.phi_nl)
    raise ConvergenceError(f"no convergence after {max_iters} iterations", resid)
