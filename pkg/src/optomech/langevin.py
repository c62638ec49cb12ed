"""Stochastic c-number simulation of the nonlinear Langevin equations.

Input noises are complex white noises with symmetrised correlator
``<f*(t) f(t')> = (n + 1/2) delta(t - t')``, so ensemble second moments
reproduce the symmetrised covariances of :mod:`optomech.gaussfluct`.

Trajectory ``k`` of an ensemble uses a Philox stream seeded with
``seed0 + k``; the noise is drawn in Python and handed to the stepping
kernel, so both backends consume identical realisations.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backend as _backend
from ._kernels_py import N_COEF, N_NOISE, phi1
from .core import ConfigError, SystemParams
from .schedule import DriveSchedule

METHODS = {"euler": 0, "heun": 1}
HEADER_BYTES = 64
DEFAULT_STEPS_PER_PERIOD = 100


class DivergenceError(RuntimeError):
    def __init__(self, seeds, steps, dt):
        self.seeds = list(seeds)
        self.times = [s * dt for s in steps]
        detail = ", ".join(f"seed {s} at t={t:.6g}" for s, t in zip(self.seeds, self.times))
        super().__init__(f"trajectory diverged: {detail}")


class PartialFailure(RuntimeError):
    """Some ensemble members diverged; ``result`` holds the survivors."""

    def __init__(self, failed, result):
        super().__init__(f"{len(failed)} trajectories diverged (seeds {failed})")
        self.failed = failed
        self.result = result


# ---------------------------------------------------------------------------
# PDH window


def pdh_feedback(history, tau_pdh: float, dt: float) -> np.ndarray:
    """Sliding mean of ``b + b*`` over the last ``ceil(tau_pdh/dt)`` samples.

    Samples before the start of the record count as zero, as in the
    stepping kernels.
    """
    if tau_pdh <= 0:
        raise ValueError("tau_pdh must be positive")
    x = np.asarray(history, dtype=float)
    W = pdh_window(tau_pdh, dt)
    cs = np.concatenate([[0.0], np.cumsum(x)])
    n = np.arange(1, x.size + 1)
    return (cs[n] - cs[np.maximum(n - W, 0)]) / W


def pdh_window(tau_pdh: float, dt: float) -> int:
    return max(1, int(math.ceil(tau_pdh / dt - 1e-9)))


# ---------------------------------------------------------------------------
# set-up helpers


def default_dt(params: SystemParams) -> float:
    return 2 * math.pi / params.omega_m / DEFAULT_STEPS_PER_PERIOD


def check_resolution(params: SystemParams, dt: float):
    fastest = max(params.omega_m, *params.kappa, *(abs(d) for d in params.delta_eff))
    limit = 2 * math.pi / (20 * fastest)
    if dt > limit * (1 + 1e-12):
        raise ConfigError(f"dt={dt:.4g} exceeds the resolution limit {limit:.4g}")


def _ou_factor(rate, dt, exponential):
    if not exponential or rate * dt < 1e-12:
        return 1.0
    return math.sqrt(-math.expm1(-2 * rate * dt) / (2 * rate * dt))


def noise_scales(params: SystemParams, dt: float, method: str = "euler") -> np.ndarray:
    """Per-column standard deviations of the noise increments.

    Each complex increment ``zeta`` has ``E|zeta|^2 = (n + 1/2) dt``.  For
    the exponential stepper the damped channels are rescaled so the
    discrete stationary variance of an isolated mode is exact.
    """
    expo = method == "euler"
    out = np.zeros(N_NOISE)
    for j in range(2):
        sig = math.sqrt((params.n_opt[j] + 0.5) * dt / 2) * _ou_factor(params.kappa[j], dt, expo)
        out[4 * j: 4 * j + 2] = math.sqrt(2 * params.kappa_in[j]) * sig
        out[4 * j + 2: 4 * j + 4] = math.sqrt(2 * params.kappa_ex[j]) * sig
    sig_b = math.sqrt((params.n_bath + 0.5) * dt / 2) * _ou_factor(params.gamma_m, dt, expo)
    out[8:10] = math.sqrt(2 * params.gamma_m) * sig_b
    return out


def kernel_coefficients(params: SystemParams, dt: float, pdh: bool, guard: float) -> np.ndarray:
    c = np.zeros(N_COEF)
    # with the lock on, the static shift is removed together with the slow drift
    det = params.delta_eff if pdh else params.delta0
    c[0:2] = params.kappa
    c[2:4] = det
    c[4:6] = params.g
    c[6] = params.gamma_m
    c[7] = params.omega_m
    c[8] = params.beta_nl
    c[9] = params.phi_nl
    c[10] = dt
    c[11] = 1.0 if pdh else 0.0
    c[12] = guard
    zb = complex(-params.gamma_m, -params.omega_m) * dt
    eb = np.exp(zb)
    pb = complex(phi1(zb))
    c[13:17] = eb.real, eb.imag, pb.real, pb.imag
    return c


def drive_arrays(params: SystemParams, schedule: DriveSchedule | None, t: np.ndarray):
    """Pump (with modulation) and probe drives on the grid ``t``."""
    if schedule is None:
        fp = fm = np.ones_like(t)
        cal = False
    else:
        fp = np.asarray(schedule.pump_factor(t), dtype=float)
        fm = np.asarray(schedule.modulation_factor(t), dtype=float)
        cal = schedule.calibration
    d1 = params.E[0] * fp + 0j
    if params.E_m:
        d1 = d1 + params.E_m * fp * fm * np.exp(-1j * params.delta_m * t)
    if cal and params.phi_cal:
        d2 = params.E[1] * np.exp(-1j * params.phi_cal * np.sin(params.Omega_c * t))
    else:
        d2 = np.full(t.shape, params.E[1] + 0j)
    return np.ascontiguousarray(d1), np.ascontiguousarray(d2)


# ---------------------------------------------------------------------------
# records


@dataclass
class TrajectoryRecord:
    """Sampled trajectory on a uniform grid.

    ``ain2`` is the probe input-port noise integrated over each sampling
    interval ``[t_k, t_k + dt_rec)``; the homodyne output uses it for the
    exact input-output relation.
    """

    seed: int
    dt: float
    rec_every: int
    t: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b: np.ndarray
    ain2: np.ndarray | None = None
    checksum: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dt_rec(self) -> float:
        return self.dt * self.rec_every

    @property
    def n_steps(self) -> int:
        return len(self.t)

    def to_binary(self, path) -> Path:
        """Little-endian f64 rows ``(t, Re a1, Im a1, Re a2, Im a2, Re b, Im b)``."""
        path = Path(path)
        head = json.dumps({"cols": 7, "n": int(len(self.t)), "dt": self.dt_rec, "seed": int(self.seed)},
                          separators=(",", ":")).encode()
        if len(head) >= HEADER_BYTES:
            raise ValueError("header does not fit the preamble")
        head = head + b" " * (HEADER_BYTES - 1 - len(head)) + b"\n"
        data = np.column_stack([self.t, self.a1.real, self.a1.imag, self.a2.real, self.a2.imag,
                                self.b.real, self.b.imag]).astype("<f8")
        with path.open("wb") as fh:
            fh.write(head)
            fh.write(data.tobytes())
        return path

    @classmethod
    def from_binary(cls, path) -> "TrajectoryRecord":
        raw = Path(path).read_bytes()
        head = json.loads(raw[:HEADER_BYTES].decode())
        data = np.frombuffer(raw[HEADER_BYTES:], dtype="<f8").reshape(head["n"], head["cols"])
        return cls(head["seed"], head["dt"], 1, data[:, 0].copy(), data[:, 1] + 1j * data[:, 2],
                   data[:, 3] + 1j * data[:, 4], data[:, 5] + 1j * data[:, 6])

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "re_a1", "im_a1", "re_a2", "im_a2", "re_b", "im_b"])
            for k in range(len(self.t)):
                w.writerow([repr(float(v)) for v in (self.t[k], self.a1[k].real, self.a1[k].imag,
                                                     self.a2[k].real, self.a2[k].imag,
                                                     self.b[k].real, self.b[k].imag)])
        return path


# ---------------------------------------------------------------------------
# initial conditions


def _initial_means_cov(params: SystemParams, init, state0, cov0):
    from . import gaussfluct as gf

    if state0 is not None:
        means = np.array([state0.alpha1, state0.alpha2, state0.beta], dtype=complex)
        cov = gf.initial_covariance(params) if cov0 is None else np.asarray(cov0)
        return means, cov
    if init == "steady":
        cs = gf.cooling_steady_state(params)
        s = cs.state
        return np.array([s.alpha1, s.alpha2, s.beta]), cs.cov if cov0 is None else np.asarray(cov0)
    if init == "thermal":
        return np.zeros(3, complex), gf.initial_covariance(params) if cov0 is None else np.asarray(cov0)
    if init == "zero":
        return np.zeros(3, complex), np.zeros((6, 6))
    raise ValueError(f"unknown init {init!r}")


def _sample_initial(rng, means, chol):
    x = chol @ rng.standard_normal(6)
    # quadratures -> amplitudes: a = (x + i y)/sqrt(2)
    return means + (x[0::2] + 1j * x[1::2]) / math.sqrt(2.0)


def _chol(cov):
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    return v * np.sqrt(np.clip(w, 0.0, None))


# ---------------------------------------------------------------------------
# batch driver


@dataclass
class _Batch:
    seeds: list
    rec: np.ndarray          # (ntraj, nrec, 3)
    ain2: np.ndarray         # (ntraj, nrec)
    t: np.ndarray
    diverged: np.ndarray
    checksums: list


def _run_batch(params, schedule, seeds, dt, t_end, method, rec_every, init, state0, cov0,
               noise, backend, chunk, guard, checksum, nthreads) -> _Batch:
    if method not in METHODS:
        raise ValueError(f"method must be one of {tuple(METHODS)}")
    rec_every = int(rec_every)
    if rec_every < 1:
        raise ValueError("rec_every must be >= 1")
    n_rec = int(math.ceil(t_end / (dt * rec_every) - 1e-9)) + 1
    n_steps = n_rec * rec_every
    chunk = max(rec_every, (int(chunk) // rec_every) * rec_every)
    kernel = _backend.get_kernel(backend)
    nthreads = _backend.thread_count() if nthreads is None else int(nthreads)
    pdh = bool(schedule is not None and schedule.pdh)
    if pdh and not params.tau_pdh:
        raise ConfigError("PDH lock enabled but tau_pdh is not set")
    W = pdh_window(params.tau_pdh, dt) if pdh else 1
    coef = kernel_coefficients(params, dt, pdh, guard)
    scales = noise_scales(params, dt, method) if noise else np.zeros(N_NOISE)
    sig_in2 = math.sqrt((params.n_opt[1] + 0.5) * dt / 2) if noise else 0.0

    ntraj = len(seeds)
    rngs = [np.random.Generator(np.random.Philox(int(s))) for s in seeds]
    hashers = [hashlib.blake2b(digest_size=16) for _ in seeds] if checksum else None
    means, cov = _initial_means_cov(params, init, state0, cov0)
    L = _chol(cov) if noise else np.zeros((6, 6))
    state = np.empty((ntraj, 3), dtype=complex)
    for k, rng in enumerate(rngs):
        state[k] = _sample_initial(rng, means, L)
    rec = np.zeros((ntraj, n_rec, 3), dtype=complex)
    ain2 = np.zeros((ntraj, n_rec), dtype=complex)
    pdh_buf = np.zeros((ntraj, W))
    pdh_sum = np.zeros(ntraj)
    pdh_idx = 0
    diverged = np.full(ntraj, -1, dtype=np.int64)
    done = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while done < n_steps:
            L_c = min(chunk, n_steps - done)
            raw = np.empty((ntraj, L_c, N_NOISE))
            for k, rng in enumerate(rngs):
                raw[k] = rng.standard_normal((L_c, N_NOISE))
                if hashers is not None:
                    hashers[k].update(raw[k].tobytes())
            scaled = np.ascontiguousarray(raw * scales)
            tg = (done + np.arange(L_c + 1)) * dt
            d1, d2 = drive_arrays(params, schedule, tg)
            r0 = done // rec_every
            sub = np.zeros((ntraj, L_c // rec_every, 3), dtype=complex)
            pdh_idx = kernel(state, scaled, d1, d2, coef, pdh_buf, pdh_sum, pdh_idx,
                             rec_every, sub, diverged, done, METHODS[method], nthreads)
            rec[:, r0: r0 + sub.shape[1]] = sub
            zin = sig_in2 * (raw[:, :, 4] + 1j * raw[:, :, 5])
            ain2[:, r0: r0 + sub.shape[1]] = zin.reshape(ntraj, -1, rec_every).sum(axis=2)
            done += L_c
    t = np.arange(n_rec) * dt * rec_every
    sums = [h.hexdigest() for h in hashers] if hashers is not None else [None] * ntraj
    return _Batch(list(seeds), rec, ain2, t, diverged, sums)


def _prep(params, schedule, dt, t_end):
    dt = default_dt(params) if dt is None else float(dt)
    if dt <= 0:
        raise ConfigError("dt must be positive")
    check_resolution(params, dt)
    if t_end is None:
        if schedule is None:
            raise ValueError("t_end or a schedule is required")
        t_end = schedule.t2
    return dt, float(t_end)


def integrate_trajectory(params: SystemParams, schedule: DriveSchedule | None, seed: int,
                         dt: float | None = None, *, t_end: float | None = None,
                         method: str = "euler", rec_every: int = 1, init: str = "thermal",
                         state0=None, cov0=None, noise: bool = True, backend: str | None = None,
                         chunk: int = 8192, guard: float = 1e12, checksum: bool = True,
                         nthreads: int | None = None) -> TrajectoryRecord:
    """Integrate one stochastic trajectory.

    ``method="euler"`` is an exponential Euler-Maruyama scheme: each
    cavity mode is propagated exactly over a step with its detuning
    frozen, the mechanics with its exact linear propagator, and the
    remaining terms are held constant.  ``"heun"`` is the
    predictor-corrector on the full drift.  Noise is additive in both.
    """
    dt, t_end = _prep(params, schedule, dt, t_end)
    bt = _run_batch(params, schedule, [seed], dt, t_end, method, rec_every, init, state0, cov0,
                    noise, backend, chunk, guard, checksum, nthreads)
    if bt.diverged[0] >= 0:
        raise DivergenceError([seed], [int(bt.diverged[0])], dt)
    meta = {"method": method, "backend": backend or _backend.default_backend(),
            "noise": noise, "schedule": schedule.to_dict() if schedule else None}
    return TrajectoryRecord(int(seed), dt, int(rec_every), bt.t, bt.rec[0, :, 0], bt.rec[0, :, 1],
                            bt.rec[0, :, 2], bt.ain2[0], bt.checksums[0], meta)


def integrate_batch(params: SystemParams, schedule: DriveSchedule | None, seeds, dt: float | None = None,
                    *, t_end: float | None = None, method: str = "euler", rec_every: int = 1,
                    init: str = "thermal", state0=None, cov0=None, noise: bool = True,
                    backend: str | None = None, chunk: int = 8192, guard: float = 1e12,
                    checksum: bool = True, nthreads: int | None = None):
    """Integrate one trajectory per seed in a single (threaded) kernel pass.

    Returns ``(records, failed)``: a record per seed, ``None`` where the
    trajectory diverged, and the list of diverged seeds.  Each record is
    identical to what :func:`integrate_trajectory` gives for that seed.
    """
    dt, t_end = _prep(params, schedule, dt, t_end)
    bt = _run_batch(params, schedule, list(seeds), dt, t_end, method, rec_every, init, state0,
                    cov0, noise, backend, chunk, guard, checksum, nthreads)
    meta = {"method": method, "backend": backend or _backend.default_backend(),
            "noise": noise, "schedule": schedule.to_dict() if schedule else None}
    out, failed = [], []
    for k, s in enumerate(bt.seeds):
        if bt.diverged[k] >= 0:
            out.append(None)
            failed.append(int(s))
            continue
        out.append(TrajectoryRecord(int(s), dt, int(rec_every), bt.t, bt.rec[k, :, 0],
                                    bt.rec[k, :, 1], bt.rec[k, :, 2], bt.ain2[k],
                                    bt.checksums[k], dict(meta)))
    return out, failed


# ---------------------------------------------------------------------------
# ensembles


def quadratures(amps: np.ndarray) -> np.ndarray:
    """``(..., 3)`` complex amplitudes -> ``(..., 6)`` quadratures ``sqrt(2)(Re, Im)``."""
    out = np.empty(amps.shape[:-1] + (6,))
    out[..., 0::2] = math.sqrt(2.0) * amps.real
    out[..., 1::2] = math.sqrt(2.0) * amps.imag
    return out


@dataclass
class EnsembleResult:
    t: np.ndarray
    mean: np.ndarray        # (n_t, 3) complex
    cov: np.ndarray         # (n_t, 6, 6) quadrature covariance
    cov_stderr: np.ndarray  # (n_t, 6, 6)
    n_traj: int
    seeds: list
    failed: list
    records: list | None = None

    @property
    def occupancy(self) -> np.ndarray:
        return 0.5 * (self.cov[:, 4, 4] + self.cov[:, 5, 5]) - 0.5


def ensemble_run(params: SystemParams, schedule: DriveSchedule | None, n_traj: int, seed0: int = 0,
                 dt: float | None = None, *, t_end: float | None = None, method: str = "euler",
                 rec_every: int = 1, init: str = "thermal", state0=None, cov0=None,
                 noise: bool = True, backend: str | None = None, keep_records: bool = False,
                 batch: int = 256, chunk: int = 4096, guard: float = 1e12,
                 nthreads: int | None = None) -> EnsembleResult:
    """Means and symmetrised second moments across ``n_traj`` trajectories."""
    if n_traj < 2:
        raise ValueError("n_traj must be >= 2")
    dt, t_end = _prep(params, schedule, dt, t_end)
    seeds = [int(seed0) + k for k in range(n_traj)]
    parts = []
    records = [] if keep_records else None
    failed = []
    for lo in range(0, n_traj, batch):
        bt = _run_batch(params, schedule, seeds[lo: lo + batch], dt, t_end, method, rec_every,
                        init, state0, cov0, noise, backend, chunk, guard, keep_records, nthreads)
        ok = bt.diverged < 0
        failed += [s for s, d in zip(bt.seeds, bt.diverged) if d >= 0]
        parts.append(bt.rec[ok])
        if keep_records:
            for k in np.flatnonzero(ok):
                records.append(TrajectoryRecord(bt.seeds[k], dt, rec_every, bt.t, bt.rec[k, :, 0],
                                                bt.rec[k, :, 1], bt.rec[k, :, 2], bt.ain2[k],
                                                bt.checksums[k]))
        t = bt.t
    amps = np.concatenate(parts, axis=0)
    n_ok = amps.shape[0]
    if n_ok < 2:
        raise DivergenceError(failed, [0] * len(failed), dt)
    q = quadratures(amps)                       # (n, n_t, 6)
    mean = amps.mean(axis=0)
    dev = q - q.mean(axis=0)
    prod = dev[..., :, None] * dev[..., None, :]   # (n, n_t, 6, 6)
    cov = prod.sum(axis=0) / (n_ok - 1)
    se = prod.std(axis=0, ddof=1) / math.sqrt(n_ok)
    res = EnsembleResult(t, mean, cov, se, n_ok, [s for s in seeds if s not in set(failed)],
                         failed, records)
    if failed:
        raise PartialFailure(failed, res)
    return res
