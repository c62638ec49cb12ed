"""Nonlinearity estimation protocols: power sweeps, spectral readout and linear fits.

Three protocols are supported:

``stationary``
    The slow amplitude is read in the driven steady state and the cubic
    part of the slow-flow equation is attributed to the nonlinearity.  This
    is biased by the third-order radiation-pressure coefficient.
``turnoff``
    Pump and modulation are switched off at ``t1``; the probe spectrum over
    ``[t1, t1 + window]`` gives the shifted mechanical frequency and, via
    the calibration tone, the mean ``|A_b|^2``.
``appendix``
    Only the modulation is switched off; the pump keeps damping the mode,
    so the peak is broad and weak.

Each protocol runs at one of three tiers: ``analytic`` (closed-form decay
laws, noiseless), ``gauss`` (deterministic mean-field trajectories) and
``sde`` (stochastic Langevin trajectories).
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import trapezoid

from . import detect, gaussfluct, langevin, slowflow
from .core import ConfigError, SystemParams, normalize
from .schedule import DriveSchedule

PROTOCOLS = ("stationary", "turnoff", "appendix")
TIERS = ("analytic", "gauss", "sde")


class FitError(ValueError):
    pass


class ProtocolError(RuntimeError):
    """Protocol could not produce an estimate; ``run`` holds the partial results."""

    def __init__(self, msg, run=None):
        super().__init__(msg)
        self.run = run


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    R: float
    stderr: float
    intercept_stderr: float
    n: int
    flags: tuple = ()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["flags"] = list(self.flags)
        return d


def linear_fit(x, y, weights=None) -> FitResult:
    """Least-squares line ``y = slope x + intercept`` with Pearson ``R``.

    ``weights`` are inverse variances.  A response with zero variance gives
    ``R = 0`` and the flag ``"R_undefined"``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise FitError("x and y must be 1-d arrays of equal length")
    n = x.size
    if n < 3:
        raise FitError(f"need at least 3 points, got {n}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise FitError("non-finite data")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != x.shape or np.any(w <= 0) or not np.all(np.isfinite(w)):
        raise FitError("weights must be positive and finite")
    W = w.sum()
    xm = (w * x).sum() / W
    ym = (w * y).sum() / W
    dx, dy = x - xm, y - ym
    sxx = (w * dx * dx).sum()
    if sxx <= (1e-14 * max(abs(xm), np.abs(x).max())) ** 2 * W:
        raise FitError("degenerate abscissa: all x equal")
    sxy = (w * dx * dy).sum()
    syy = (w * dy * dy).sum()
    slope = sxy / sxx
    intercept = ym - slope * xm
    flags = []
    if syy == 0:
        R = 0.0
        flags.append("R_undefined")
    else:
        R = float(np.clip(sxy / math.sqrt(sxx * syy), -1.0, 1.0))
    resid = y - (slope * x + intercept)
    if weights is None:
        s2 = (resid ** 2).sum() / (n - 2)
        se = math.sqrt(s2 / sxx)
        se_b = math.sqrt(s2 * (1.0 / n + xm * xm / sxx))
    else:
        # absolute weights: parameter covariance from the weighted normal equations
        se = math.sqrt(1.0 / sxx)
        se_b = math.sqrt(1.0 / W + xm * xm / sxx)
    return FitResult(float(slope), float(intercept), R, float(se), float(se_b), n, tuple(flags))


# ---------------------------------------------------------------------------
# settings and records


@dataclass(frozen=True)
class PipelineSettings:
    """Protocol timing and readout choices, in units of ``1/omega_m``.

    ``signal_band`` and ``cal_band`` are in units of ``omega_m``.
    """

    t1: float = 1500.0
    window: float = 5000.0
    dt: float | None = None
    pad: int = 8
    signal_band: tuple = (0.96, 1.04)
    cal_band: tuple = (0.88, 0.92)
    signal_window: str = "rectangular"
    cal_window: str = "hann"
    calibration: str = "bessel"
    method: str = "euler"
    init: str = "thermal"
    tau_off: float = 0.0
    n_grid: int = 4001

    @property
    def t2(self) -> float:
        return self.t1 + self.window

    @classmethod
    def from_run(cls, run: dict, params: SystemParams) -> "PipelineSettings":
        """Build from a config ``run`` table (times in seconds, bands in ``omega_m``)."""
        w = params.omega_unit if params.normalized else params.omega_m
        kw = {}
        try:
            if "t1" in run:
                kw["t1"] = float(run["t1"]) * w
            if "t2" in run:
                kw["window"] = float(run["t2"]) * w - kw.get("t1", cls.t1)
            if "dt" in run and run["dt"] is not None:
                kw["dt"] = float(run["dt"]) * w
            if "tau_off" in run:
                kw["tau_off"] = float(run["tau_off"]) * w
            for key in ("pad", "n_grid"):
                if key in run:
                    kw[key] = int(run[key])
            for key in ("signal_band", "cal_band"):
                if key in run:
                    lo, hi = run[key]
                    kw[key] = (float(lo), float(hi))
            for key in ("signal_window", "cal_window", "calibration", "method", "init"):
                if key in run:
                    kw[key] = str(run[key])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid run settings: {exc}") from exc
        s = cls(**kw)
        s.validate()
        return s

    def validate(self):
        if self.t1 <= 0 or self.window <= 0:
            raise ConfigError("t1 and the FFT window must be positive")
        if self.dt is not None and self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.calibration not in ("linear", "bessel"):
            raise ConfigError("calibration must be 'linear' or 'bessel'")
        for band in (self.signal_band, self.cal_band):
            if not band[0] < band[1]:
                raise ConfigError(f"invalid band {band}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t2"] = self.t2
        return d


@dataclass
class PointResult:
    P_m: float
    rep: int
    seed: int | None
    A2: float | None = None
    A2_err: float | None = None
    shift: float | None = None          # (omega_m' - omega_m)/omega_m
    shift_err: float | None = None
    xi2: float | None = None
    A2_model: float | None = None       # |A_b^st|^2 from the slow flow
    ok: bool = True
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProtocolRun:
    protocol: str
    tier: str
    P_m: list
    points: list
    settings: dict = field(default_factory=dict)

    @property
    def valid(self) -> list:
        return [p for p in self.points if p.ok]

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "tier": self.tier, "P_m": list(self.P_m),
                "settings": self.settings, "points": [p.to_dict() for p in self.points]}

    def to_csv(self, path) -> Path:
        path = Path(path)
        cols = ["P_m", "rep", "seed", "A2", "A2_err", "shift", "shift_err", "xi2", "A2_model",
                "ok", "error"]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for p in self.points:
                d = p.to_dict()
                w.writerow(["" if d[c] is None else (repr(d[c]) if isinstance(d[c], float) else d[c])
                            for c in cols])
        return path


@dataclass
class EstimationResult:
    protocol: str
    tier: str
    slope: float
    intercept: float
    R: float
    stderr: float
    beta_est: float
    beta_true: float | None
    E_r: float | None
    delta_beta: float | None
    rep_slopes: list
    rep_R: list
    n_points: int
    n_failed: int
    resolution: float | None = None
    expected_shift: float | None = None
    flags: list = field(default_factory=list)

    @property
    def resolved(self) -> bool:
        """Whether the slope differs from zero by more than two standard errors."""
        return abs(self.slope) > 2.0 * self.stderr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["resolved"] = self.resolved
        return d


# ---------------------------------------------------------------------------
# point evaluation


def _stationary_y(A: complex, coeffs: slowflow.RPCoefficients, omega: float) -> float:
    """Apparent ``beta |A|^2`` when the cubic term is attributed to the nonlinearity."""
    num = coeffs.Gamma * A - coeffs.c0 - coeffs.c2 * A * A - coeffs.c2m * abs(A) ** 2
    return (num / (-1j * omega * A)).real


def _analytic_point(protocol, p: SystemParams, s: PipelineSettings):
    st = slowflow.steady_amplitude(p)
    A = st.fixed_point
    A2_model = abs(A) ** 2
    if protocol == "stationary":
        co = slowflow.rp_coefficients(p, "stationary")
        return A2_model, _stationary_y(A, co, p.omega_m), A2_model
    tau = np.linspace(0.0, s.window, s.n_grid)
    if protocol == "turnoff":
        a2 = np.abs(slowflow.analytic_decay(A, tau, p)) ** 2
        wi = slowflow.instantaneous_frequency("turnoff", tau, A2_model, p)
    else:
        co = slowflow.rp_coefficients(p, "appendix")
        a2 = np.abs(slowflow.appendix_decay(A, tau, p, co)) ** 2
        wi = slowflow.instantaneous_frequency("appendix", tau, A2_model, p, co)
    x = trapezoid(a2, tau) / s.window
    y = trapezoid(wi, tau) / s.window / p.omega_m - 1.0
    return float(x), float(y), A2_model


def _read_spectrum(rec, protocol, p: SystemParams, s: PipelineSettings, include_noise: bool,
                   spectra_path: Path | None):
    """Homodyne -> PSD -> peaks -> calibrated ``(|A|^2, err, shift, xi2)``."""
    h = detect.homodyne_output(rec, p, include_noise=include_noise)
    seg = (s.t1, s.t2)
    w = p.omega_m
    spec = detect.psd(h, s.signal_window, seg, s.pad)
    spec_c = spec if s.cal_window == s.signal_window else detect.psd(h, s.cal_window, seg, s.pad)
    if spectra_path is not None:
        keep = spec.omega <= 2.0 * w
        detect.SpectrumEstimate(spec.omega[keep], spec.psd[keep], spec.resolution, spec.window,
                                spec.n_avg, spec.pad).to_csv(spectra_path, w)
    sig = detect.find_peak(spec, (s.signal_band[0] * w, s.signal_band[1] * w))
    cal = detect.find_peak(spec_c, (s.cal_band[0] * w, s.cal_band[1] * w))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        c = detect.calibrate_amplitude(sig, cal, p, method=s.calibration)
    shift = sig.center / w - 1.0
    # parabolic-interpolation scatter is a fraction of a resolution bin
    shift_err = 0.1 * spec.resolution / w
    return c.value, c.value * c.frac_uncertainty, shift, c.xi2, spec.resolution


def _stationary_readout(rec_b, t, p: SystemParams, s: PipelineSettings):
    """Demodulate the mechanical record at ``delta_m`` and invert the slow flow."""
    m = (t >= s.t1) & (t < s.t2)
    A = complex(np.mean(np.asarray(rec_b)[m] * np.exp(1j * p.delta_m * t[m])))
    co = slowflow.rp_coefficients(p, "stationary")
    return abs(A) ** 2, _stationary_y(A, co, p.omega_m)


def _schedule(protocol: str, s: PipelineSettings) -> DriveSchedule:
    if protocol == "stationary":
        return DriveSchedule.for_protocol("stationary", s.t1, s.t2)
    return DriveSchedule.for_protocol(protocol, s.t1, s.t2, tau=s.tau_off, pdh=True,
                                      calibration=True)


def _point_seed(seed: int, i: int, rep: int) -> int:
    return int(np.random.SeedSequence([int(seed), i, rep]).generate_state(1, np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# protocols


def _fit_run(run: ProtocolRun, beta_true, resolution, expected_shift, n_reps) -> EstimationResult:
    ok = run.valid
    flags = []
    if len(ok) < 3:
        raise ProtocolError(f"only {len(ok)} valid points (need >= 3)", run)
    x = np.array([p.A2 for p in ok])
    y = np.array([p.shift for p in ok])
    try:
        fit = linear_fit(x, y)
    except FitError as exc:
        raise ProtocolError(f"fit failed: {exc}", run) from exc
    flags += list(fit.flags)
    rep_slopes, rep_R = [], []
    if n_reps > 1:
        for r in range(n_reps):
            pts = [p for p in ok if p.rep == r]
            if len(pts) >= 3:
                try:
                    f = linear_fit([p.A2 for p in pts], [p.shift for p in pts])
                except FitError:
                    continue
                rep_slopes.append(f.slope)
                rep_R.append(f.R)
    delta = float(np.std(rep_slopes, ddof=1)) if len(rep_slopes) >= 2 else None
    E_r = abs(fit.slope - beta_true) / abs(beta_true) if beta_true else None
    if resolution is not None and expected_shift and resolution >= 10.0 * expected_shift:
        flags.append("resolution_limited")
    return EstimationResult(run.protocol, run.tier, fit.slope, fit.intercept, fit.R, fit.stderr,
                            fit.slope, beta_true, E_r, delta, rep_slopes, rep_R, len(ok),
                            len(run.points) - len(ok), resolution, expected_shift, flags)


def run_protocol(protocol: str, params: SystemParams, P_m_list: Sequence[float],
                 tier: str = "analytic", n_traj: int = 1, seed: int = 0,
                 settings: PipelineSettings | None = None,
                 progress: Callable[[str], None] | None = None,
                 spectra_dir=None, nthreads: int | None = None):
    """Run a power sweep and fit the frequency shift against ``|A_b|^2``.

    Returns ``(ProtocolRun, EstimationResult)``.  ``n_traj`` independent
    repetitions are run per power at the ``sde`` tier; the ``gauss`` and
    ``analytic`` tiers are deterministic and use one.  Per-point failures
    (missing peaks, divergence) are recorded on the point; fewer than three
    valid points raise :class:`ProtocolError`.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    if tier not in TIERS:
        raise ValueError(f"tier must be one of {TIERS}")
    P_m_list = [float(v) for v in P_m_list]
    if len(P_m_list) < 1:
        raise ValueError("P_m list is empty")
    s = settings or PipelineSettings()
    s.validate()
    say = progress or (lambda msg: None)
    p0 = normalize(params)
    beta_true = p0.beta_nl
    n_reps = max(1, int(n_traj)) if tier == "sde" else 1
    dt = s.dt if s.dt is not None else 2 * math.pi / langevin.DEFAULT_STEPS_PER_PERIOD
    sched = _schedule(protocol, s)
    spectra_dir = Path(spectra_dir) if spectra_dir is not None else None
    if spectra_dir is not None:
        spectra_dir.mkdir(parents=True, exist_ok=True)
    points = []
    resolution = None
    for i, P_m in enumerate(P_m_list):
        p = p0.with_modulation_power(P_m)
        try:
            A2_model = abs(slowflow.steady_amplitude(p).fixed_point) ** 2
        except slowflow.NewtonError as exc:
            points += [PointResult(P_m, r, None, ok=False, error=f"steady amplitude: {exc}")
                       for r in range(n_reps)]
            continue
        say(f"[{protocol}/{tier}] P_m={P_m:.4g} W ({i + 1}/{len(P_m_list)})")
        if tier == "analytic":
            try:
                x, y, _ = _analytic_point(protocol, p, s)
                points.append(PointResult(P_m, 0, None, x, 0.0, y, 0.0, None, A2_model))
            except (slowflow.FiniteTimeSingularity, ZeroDivisionError) as exc:
                points.append(PointResult(P_m, 0, None, A2_model=A2_model, ok=False, error=str(exc)))
            continue
        if tier == "gauss":
            tg = np.arange(0.0, s.t2 + 0.5 * dt, dt)
            try:
                recs = [gaussfluct.integrate_means(p, tg, sched)]
            except gaussfluct.DivergenceError as exc:
                points.append(PointResult(P_m, 0, None, A2_model=A2_model, ok=False,
                                          error=f"divergence: {exc}"))
                continue
            seeds = [None]
        else:
            seeds = [_point_seed(seed, i, r) for r in range(n_reps)]
            recs, _ = langevin.integrate_batch(
                p, sched, seeds, dt, t_end=s.t2, method=s.method, init=s.init,
                checksum=False, nthreads=nthreads)
        for r, (sd, rec) in enumerate(zip(seeds, recs)):
            pt = PointResult(P_m, r, sd, A2_model=A2_model)
            if rec is None:
                pt.ok, pt.error = False, "trajectory diverged"
                points.append(pt)
                continue
            try:
                if protocol == "stationary":
                    b = rec.beta if tier == "gauss" else rec.b
                    pt.A2, pt.shift = _stationary_readout(b, np.asarray(rec.t), p, s)
                else:
                    path = None
                    if spectra_dir is not None:
                        path = spectra_dir / f"{protocol}_{tier}_p{i:02d}_r{r:02d}.csv"
                    pt.A2, pt.A2_err, pt.shift, pt.xi2, resolution = _read_spectrum(
                        rec, protocol, p, s, include_noise=(tier == "sde"), spectra_path=path)
                    pt.shift_err = 0.1 * resolution
            except (detect.PeakNotFound, detect.CalibrationError, detect.ResolutionError,
                    detect.DataError) as exc:
                pt.ok, pt.error = False, f"{type(exc).__name__}: {exc}"
            points.append(pt)
    run = ProtocolRun(protocol, tier, P_m_list, points, s.to_dict())
    expected = None
    if beta_true and protocol != "stationary":
        A2max = max((pt.A2_model or 0.0) for pt in points)
        expected = abs(beta_true) * A2max
        if resolution is not None and resolution >= 10.0 * expected:
            warnings.warn(f"FFT resolution {resolution:.3g} exceeds ten times the expected "
                          f"shift {expected:.3g}; expect step-like readout", RuntimeWarning,
                          stacklevel=2)
    return run, _fit_run(run, beta_true, resolution, expected, n_reps)


# ---------------------------------------------------------------------------
# sensitivity


@dataclass
class SweepRow:
    beta: float
    beta_mean: float
    E_r: float
    rel_spread: float
    R: float
    estimates: list
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SweepResult:
    rows: list
    floor: float | None

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "floor": self.floor}


def sensitivity_sweep(params: SystemParams, beta_list: Sequence[float], repetitions: int = 13,
                      P_m_list: Sequence[float] = (), tier: str = "sde",
                      settings: PipelineSettings | None = None, seed0: int = 0,
                      seeds: Sequence[int] | None = None, protocol: str = "turnoff",
                      progress: Callable[[str], None] | None = None,
                      nthreads: int | None = None) -> SweepResult:
    """Repeat the estimate over independent seeds for each ``beta`` in ``beta_list``.

    Repetition ``r`` uses seed ``seeds[r]`` (default ``seed0 + r``).  The
    floor is the smallest ``beta`` from which every larger value satisfies
    ``E_r < 0.5`` and ``R > 0.9``.
    """
    if repetitions < 2:
        raise ValueError("repetitions must be >= 2")
    if seeds is None:
        seeds = [int(seed0) + r for r in range(repetitions)]
    elif len(seeds) != repetitions:
        raise ValueError("need one seed per repetition")
    rows = []
    for beta in sorted(float(b) for b in beta_list):
        p = params.replace(beta_nl=beta)
        ests, Rs, flags = [], [], set()
        for r, sd in enumerate(seeds):
            with warnings.catch_warnings():
                # the resolution condition is reported through the flags instead
                warnings.simplefilter("ignore", RuntimeWarning)
                _, res = run_protocol(protocol, p, P_m_list, tier, 1, sd, settings, progress,
                                      nthreads=nthreads)
            ests.append(res.beta_est)
            Rs.append(res.R)
            flags.update(res.flags)
        mean = float(np.mean(ests))
        spread = float(np.std(ests, ddof=1))
        E_r = abs(mean - beta) / beta if beta else math.inf
        rel = spread / beta if beta else math.inf
        rows.append(SweepRow(beta, mean, E_r, rel, float(np.mean(Rs)), ests, sorted(flags)))
    floor = None
    for row in reversed(rows):
        if row.E_r < 0.5 and row.R > 0.9:
            floor = row.beta
        else:
            break
    return SweepResult(rows, floor)
