"""Homodyne detection of the probe, spectra, peaks and amplitude calibration."""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import SystemParams
from .slowflow import bessel_jn


class DataError(ValueError):
    pass


class ResolutionError(ValueError):
    pass


class PeakNotFound(RuntimeError):
    pass


class CalibrationError(RuntimeError):
    pass


MIN_SAMPLES = 1024


@dataclass
class HomodyneRecord:
    t: np.ndarray
    y: np.ndarray
    dt: float
    kappa_in2: float
    segment: tuple
    meta: dict = field(default_factory=dict)


def homodyne_output(record, params: SystemParams, rng: np.random.Generator | None = None,
                    include_noise: bool = True) -> HomodyneRecord:
    """Phase quadrature ``Y = 2 Im(sqrt(2 kappa_in2) a2 - a_in2)`` of the probe output.

    Uses the recorded input noise when available, else draws a fresh
    vacuum-plus-thermal realisation (flagged in ``meta``).
    """
    a2 = getattr(record, "a2", None)
    if a2 is None:
        a2 = getattr(record, "alpha2", None)   # mean-field trajectory
    if a2 is None:
        raise DataError("trajectory has no probe series")
    a2 = np.asarray(a2)
    t = np.asarray(record.t)
    if hasattr(record, "dt"):
        dtr = record.dt * getattr(record, "rec_every", 1)
    else:
        steps = np.diff(t)
        dtr = float(steps.mean()) if steps.size else 0.0
        if steps.size and np.ptp(steps) > 1e-9 * dtr:
            raise DataError("trajectory grid is not uniform")
    k_in = params.kappa_in[1]
    y = 2.0 * math.sqrt(2 * k_in) * a2.imag
    meta = {"input_noise": "none"}
    if include_noise:
        ain = getattr(record, "ain2", None)
        if ain is not None:
            y = y - 2.0 * np.asarray(ain).imag / dtr
            meta["input_noise"] = "recorded"
        else:
            rng = np.random.default_rng() if rng is None else rng
            sig = math.sqrt((params.n_opt[1] + 0.5) / dtr / 2)
            y = y - 2.0 * sig * rng.standard_normal(a2.shape)
            meta["input_noise"] = "resampled"
    return HomodyneRecord(t, y, dtr, k_in, (float(t[0]), float(t[-1])), meta)


@dataclass
class SpectrumEstimate:
    omega: np.ndarray
    psd: np.ndarray
    resolution: float
    window: str
    n_avg: int = 1
    pad: int = 1

    @property
    def bin_width(self) -> float:
        return float(self.omega[1] - self.omega[0])

    def to_csv(self, path, omega_m: float = 1.0) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["omega_over_omega_m", "psd"])
            for o, s in zip(self.omega / omega_m, self.psd):
                w.writerow([repr(float(o)), repr(float(s))])
        return path


def psd(record: HomodyneRecord, window: str = "rectangular", segment=None,
        pad: int = 1) -> SpectrumEstimate:
    """One-sided periodogram on the angular-frequency grid.

    The positive- and negative-frequency halves are folded together, so
    ``sum(psd) * d_omega / 2 pi`` equals the variance of the (mean-removed)
    segment and white noise of variance ``s^2`` sits at ``2 s^2 dt``.
    ``pad`` zero-pads to a ``pad``-times finer grid without changing the
    resolution ``2 pi / T``.
    """
    t = np.asarray(record.t)
    y = np.asarray(record.y, dtype=float)
    if segment is not None:
        lo, hi = segment
        if lo < t[0] - 1e-9 * max(1.0, abs(t[0])) or hi > t[-1] + record.dt * (1 + 1e-9):
            raise ResolutionError("segment lies outside the record")
        sel = (t >= lo - 1e-9 * record.dt) & (t < hi - 1e-9 * record.dt)
        y = y[sel]
    M = y.size
    T = M * record.dt
    if M < MIN_SAMPLES:
        res = 2 * math.pi / T if T > 0 else math.inf
        raise ResolutionError(f"segment has {M} samples (< {MIN_SAMPLES}); "
                              f"minimum resolvable shift would be {res:.4g}")
    y = y - y.mean()
    if window == "rectangular":
        w = np.ones(M)
    elif window == "hann":
        w = np.hanning(M)
    else:
        raise ValueError("window must be 'rectangular' or 'hann'")
    pad = max(1, int(pad))
    X = np.fft.rfft(y * w, n=pad * M)
    S = record.dt * np.abs(X) ** 2 / np.sum(w * w)
    nfft = pad * M
    S[1:(nfft + 1) // 2] *= 2.0
    omega = 2 * math.pi * np.fft.rfftfreq(nfft, record.dt)
    return SpectrumEstimate(omega, S, 2 * math.pi / T, window, 1, pad)


@dataclass
class PeakMeasurement:
    center: float
    height: float
    area: float
    background: float
    resolution: float
    bin_width: float

    @property
    def net_area(self) -> float:
        """Area with the band-median background removed."""
        return max(self.area - self.background * 7 * self.resolution / (2 * math.pi), 0.0)

    def to_json(self) -> str:
        return json.dumps({"center": self.center, "height": self.height, "area": self.area,
                           "resolution": self.resolution})

    def to_dict(self) -> dict:
        return asdict(self)


def find_peak(spec: SpectrumEstimate, band, contrast: float = 10.0) -> PeakMeasurement:
    """Largest local maximum in ``band`` with parabolic sub-bin interpolation.

    The area sums the PSD over +-3 resolution bins (times ``d_omega/2pi``);
    the background is the median of the outer quarters of the band,
    excluding that window.
    """
    lo, hi = band
    om, S = spec.omega, spec.psd
    idx = np.flatnonzero((om >= lo) & (om <= hi))
    if idx.size < 5:
        raise PeakNotFound(f"band [{lo:.6g}, {hi:.6g}] spans fewer than 5 bins")
    k = idx[np.argmax(S[idx])]
    if k == idx[0] or k == idx[-1]:
        raise PeakNotFound("maximum sits at the band edge")
    half = 3 * spec.pad
    # background from the outer quarters of the band, away from the peak
    q = max(idx.size // 4, 1)
    edge = np.concatenate([idx[:q], idx[-q:]])
    rest = edge[np.abs(edge - k) > half]
    bg = float(np.median(S[rest])) if rest.size >= 3 else float(S[idx].min())
    if S[k] <= contrast * bg:
        raise PeakNotFound("no maximum above the background criterion")
    y0, y1, y2 = S[k - 1], S[k], S[k + 1]
    den = y0 - 2 * y1 + y2
    delta = 0.5 * (y0 - y2) / den if den != 0 else 0.0
    delta = float(np.clip(delta, -0.5, 0.5))
    dw = spec.bin_width
    center = float(om[k] + delta * dw)
    height = float(y1 - 0.25 * (y0 - y2) * delta)
    a, b = max(k - half, 0), min(k + half + 1, S.size)
    area = float(S[a:b].sum() * dw / (2 * math.pi))
    return PeakMeasurement(center, height, area, bg, spec.resolution, dw)


@dataclass(frozen=True)
class Calibration:
    value: float          # |A_b|^2
    frac_uncertainty: float
    xi2: float
    method: str = "linear"


def transduction_ratio(params: SystemParams, omega_sig: float) -> float:
    """``|A_b|^2`` per unit signal/calibration area ratio (resonant probe).

    At resonance the probe phase responds to the mechanical detuning
    modulation ``2 g2 |A_b| cos(w t)`` as ``2 g2 |A_b| / |kappa2 - i w|`` and
    to the drive phase modulation as ``kappa2 phi_cal / |kappa2 - i Omega_c|``.
    """
    k, g, phi, Om = params.kappa[1], params.g[1], params.phi_cal, params.Omega_c
    return phi ** 2 * k ** 2 * (k ** 2 + omega_sig ** 2) / (4 * g ** 2 * (k ** 2 + Om ** 2))


def _signed_jn(n_max: int, x: float) -> np.ndarray:
    """``J_n(x)`` for ``n = -n_max .. n_max``."""
    j = bessel_jn(n_max, x)
    n = np.arange(1, n_max + 1)
    neg = (j[1:] * (-1.0) ** n)[::-1]
    return np.concatenate([neg, j])


def sideband_ratio(xi: float, omega_sig: float, params: SystemParams) -> float:
    """Exact signal/calibration power ratio at mechanical phase depth ``xi``.

    A resonant probe whose frequency is modulated as ``xi omega cos(omega t)``
    carries ``a = E sum_{m,n} J_m J_n exp(i(m-n) omega t)/(kappa - i n omega)``;
    the weak calibration phase modulation is propagated through the same
    expansion.  Reduces to ``1/transduction_ratio * |A_b|^2`` as ``xi -> 0``.
    """
    k, phi, Om, w = params.kappa[1], params.phi_cal, params.Omega_c, omega_sig
    N = int(np.ceil(2 * abs(xi))) + 12
    J = _signed_jn(N + 1, xi)
    n = np.arange(-N, N + 1)
    Jn = J[n + N + 1]
    c_plus = np.sum(J[n + 1 + N + 1] * Jn / (k - 1j * n * w))
    c_minus = np.sum(J[n - 1 + N + 1] * Jn / (k - 1j * n * w))
    d_plus = -0.5 * phi * np.sum(Jn ** 2 / (k + 1j * (Om - n * w)))
    d_minus = 0.5 * phi * np.sum(Jn ** 2 / (k - 1j * (Om + n * w)))
    sig = abs(c_plus - np.conj(c_minus)) ** 2
    cal = abs(d_plus - np.conj(d_minus)) ** 2
    return float(sig / cal)


def _first_ratio_maximum(omega_sig: float, params: SystemParams, xi_scan: float = 3.0) -> float:
    """Depth at the first maximum of the sideband ratio.

    Where it lies depends on ``kappa2/omega``, so it is located numerically.
    """
    from scipy.optimize import minimize_scalar

    xs = np.linspace(0.02, xi_scan, 150)
    r = np.array([sideband_ratio(x, omega_sig, params) for x in xs])
    down = np.flatnonzero(np.diff(r) < 0)
    if down.size == 0:
        return xi_scan
    k = down[0]
    lo, hi = xs[max(k - 1, 0)], xs[k + 1]
    res = minimize_scalar(lambda x: -sideband_ratio(x, omega_sig, params), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-10})
    return float(res.x)


def _invert_sideband_ratio(ratio: float, omega_sig: float, params: SystemParams) -> float:
    from scipy.optimize import brentq

    # the ratio is monotone only below its first maximum
    xi_max = _first_ratio_maximum(omega_sig, params)
    f = lambda x: sideband_ratio(x, omega_sig, params) - ratio
    if f(xi_max) < 0:
        raise CalibrationError(f"signal/calibration ratio {ratio:.4g} exceeds the "
                               f"invertible range (xi2 > {xi_max:.4g})")
    return brentq(f, 1e-12, xi_max, xtol=1e-14, rtol=1e-13)


def _area_sigma(p: PeakMeasurement) -> float:
    # sum of 7 resolution bins of roughly exponential periodogram noise
    return p.background * math.sqrt(7) * p.resolution / (2 * math.pi)


def calibrate_amplitude(signal: PeakMeasurement, cal: PeakMeasurement | None,
                        params: SystemParams, method: str = "linear") -> Calibration:
    """Convert the signal peak area to ``|A_b|^2`` using the calibration tone.

    ``method="linear"`` applies the small-modulation transduction ratio;
    ``method="bessel"`` inverts the full sideband expansion for the phase
    depth ``xi2 = 2 g2 |A_b| / omega'``, removing the few-percent bias the
    linear formula acquires at ``xi2 ~ 0.4``.
    """
    if cal is None or cal.net_area <= 0:
        raise CalibrationError("calibration peak missing")
    if not params.phi_cal or not params.Omega_c:
        raise CalibrationError("phi_cal and Omega_c must be set")
    if method not in ("linear", "bessel"):
        raise ValueError("method must be 'linear' or 'bessel'")
    ratio = signal.net_area / cal.net_area
    w = signal.center
    if method == "linear":
        val = ratio * transduction_ratio(params, w)
        xi2 = 2 * params.g[1] * math.sqrt(val) / w
    else:
        xi2 = _invert_sideband_ratio(ratio, w, params)
        val = (xi2 * w / (2 * params.g[1])) ** 2
    if xi2 >= 0.5:
        warnings.warn(f"probe phase modulation xi2={xi2:.3f} is not small; "
                      "transduction is no longer linear", RuntimeWarning, stacklevel=2)
    fs = _area_sigma(signal) / signal.net_area if signal.net_area else math.inf
    fc = _area_sigma(cal) / cal.net_area
    return Calibration(val, math.hypot(fs, fc), xi2, method)
