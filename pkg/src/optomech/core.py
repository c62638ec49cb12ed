"""Physical parameter model shared by every solver.

All solvers are unit agnostic: they only combine rates with rates and
times with times.  In practice they are fed :func:`normalize`-d
parameters, where the mechanical angular frequency is 1 and time is
measured in units of ``1/omega_m``.  SI quantities only appear when a
config file is read.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np
from scipy import constants

HBAR = constants.hbar
K_B = constants.k
C_LIGHT = constants.c

# below this the optical Bose factor is treated as exactly zero
_OCC_FLOOR = 1e-30
# hbar*omega/(k_B*T) above which an optical mode is taken to be in vacuum
_OPTICAL_X_MAX = 50.0


class ParameterError(ValueError):
    """Raised for parameters outside their physical domain."""


class ConfigError(ValueError):
    """Raised for malformed or unknown configuration content."""


def drive_rate(P, kappa_in, lambda_c):
    """Cavity drive rate ``E = sqrt(2 kappa_in P / (hbar omega_L))`` in rad/s.

    Parameters
    ----------
    P : float or array_like
        Input power in W.
    kappa_in : float
        Input-port amplitude decay rate in rad/s.
    lambda_c : float
        Carrier wavelength in m.
    """
    if kappa_in <= 0:
        raise ParameterError(f"kappa_in must be positive, got {kappa_in!r}")
    if lambda_c <= 0:
        raise ParameterError(f"lambda_c must be positive, got {lambda_c!r}")
    P = np.asarray(P, dtype=float)
    if np.any(P < 0):
        raise ParameterError("laser power must be non-negative")
    omega_L = 2.0 * math.pi * C_LIGHT / lambda_c
    out = np.sqrt(2.0 * kappa_in * P / (HBAR * omega_L))
    return float(out) if out.ndim == 0 else out


def thermal_occupancy(omega, T):
    """Bose-Einstein mean occupancy of a mode at angular frequency ``omega``."""
    if omega <= 0:
        raise ParameterError(f"mode frequency must be positive, got {omega!r}")
    if T < 0:
        raise ParameterError(f"temperature must be non-negative, got {T!r}")
    if T == 0:
        return 0.0
    x = HBAR * omega / (K_B * T)
    if x > 700.0:
        return 0.0
    n = 1.0 / math.expm1(x)
    return 0.0 if n < _OCC_FLOOR else n


def _pair(value, name):
    if value is None:
        return None
    if np.isscalar(value):
        return (float(value), float(value))
    vals = tuple(float(v) for v in value)
    if len(vals) != 2:
        raise ConfigError(f"{name} must have exactly two entries (pump, probe)")
    return vals


# fields carrying an inverse-time dimension, scaled by 1/omega_m on normalization
_RATE_FIELDS = ("omega_m", "gamma_m", "delta_m", "E_m", "Omega_c")
_RATE_PAIRS = ("kappa", "kappa_in", "kappa_ex", "delta0", "delta_eff", "g", "E")
_TIME_FIELDS = ("tau_off", "tau_pdh")


@dataclass(frozen=True)
class SystemParams:
    """Rates, couplings, drives and environment of the two-mode system.

    Pairs are ordered ``(pump, probe)``.  All rates are angular (rad/s in
    SI, or multiples of ``omega_m`` after :func:`normalize`).  Use
    :meth:`build` to fill in derived fields from powers and temperature.
    """

    omega_m: float
    gamma_m: float
    kappa: tuple
    kappa_in: tuple
    kappa_ex: tuple
    delta0: tuple
    delta_eff: tuple
    g: tuple
    E: tuple
    E_m: float = 0.0
    beta_nl: float = 0.0
    phi_nl: float = math.pi / 2
    delta_m: float | None = None
    P: tuple | None = None
    P_m: float | None = None
    lambda_c: float = 1064e-9
    T: float | None = None
    n_bath: float = 0.0
    n_opt: tuple = (0.0, 0.0)
    tau_off: float = 0.0
    tau_pdh: float | None = None
    phi_cal: float = 0.0
    Omega_c: float | None = None
    x_zpf: float | None = None
    omega_unit: float = 1.0
    normalized: bool = False

    def __post_init__(self):
        self.validate()

    # -- construction -------------------------------------------------
    @classmethod
    def build(cls, **kw) -> "SystemParams":
        """Complete a partial parameter set.

        Accepted shortcuts: ``Q`` instead of ``gamma_m``; ``P``/``P_m``
        instead of ``E``/``E_m``; ``T`` instead of ``n_bath``/``n_opt``;
        any two of ``kappa``, ``kappa_in``, ``kappa_ex``; either of
        ``delta0``/``delta_eff`` (the other follows from the static
        mechanical shift).
        """
        kw = dict(kw)
        Q = kw.pop("Q", None)
        omega_m = float(kw["omega_m"])
        if kw.get("gamma_m") is None:
            if Q is None:
                raise ConfigError("one of gamma_m or Q is required")
            kw["gamma_m"] = omega_m / float(Q)

        kappa = _pair(kw.get("kappa"), "kappa")
        k_in = _pair(kw.get("kappa_in"), "kappa_in")
        k_ex = _pair(kw.get("kappa_ex"), "kappa_ex")
        if kappa is None:
            if k_in is None or k_ex is None:
                raise ConfigError("cavity decay needs two of kappa, kappa_in, kappa_ex")
            kappa = (k_in[0] + k_ex[0], k_in[1] + k_ex[1])
        if k_in is None:
            k_in = (kappa[0] / 2, kappa[1] / 2) if k_ex is None else (
                kappa[0] - k_ex[0], kappa[1] - k_ex[1])
        k_ex = (kappa[0] - k_in[0], kappa[1] - k_in[1])
        kw.update(kappa=kappa, kappa_in=k_in, kappa_ex=k_ex)
        kw["g"] = _pair(kw["g"], "g")

        lam = float(kw.get("lambda_c") or 1064e-9)
        kw["lambda_c"] = lam
        if kw.get("E") is None:
            P = _pair(kw.get("P"), "P")
            if P is None:
                raise ConfigError("one of E or P is required")
            kw["P"] = P
            kw["E"] = tuple(drive_rate(P[j], k_in[j], lam) for j in range(2))
        else:
            kw["E"] = _pair(kw["E"], "E")
            if kw.get("P") is not None:
                kw["P"] = _pair(kw["P"], "P")
        if kw.get("E_m") is None:
            P_m = kw.get("P_m")
            kw["E_m"] = 0.0 if P_m is None else drive_rate(P_m, k_in[0], lam)

        T = kw.get("T")
        if T is not None:
            if kw.get("n_bath") is None:
                kw["n_bath"] = thermal_occupancy(omega_m, T)
            if kw.get("n_opt") is None:
                kw["n_opt"] = tuple(optical_occupancy(lam, T) for _ in range(2))
        kw.setdefault("n_bath", 0.0)
        if kw.get("n_bath") is None:
            kw["n_bath"] = 0.0
        kw["n_opt"] = _pair(kw.get("n_opt") or (0.0, 0.0), "n_opt")

        if kw.get("delta_m") is None:
            kw["delta_m"] = omega_m
        d0 = _pair(kw.get("delta0"), "delta0")
        de = _pair(kw.get("delta_eff"), "delta_eff")
        if d0 is None and de is None:
            raise ConfigError("one of delta0 or delta_eff is required")
        probe = dict(omega_m=omega_m, gamma_m=kw["gamma_m"], g=kw["g"],
                     E=kw["E"], kappa=kappa)
        if d0 is None:
            shift = _static_detuning_shift(probe, de)
            d0 = (de[0] - shift[0], de[1] - shift[1])
        elif de is None:
            de = d0
            for _ in range(50):
                shift = _static_detuning_shift(probe, de)
                new = (d0[0] + shift[0], d0[1] + shift[1])
                if max(abs(new[0] - de[0]), abs(new[1] - de[1])) <= 1e-15 * (1 + abs(omega_m)):
                    de = new
                    break
                de = new
        kw.update(delta0=d0, delta_eff=de)
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(kw) - names
        if unknown:
            raise ConfigError(f"unknown parameter(s): {sorted(unknown)}")
        return cls(**kw)

    def validate(self):
        if not self.omega_m > 0:
            raise ParameterError("omega_m must be positive")
        for name in ("gamma_m", "E_m", "n_bath", "lambda_c"):
            v = getattr(self, name)
            if v is None or not math.isfinite(v) or v < 0:
                raise ParameterError(f"{name} must be finite and non-negative")
        for name in ("kappa", "kappa_in", "kappa_ex", "E", "n_opt"):
            v = getattr(self, name)
            if any((not math.isfinite(x)) or x < 0 for x in v):
                raise ParameterError(f"{name} must be finite and non-negative")
        for j in range(2):
            if self.kappa[j] != self.kappa_in[j] + self.kappa_ex[j]:
                # tolerate last-ulp rounding from the subtraction in build()
                if abs(self.kappa[j] - self.kappa_in[j] - self.kappa_ex[j]) > 4e-16 * self.kappa[j]:
                    raise ParameterError("kappa must equal kappa_in + kappa_ex")
        for name in ("T", "tau_pdh", "P_m"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ParameterError(f"{name} must be non-negative")
        if self.tau_off < 0:
            raise ParameterError("tau_off must be non-negative")
        if self.P is not None and any(p < 0 for p in self.P):
            raise ParameterError("laser powers must be non-negative")

    # -- derived ------------------------------------------------------
    @property
    def Q(self) -> float:
        return self.omega_m / self.gamma_m if self.gamma_m > 0 else math.inf

    def replace(self, **kw) -> "SystemParams":
        return dataclasses.replace(self, **kw)

    def with_modulation_power(self, P_m: float) -> "SystemParams":
        """Copy with a new modulation power; ``E_m`` rescales as sqrt(P_m)."""
        if self.P_m:
            E_m = self.E_m * math.sqrt(P_m / self.P_m)
        else:
            E_m = drive_rate(P_m, self.kappa_in[0], self.lambda_c)
            if self.normalized:
                E_m /= self.omega_unit
        return self.replace(P_m=P_m, E_m=E_m)

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out


def optical_occupancy(lambda_c: float, T: float) -> float:
    """Thermal occupancy of an optical mode, clamped to zero deep in the quantum regime."""
    omega_c = 2.0 * math.pi * C_LIGHT / lambda_c
    if T == 0 or HBAR * omega_c / (K_B * T) > _OPTICAL_X_MAX:
        return 0.0
    return thermal_occupancy(omega_c, T)


def _static_detuning_shift(p, delta):
    """``2 g_j Re(beta_0)`` for the approximate static displacement."""
    w, gm = p["omega_m"], p["gamma_m"]
    s = sum(p["g"][j] * p["E"][j] ** 2 / (p["kappa"][j] ** 2 + delta[j] ** 2) for j in range(2))
    re_beta0 = w / (w * w + gm * gm) * s
    return tuple(2.0 * p["g"][j] * re_beta0 for j in range(2))


def normalize(params: SystemParams) -> SystemParams:
    """Rescale rates by ``1/omega_m`` and times by ``omega_m``."""
    if params.normalized:
        return params
    w = params.omega_m
    kw = {}
    for name in _RATE_FIELDS:
        v = getattr(params, name)
        kw[name] = None if v is None else v / w
    for name in _RATE_PAIRS:
        kw[name] = tuple(x / w for x in getattr(params, name))
    for name in _TIME_FIELDS:
        v = getattr(params, name)
        kw[name] = None if v is None else v * w
    return params.replace(omega_unit=params.omega_unit * w, normalized=True, **kw)


def denormalize(params: SystemParams) -> SystemParams:
    """Inverse of :func:`normalize`."""
    if not params.normalized:
        return params
    w = params.omega_unit
    kw = {}
    for name in _RATE_FIELDS:
        v = getattr(params, name)
        kw[name] = None if v is None else v * w
    for name in _RATE_PAIRS:
        kw[name] = tuple(x * w for x in getattr(params, name))
    for name in _TIME_FIELDS:
        v = getattr(params, name)
        kw[name] = None if v is None else v / w
    return params.replace(omega_unit=1.0, normalized=False, **kw)


# ---------------------------------------------------------------------------
# config files

_RUN_SECTION = "run"


def _read_mapping(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return data


_CONFIG_KEYS = {f.name for f in dataclasses.fields(SystemParams)} - {
    "omega_unit", "normalized"} | {"Q"}


def params_from_mapping(data: Mapping[str, Any]) -> SystemParams:
    """Build :class:`SystemParams` from SI key/value pairs (unknown keys are an error)."""
    unknown = set(data) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    try:
        return SystemParams.build(**data)
    except (TypeError, KeyError) as exc:
        raise ConfigError(f"incomplete parameter set: {exc}") from exc


@dataclass
class Config:
    """A parsed config file: SI parameters plus optional run settings."""

    params: SystemParams
    run: dict = field(default_factory=dict)
    source: str | None = None
    raw: dict = field(default_factory=dict)


def load_config(path) -> Config:
    """Read a JSON or TOML config.

    Physical keys sit at top level (SI units).  An optional ``run`` table
    carries protocol settings (powers to sweep, record times, seeds).
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    data = _read_mapping(path)
    run = data.pop(_RUN_SECTION, {}) or {}
    if not isinstance(run, dict):
        raise ConfigError("'run' must be a table")
    try:
        params = params_from_mapping(data)
    except ParameterError as exc:
        raise ConfigError(str(exc)) from exc
    return Config(params=params, run=dict(run), source=str(path), raw=data)
