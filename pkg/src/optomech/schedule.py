"""Drive schedules shared by the mean-field and stochastic solvers."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

PUMP_MODES = ("on", "exp-off", "instant-off")
MOD_MODES = ("on", "off-at-t1")


@dataclass(frozen=True)
class DriveSchedule:
    """Preparation over ``[0, t1]`` followed by a record window ``[t1, t2]``.

    ``pump`` controls the cooling drive after ``t1``; ``modulation`` the
    tone at ``delta_m`` riding on it.  The probe drive is always on.
    """

    t1: float
    t2: float
    pump: str = "on"
    modulation: str = "on"
    tau: float = 0.0
    pdh: bool = False
    calibration: bool = False

    def __post_init__(self):
        if not (0 < self.t1 < self.t2):
            raise ValueError("schedule requires 0 < t1 < t2")
        if self.pump not in PUMP_MODES:
            raise ValueError(f"pump must be one of {PUMP_MODES}")
        if self.modulation not in MOD_MODES:
            raise ValueError(f"modulation must be one of {MOD_MODES}")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")
        if self.pump == "exp-off" and self.tau == 0:
            object.__setattr__(self, "pump", "instant-off")

    @classmethod
    def for_protocol(cls, protocol: str, t1: float, t2: float, tau: float = 0.0,
                     pdh: bool = False, calibration: bool = False) -> "DriveSchedule":
        if protocol == "stationary":
            return cls(t1, t2, "on", "on", 0.0, pdh, calibration)
        if protocol == "turnoff":
            pump = "exp-off" if tau > 0 else "instant-off"
            return cls(t1, t2, pump, "off-at-t1", tau, pdh, calibration)
        if protocol == "appendix":
            return cls(t1, t2, "on", "off-at-t1", 0.0, pdh, calibration)
        raise ValueError(f"unknown protocol {protocol!r}")

    def with_times(self, t1: float, t2: float) -> "DriveSchedule":
        return replace(self, t1=t1, t2=t2)

    def pump_factor(self, t):
        """Multiplier of the cooling drive at time(s) ``t``."""
        t = np.asarray(t, dtype=float)
        after = t >= self.t1
        if self.pump == "on":
            f = np.ones_like(t)
        elif self.pump == "instant-off":
            f = np.where(after, 0.0, 1.0)
        else:
            f = np.where(after, np.exp(-np.maximum(t - self.t1, 0.0) / self.tau), 1.0)
        return f if f.ndim else float(f)

    def modulation_factor(self, t):
        t = np.asarray(t, dtype=float)
        f = np.ones_like(t) if self.modulation == "on" else np.where(t >= self.t1, 0.0, 1.0)
        return f if f.ndim else float(f)

    def segments(self) -> list[tuple[float, float]]:
        """Intervals on which the drive coefficients are smooth."""
        return [(0.0, self.t1), (self.t1, self.t2)]

    def to_dict(self) -> dict:
        return {"t1": self.t1, "t2": self.t2, "pump": self.pump, "modulation": self.modulation,
                "tau": self.tau, "pdh": self.pdh, "calibration": self.calibration}


def always_on(t_end: float = 1.0) -> DriveSchedule:
    """Pump and modulation on for the whole run (``t1`` is then irrelevant)."""
    t = max(float(t_end), 1.0)
    return DriveSchedule(t, 2 * t)
