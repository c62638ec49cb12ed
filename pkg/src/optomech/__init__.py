"""Simulation and estimation toolkit for a two-mode optomechanical cavity
with a weak quartic mechanical nonlinearity."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    ConfigError,
    ParameterError,
    SystemParams,
    denormalize,
    drive_rate,
    load_config,
    normalize,
    thermal_occupancy,
)
