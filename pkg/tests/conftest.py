import math
from pathlib import Path

import pytest

from optomech.core import SystemParams, load_config, normalize

CONFIG_DIR = Path(__file__).resolve().parents[1] / "src" / "optomech" / "configs"
OMEGA_M = 2 * math.pi * 525e3


def scaled_si(**over) -> SystemParams:
    """Q = 1e5 cooling/probe configuration with a resonant probe."""
    kw = dict(omega_m=OMEGA_M, Q=1e5, kappa=(2 * math.pi * 1e5,) * 2,
              kappa_in=(math.pi * 1e5,) * 2, g=(2 * math.pi * 5,) * 2, T=0.1,
              delta_eff=(-OMEGA_M, 0.0), P=(5e-5, 5e-8), P_m=2e-6, beta_nl=1e-12,
              tau_pdh=100 / OMEGA_M, phi_cal=0.05, Omega_c=0.9 * OMEGA_M)
    kw.update(over)
    return SystemParams.build(**kw)


@pytest.fixture(scope="session")
def config_dir():
    return CONFIG_DIR


@pytest.fixture(scope="session")
def fig2():
    return normalize(load_config(CONFIG_DIR / "fig2.json").params)


@pytest.fixture(scope="session")
def fig2_si():
    return load_config(CONFIG_DIR / "fig2.json").params


@pytest.fixture(scope="session")
def scaled():
    return normalize(scaled_si())
