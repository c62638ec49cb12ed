"""Compare the compiled and NumPy SDE kernels: throughput and agreement.

    python benchmarks/bench_kernels.py [--steps N] [--traj K] [--repeat R]

Prints one JSON object with steps per second for each available backend,
the speed-up and the largest difference between their trajectories.
"""
import argparse
import json
import math
import time

import numpy as np

from optomech import backend, langevin
from optomech.core import SystemParams, normalize
from optomech.schedule import DriveSchedule


def scaled_params():
    w = 2 * math.pi * 525e3
    return normalize(SystemParams.build(
        omega_m=w, Q=1e5, kappa=(2 * math.pi * 1e5,) * 2, kappa_in=(math.pi * 1e5,) * 2,
        g=(2 * math.pi * 5,) * 2, T=0.1, delta_eff=(-w, 0.0), P=(5e-5, 5e-8), P_m=2e-6,
        beta_nl=1e-12, tau_pdh=100 / w, phi_cal=0.05, Omega_c=0.9 * w))


def run(name, p, sched, seeds, dt, t_end, repeat):
    best = math.inf
    recs = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        recs, _ = langevin.integrate_batch(p, sched, seeds, dt, t_end=t_end, backend=name,
                                           checksum=False, nthreads=1)
        best = min(best, time.perf_counter() - t0)
    return best, recs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--traj", type=int, default=4)
    ap.add_argument("--repeat", type=int, default=3)
    a = ap.parse_args()
    p = scaled_params()
    dt = 2 * math.pi / 100
    t_end = a.steps * dt
    sched = DriveSchedule.for_protocol("turnoff", 0.5 * t_end, t_end, pdh=True, calibration=True)
    seeds = list(range(a.traj))
    out = {"steps": a.steps, "trajectories": a.traj, "backends": {}}
    recs = {}
    for name in backend.available():
        sec, recs[name] = run(name, p, sched, seeds, dt, t_end, a.repeat)
        out["backends"][name] = {"seconds": sec, "steps_per_s": a.steps * a.traj / sec}
    if len(recs) == 2:
        diff = max(float(np.max(np.abs(r1.b - r2.b) / (1 + np.abs(r2.b))))
                   for r1, r2 in zip(recs["cython"], recs["python"]))
        out["max_rel_diff"] = diff
        out["speedup"] = out["backends"]["python"]["seconds"] / out["backends"]["cython"]["seconds"]
    print(json.dumps(out, indent=2))


if __name__ == "__main__":
    main()
