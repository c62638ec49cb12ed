"""Command-line entry point.

Every subcommand reads a JSON/TOML config (SI units, optional ``run``
table), writes its outputs under ``--out`` together with ``manifest.json``,
prints a JSON summary on stdout and progress on stderr.

Exit codes: 0 success, 2 runtime or protocol failure, 3 config error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import math
import platform
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from . import backend as _backend
from . import detect, estimate, gaussfluct, langevin, slowflow
from .core import ConfigError, ParameterError, load_config, normalize
from .schedule import DriveSchedule

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 2, 3

RUN_KEYS = {
    "protocol", "tier", "P_m", "t1", "t2", "dt", "tau_off", "pad", "n_grid", "signal_band",
    "cal_band", "signal_window", "cal_window", "calibration", "method", "init", "seed",
    "n_traj", "beta_list", "repetitions", "longrun", "targets", "form", "rec_every",
}

log = logging.getLogger("optomech")


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    """Everything needed to reproduce a run."""

    command: str
    argv: list
    config_path: str
    config_sha256: str
    version: str
    seeds: list
    started: str
    finished: str | None = None
    outputs: list = field(default_factory=list)
    backend: str = ""
    threads: int = 1
    python: str = platform.python_version()
    numpy: str = np.__version__
    status: str = "running"

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out: Path) -> Path:
        path = out / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# json helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# config resolution


def resolve_config(name: str) -> Path:
    """A config path, falling back to the configs shipped with the package."""
    p = Path(name)
    if p.is_file():
        return p
    if p.parent == Path(".") and p.suffix in (".json", ".toml"):
        ref = resources.files("optomech") / "configs" / p.name
        if ref.is_file():
            return Path(str(ref))
    raise ConfigError(f"config file not found: {name}")


def _load(args):
    path = resolve_config(args.config)
    cfg = load_config(path)
    unknown = set(cfg.run) - RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown run setting(s): {sorted(unknown)}")
    return path, cfg


def _opt(args, cfg, key, default):
    v = getattr(args, key, None)
    if v is not None:
        return v
    return cfg.run.get(key, default)


def _settings(cfg) -> estimate.PipelineSettings:
    return estimate.PipelineSettings.from_run(cfg.run, cfg.params)


def _pm_list(cfg) -> list:
    pm = cfg.run.get("P_m")
    if pm is None:
        if cfg.params.P_m is None:
            raise ConfigError("no modulation power: set P_m or run.P_m")
        pm = [cfg.params.P_m]
    if isinstance(pm, (int, float)):
        pm = [pm]
    try:
        pm = [float(v) for v in pm]
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"run.P_m must be a list of powers: {exc}") from exc
    if any(v < 0 for v in pm):
        raise ConfigError("modulation powers must be non-negative")
    return pm


# ---------------------------------------------------------------------------
# subcommands; each returns (summary, outputs, seeds)


def cmd_coeffs(args, cfg, out: Path):
    p = normalize(cfg.params)
    form = args.form or cfg.run.get("form", "series")
    rep = slowflow.coefficient_report(p, form=form)
    rep["units"] = "normalized: rates in omega_m, amplitudes dimensionless"
    rep["form"] = form
    path = out / "results.json"
    path.write_text(_dump(rep))
    return rep, [path], []


def cmd_steady(args, cfg, out: Path):
    p = normalize(cfg.params)
    cs = gaussfluct.cooling_steady_state(p)
    st = slowflow.steady_amplitude(p)
    res = {
        "occupancy": cs.occupancy, "purity": cs.purity,
        "alpha1": cs.state.alpha1, "alpha2": cs.state.alpha2, "beta": cs.state.beta,
        "A_b_st": st.fixed_point, "A_b_st_abs2": abs(st.fixed_point) ** 2,
        "covariance": cs.cov,
    }
    path = out / "results.json"
    path.write_text(_dump(res))
    summary = {k: res[k] for k in ("occupancy", "purity", "A_b_st_abs2")}
    return summary, [path], []


def cmd_decay(args, cfg, out: Path):
    p0 = normalize(cfg.params)
    protocol = _opt(args, cfg, "protocol", "turnoff")
    if protocol not in ("turnoff", "appendix"):
        raise ConfigError("decay supports --protocol turnoff or appendix")
    tier = _opt(args, cfg, "tier", "analytic")
    s = _settings(cfg)
    pm = _pm_list(cfg)[-1]
    p = p0.with_modulation_power(pm)
    A0 = slowflow.steady_amplitude(p).fixed_point
    outputs, seeds = [], []
    tau = np.linspace(0.0, s.window, 2001)
    if tier == "analytic":
        if protocol == "turnoff":
            A = slowflow.analytic_decay(A0, tau, p)
            wi = slowflow.instantaneous_frequency("turnoff", tau, abs(A0) ** 2, p)
        else:
            co = slowflow.rp_coefficients(p, "appendix")
            A = slowflow.appendix_decay(A0, tau, p, co)
            wi = slowflow.instantaneous_frequency("appendix", tau, abs(A0) ** 2, p, co)
        rows = np.column_stack([tau, np.abs(A) ** 2, wi])
        header = "t_after_switch,abs_A2,omega_inst"
    else:
        dt = s.dt or 2 * math.pi / langevin.DEFAULT_STEPS_PER_PERIOD
        sched = DriveSchedule.for_protocol(protocol, s.t1, s.t2, tau=s.tau_off, pdh=True,
                                           calibration=False)
        rec_every = int(cfg.run.get("rec_every", 10))
        if tier == "gauss":
            tg = np.arange(0.0, s.t2 + 0.5 * dt, dt * rec_every)
            tr = gaussfluct.integrate_means(p, tg, sched)
            t, b2 = tr.t, np.abs(tr.beta) ** 2
            tr.to_csv(out / "trajectory.csv")
            outputs.append(out / "trajectory.csv")
        else:
            n = int(_opt(args, cfg, "traj", cfg.run.get("n_traj", 1)))
            seed = int(_opt(args, cfg, "seed", 0))
            seeds = [seed + k for k in range(n)]
            recs, failed = langevin.integrate_batch(p, sched, seeds, dt, t_end=s.t2,
                                                    rec_every=rec_every, init=s.init)
            if failed:
                raise langevin.DivergenceError(failed, [0] * len(failed), dt)
            t = recs[0].t
            b2 = np.mean([np.abs(r.b) ** 2 for r in recs], axis=0)
            outputs.append(recs[0].to_binary(out / f"trajectory_seed{seeds[0]}.bin"))
            outputs.append(recs[0].to_csv(out / f"trajectory_seed{seeds[0]}.csv"))
        rows = np.column_stack([t, b2])
        header = "t,mean_abs_b2"
    path = out / "points.csv"
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt="%.17g")
    outputs.append(path)
    res = {"protocol": protocol, "tier": tier, "P_m": pm, "A0": A0, "abs_A0_sq": abs(A0) ** 2}
    rpath = out / "results.json"
    rpath.write_text(_dump(res))
    return res, [rpath] + outputs, seeds


def cmd_spectrum(args, cfg, out: Path):
    p0 = normalize(cfg.params)
    protocol = _opt(args, cfg, "protocol", "turnoff")
    if protocol == "stationary":
        raise ConfigError("spectrum supports --protocol turnoff or appendix")
    tier = _opt(args, cfg, "tier", "sde")
    if tier == "analytic":
        raise ConfigError("spectrum needs --tier gauss or sde")
    s = _settings(cfg)
    pm = _pm_list(cfg)[-1]
    seed = int(_opt(args, cfg, "seed", 0))
    p = p0.with_modulation_power(pm)
    dt = s.dt or 2 * math.pi / langevin.DEFAULT_STEPS_PER_PERIOD
    sched = DriveSchedule.for_protocol(protocol, s.t1, s.t2, tau=s.tau_off, pdh=True,
                                       calibration=True)
    if tier == "gauss":
        rec = gaussfluct.integrate_means(p, np.arange(0.0, s.t2 + 0.5 * dt, dt), sched)
    else:
        rec = langevin.integrate_trajectory(p, sched, seed, dt, t_end=s.t2, method=s.method,
                                            init=s.init)
    h = detect.homodyne_output(rec, p, include_noise=(tier == "sde"))
    spec = detect.psd(h, s.signal_window, (s.t1, s.t2), s.pad)
    spec_c = detect.psd(h, s.cal_window, (s.t1, s.t2), s.pad)
    sdir = out / "spectra"
    sdir.mkdir(exist_ok=True)
    outputs = []
    for tag, sp in (("signal", spec), ("calibration", spec_c)):
        keep = sp.omega <= 2.0
        path = sdir / f"{protocol}_{tier}_{tag}.csv"
        detect.SpectrumEstimate(sp.omega[keep], sp.psd[keep], sp.resolution, sp.window,
                                sp.n_avg, sp.pad).to_csv(path)
        outputs.append(path)
    res = {"protocol": protocol, "tier": tier, "P_m": pm, "seed": seed,
           "resolution": spec.resolution, "window_signal": s.signal_window,
           "window_calibration": s.cal_window, "pad": s.pad}
    errors = {}
    try:
        sig = detect.find_peak(spec, (s.signal_band[0], s.signal_band[1]))
        res["signal_peak"] = sig.to_dict()
    except detect.PeakNotFound as exc:
        sig = None
        errors["signal"] = str(exc)
    try:
        cal = detect.find_peak(spec_c, (s.cal_band[0], s.cal_band[1]))
        res["calibration_peak"] = cal.to_dict()
    except detect.PeakNotFound as exc:
        cal = None
        errors["calibration"] = str(exc)
    if sig is not None and cal is not None:
        c = detect.calibrate_amplitude(sig, cal, p, method=s.calibration)
        res["A2_calibrated"] = c.value
        res["A2_frac_uncertainty"] = c.frac_uncertainty
        res["xi2"] = c.xi2
        res["shift"] = sig.center - 1.0
    res["A2_model"] = abs(slowflow.steady_amplitude(p).fixed_point) ** 2
    if errors:
        res["errors"] = errors
    rpath = out / "results.json"
    rpath.write_text(_dump(res))
    if errors:
        raise estimate.ProtocolError(f"peak extraction failed: {errors}")
    return res, [rpath] + outputs, [seed] if tier == "sde" else []


def _write_run(run: estimate.ProtocolRun, out: Path) -> Path:
    return run.to_csv(out / "points.csv")


def cmd_estimate(args, cfg, out: Path):
    protocol = _opt(args, cfg, "protocol", "turnoff")
    tier = _opt(args, cfg, "tier", "analytic")
    s = _settings(cfg)
    pm = _pm_list(cfg)
    seed = int(_opt(args, cfg, "seed", 0))
    n_traj = int(_opt(args, cfg, "traj", cfg.run.get("n_traj", 1)))
    sdir = out / "spectra" if tier != "analytic" and protocol != "stationary" else None
    try:
        run, res = estimate.run_protocol(protocol, cfg.params, pm, tier, n_traj, seed, s,
                                         progress=log.info, spectra_dir=sdir)
    except estimate.ProtocolError as exc:
        if exc.run is not None:
            _write_run(exc.run, out)
        raise
    outputs = [_write_run(run, out)]
    if sdir is not None:
        outputs += sorted(sdir.glob("*.csv"))
    body = {"estimate": res.to_dict(), "run": run.to_dict()}
    targets = cfg.run.get("targets")
    if targets:
        body["targets"] = targets
    rpath = out / "results.json"
    rpath.write_text(_dump(body))
    seeds = sorted({pt.seed for pt in run.points if pt.seed is not None})
    summary = {k: res.to_dict()[k] for k in ("protocol", "tier", "slope", "intercept", "R",
                                             "stderr", "beta_est", "beta_true", "E_r",
                                             "delta_beta", "n_points", "n_failed", "resolved")}
    return summary, [rpath] + outputs, seeds


def cmd_sweep(args, cfg, out: Path):
    protocol = _opt(args, cfg, "protocol", "turnoff")
    tier = _opt(args, cfg, "tier", "sde")
    s = _settings(cfg)
    pm = _pm_list(cfg)
    betas = cfg.run.get("beta_list")
    if not betas:
        raise ConfigError("sweep needs run.beta_list")
    reps = int(_opt(args, cfg, "traj", cfg.run.get("repetitions", 13)))
    seed0 = int(_opt(args, cfg, "seed", 0))
    res = estimate.sensitivity_sweep(cfg.params, betas, reps, pm, tier, s, seed0,
                                     protocol=protocol, progress=log.info)
    path = out / "points.csv"
    with path.open("w") as fh:
        fh.write("beta,beta_mean,E_r,rel_spread,R\n")
        for r in res.rows:
            fh.write(f"{r.beta!r},{r.beta_mean!r},{r.E_r!r},{r.rel_spread!r},{r.R!r}\n")
    body = res.to_dict()
    body["protocol"], body["tier"], body["repetitions"] = protocol, tier, reps
    targets = cfg.run.get("targets")
    if targets:
        body["targets"] = targets
    rpath = out / "results.json"
    rpath.write_text(_dump(body))
    summary = {"floor": res.floor, "rows": [
        {"beta": r.beta, "beta_mean": r.beta_mean, "E_r": r.E_r, "R": r.R} for r in res.rows]}
    return summary, [rpath, path], [seed0 + r for r in range(reps)]


COMMANDS = {"coeffs": cmd_coeffs, "steady": cmd_steady, "decay": cmd_decay,
            "spectrum": cmd_spectrum, "estimate": cmd_estimate, "sweep": cmd_sweep}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="optomech", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"optomech {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="JSON/TOML config (or a shipped name)")
        sp.add_argument("--protocol", choices=estimate.PROTOCOLS)
        sp.add_argument("--tier", choices=estimate.TIERS)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--traj", type=int, help="trajectories per point / repetitions")
        sp.add_argument("--out", default="optomech_out", help="output directory")
        sp.add_argument("--form", choices=("series", "closed"), help="coefficient forms (coeffs)")
        sp.add_argument("-q", "--quiet", action="store_true", help="suppress progress")
    return ap


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(message)s",
                        level=logging.WARNING if args.quiet else logging.INFO, force=True)
    try:
        path, cfg = _load(args)
        _settings(cfg)
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    manifest = RunManifest(args.command, argv, str(path), _sha256(path), __version__, [],
                           _now(), backend=_backend.default_backend(),
                           threads=_backend.thread_count())
    code = EXIT_OK
    summary = {}
    try:
        out.mkdir(parents=True, exist_ok=True)
        log.info(f"optomech {args.command}: config {path}")
        summary, outputs, seeds = COMMANDS[args.command](args, cfg, out)
        manifest.outputs = sorted(str(Path(o).relative_to(out)) for o in outputs)
        manifest.seeds = list(seeds)
        manifest.status = "ok"
    except (ConfigError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        manifest.status = f"config error: {exc}"
        code = EXIT_CONFIG
    except (estimate.ProtocolError, estimate.FitError, RuntimeError, ValueError,
            ArithmeticError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        manifest.status = f"{type(exc).__name__}: {exc}"
        code = EXIT_RUNTIME
    manifest.finished = _now()
    manifest.write(out)
    summary = {"command": args.command, "status": manifest.status, "out": str(out),
               "result": summary}
    sys.stdout.write(_dump(summary))
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
