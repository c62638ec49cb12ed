import hashlib
import json
import shutil

import pytest

from optomech import cli
from optomech.core import load_config

FIG2_C1 = complex(-7.0436691929e-3, 6.730734203e-4)


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, json.loads(out.out), out.err


def small_config(tmp_path, config_dir, name="scaled_q1e5.json", **run):
    data = json.loads((config_dir / name).read_text())
    data["run"].update(run)
    path = tmp_path / f"cfg_{len(list(tmp_path.iterdir()))}.json"
    path.write_text(json.dumps(data))
    return path


def test_coeffs(tmp_path, capsys, config_dir):
    code, summary, _ = run_cli(capsys, "coeffs", "--config", "fig2.json", "--out", str(tmp_path / "o"))
    assert code == 0 and summary["status"] == "ok"
    res = json.loads((tmp_path / "o" / "results.json").read_text())
    for key in ("c0", "c1", "c2", "c2m", "c3", "gamma_eff", "delta_eff"):
        assert key in res
    assert complex(*res["c1"]) == pytest.approx(FIG2_C1, rel=1e-9)
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    raw = (config_dir / "fig2.json").read_bytes()
    assert man["config_sha256"] == hashlib.sha256(raw).hexdigest()
    assert man["outputs"] == ["results.json"] and man["status"] == "ok"


def test_estimate_analytic_round_trip(tmp_path, capsys, config_dir):
    out = tmp_path / "o"
    code, summary, _ = run_cli(capsys, "estimate", "--config", "scaled_q1e5.json", "--protocol",
                               "turnoff", "--tier", "analytic", "--out", str(out))
    assert code == 0
    beta = load_config(config_dir / "scaled_q1e5.json").params.beta_nl
    assert summary["result"]["beta_est"] == pytest.approx(beta, rel=1e-10)
    body = json.loads((out / "results.json").read_text())
    assert body["estimate"]["E_r"] < 1e-10
    assert (out / "points.csv").read_text().count("\n") == 6


def test_missing_config_exit_3_no_outputs(tmp_path, capsys):
    out = tmp_path / "o"
    code = cli.main(["estimate", "--config", str(tmp_path / "absent.json"), "--out", str(out)])
    assert code == 3
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


def test_bad_config_exit_3(tmp_path, capsys, config_dir):
    data = json.loads((config_dir / "fig2.json").read_text())
    data["kapa"] = 1.0
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data))
    assert cli.main(["coeffs", "--config", str(path), "--out", str(tmp_path / "o")]) == 3


def test_unknown_run_key_exit_3(tmp_path, capsys, config_dir):
    path = small_config(tmp_path, config_dir, windw=3.0)
    assert cli.main(["estimate", "--config", str(path), "--out", str(tmp_path / "o")]) == 3


def test_protocol_failure_exit_2(tmp_path, capsys, config_dir):
    path = small_config(tmp_path, config_dir, P_m=[1e-6, 2e-6])
    out = tmp_path / "o"
    code = cli.main(["estimate", "--config", str(path), "--tier", "analytic", "--out", str(out)])
    assert code == 2
    man = json.loads((out / "manifest.json").read_text())
    assert man["status"].startswith("ProtocolError")
    assert (out / "points.csv").exists()


def test_rerun_is_byte_identical(tmp_path, capsys, config_dir):
    path = small_config(tmp_path, config_dir, t1=300 / 3298672.286269283,
                        t2=1300 / 3298672.286269283, P_m=[4e-7, 8e-7, 1.2e-6], n_traj=2)
    dirs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli.main(["estimate", "--config", str(path), "--tier", "sde", "--seed", "3",
                         "--out", str(out), "-q"]) == 0
        dirs.append(out)
    capsys.readouterr()
    a, b = dirs
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert any(str(f).startswith("spectra") for f in files)
    for f in files:
        if f.name != "manifest.json":
            assert (a / f).read_bytes() == (b / f).read_bytes(), f
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in dirs)
    for m in (ma, mb):
        for key in ("started", "finished", "argv"):
            m.pop(key)
    assert ma == mb
    assert len(ma["seeds"]) == 6


def test_manifest_reproduces_run(tmp_path, capsys, config_dir):
    first = tmp_path / "first"
    assert cli.main(["estimate", "--config", "scaled_q1e5.json", "--tier", "analytic",
                     "--out", str(first), "-q"]) == 0
    man = json.loads((first / "manifest.json").read_text())
    argv = list(man["argv"])
    argv[argv.index("--out") + 1] = str(tmp_path / "again")
    assert cli.main(argv) == 0
    capsys.readouterr()
    for name in man["outputs"]:
        assert (first / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


def test_threads_recorded(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("OPTOMECH_THREADS", "2")
    cli.main(["coeffs", "--config", "fig2.json", "--out", str(tmp_path / "o"), "-q"])
    capsys.readouterr()
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["threads"] == 2


@pytest.mark.parametrize("command", ["steady", "decay", "spectrum"])
def test_other_subcommands(tmp_path, capsys, command):
    out = tmp_path / "o"
    code, summary, _ = run_cli(capsys, command, "--config", "scaled_q1e5.json", "--out", str(out),
                               "-q")
    assert code == 0 and summary["command"] == command
    assert (out / "results.json").exists()


def test_decay_rejects_stationary(tmp_path, capsys):
    code = cli.main(["decay", "--config", "fig2.json", "--out", str(tmp_path / "o"), "-q"])
    assert code == 3


def test_sweep_analytic(tmp_path, capsys, config_dir):
    path = small_config(tmp_path, config_dir, beta_list=[1e-13, 1e-12], repetitions=2)
    out = tmp_path / "o"
    code, summary, _ = run_cli(capsys, "sweep", "--config", str(path), "--tier", "analytic",
                               "--out", str(out))
    assert code == 0
    assert summary["result"]["floor"] == 1e-13
    assert (out / "points.csv").read_text().startswith("beta,beta_mean,E_r,rel_spread,R")


def test_sweep_without_beta_list(tmp_path, capsys, config_dir):
    data = json.loads((config_dir / "scaled_q1e5.json").read_text())
    del data["run"]["beta_list"]
    path = tmp_path / "nb.json"
    path.write_text(json.dumps(data))
    assert cli.main(["sweep", "--config", str(path), "--out", str(tmp_path / "o"), "-q"]) == 3


def test_entry_point_installed():
    assert shutil.which("optomech") is not None
