import copy
import csv
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from nmg import ConfigError
from nmg.cli import list_scenarios, load_scenario, main, run
from nmg.config import load_config, validate_document

BASE = {
    "name": "tiny",
    "system": {"epsilon_s": 1.0, "statistics": "bosonic"},
    "environment": [{"model": {"type": "ohmic", "eta": 0.2, "s": 1.0, "omega_c": 1.0}, "kT": 1.0}],
    "grid": {"t0": 0.0, "t_end": 2.0, "h": 0.05},
    "tasks": ["propagate", "coeffs", "spectrum", "modes", "validate"],
    "numerics": {"oracle": True, "oracle_modes": 400, "seed": 3, "validate_t_max": 2.0, "dos_points": 101},
    "initial_state": {"kind": "fock", "n": 1},
}


def _doc(**changes):
    d = copy.deepcopy(BASE)
    for key, value in changes.items():
        d[key] = value
    return d


def _read(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(x) for x in r] for r in rows[1:]])


def _csvs(folder):
    return {p: open(os.path.join(folder, p), "rb").read() for p in sorted(os.listdir(folder)) if p.endswith(".csv")}


def _main(argv, capsys):
    code = main(argv)
    return code, capsys.readouterr()


# --- scenarios -----------------------------------------------------------

def test_bundled_scenarios_are_valid():
    names = list_scenarios()
    assert names == sorted(["fig2_subohmic", "ohmic_s1", "superohmic_s3", "set_lorentzian", "photonic_band_edge"])
    for name in names:
        doc = load_scenario(name)
        validate_document(doc)
        assert load_config(doc)


def test_scenarios_cli(tmp_path, capsys):
    code, out = _main(["scenarios", "list"], capsys)
    assert code == 0 and "fig2_subohmic" in out.out.split()
    code, out = _main(["scenarios", "emit", "ohmic_s1"], capsys)
    assert code == 0 and json.loads(out.out) == load_scenario("ohmic_s1")
    target = tmp_path / "s.json"
    assert _main(["scenarios", "emit", "set_lorentzian", "--out", str(target)], capsys)[0] == 0
    assert json.loads(target.read_text()) == load_scenario("set_lorentzian")
    code, out = _main(["scenarios", "emit", "nonexistent"], capsys)
    assert code == 2


def test_physical_units_resolve_to_reduced_units():
    cfgs = load_config(load_scenario("fig2_subohmic"))
    assert [c.label for c in cfgs] == ["eta=0.05", "eta=0.4", "eta=0.8"]
    for c in cfgs:
        # eps_s = omega_c = k_B T, measured in micro-eV
        assert c.reference_energy == pytest.approx(13.83)
        env = c.resolved["environment"][0]
        assert c.resolved["system"]["epsilon_s"] == pytest.approx(1.0)
        assert env["model"]["omega_c"] == pytest.approx(1.0) and env["kT"] == pytest.approx(1.0)
        assert env["model"]["s"] == 0.5
    assert [c.resolved["environment"][0]["model"]["eta"] for c in cfgs] == [0.05, 0.4, 0.8]


def test_unit_conversion_matches_reduced_run(tmp_path):
    meV = _doc(energy_unit="meV", tasks=["propagate"], numerics={})
    meV["system"]["epsilon_s"] = 2.0
    meV["environment"][0]["model"]["omega_c"] = 2.0
    meV["environment"][0]["kT"] = 2.0
    meV["grid"] = {"t0": 0.0, "t_end": 2.0, "h": 0.05}
    run(meV, tmp_path / "a")
    run(_doc(tasks=["propagate"], numerics={}), tmp_path / "b")
    assert _csvs(tmp_path / "a") == _csvs(tmp_path / "b")


# --- configuration errors ------------------------------------------------------

@pytest.mark.parametrize("mutate,pointer", [
    (lambda d: d.update(tasks=[]), "/tasks"),
    (lambda d: d["grid"].update(h=-0.1), "/grid/h"),
    (lambda d: d["grid"].update(h=0.3), "/grid/h"),
    (lambda d: d["environment"][0]["model"].update(eta=-1.0), "/environment/0/model/eta"),
    (lambda d: d["environment"][0].update(mu=0.5), "/environment/0/mu"),
    (lambda d: d["environment"][0]["model"].update(type="gaussian"), "/environment/0/model/type"),
    (lambda d: d.pop("grid"), "/grid"),
    (lambda d: d.update(colour="blue"), "/"),
    (lambda d: d.update(tasks=["propagate", "dance"]), "/tasks/1"),
])
def test_config_errors_carry_pointer(mutate, pointer, tmp_path, capsys):
    d = _doc()
    mutate(d)
    with pytest.raises(ConfigError) as info:
        load_config(d)
    assert info.value.pointer == pointer or (pointer == "/" and info.value.pointer in ("", "/"))
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(d))
    code, out = _main(["run", str(path), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    assert f"configuration error at {pointer}" in out.err


def test_missing_file_and_bad_arguments(tmp_path, capsys):
    code, out = _main(["run", str(tmp_path / "nope.json")], capsys)
    assert code == 2 and "not found" in out.err
    (tmp_path / "broken.json").write_text("{not json")
    assert _main(["run", str(tmp_path / "broken.json")], capsys)[0] == 2
    good = tmp_path / "good.json"
    good.write_text(json.dumps(_doc()))
    assert _main(["run", str(good), "--threads", "0"], capsys)[0] == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    d = _doc(tasks=["propagate"], initial_state={"kind": "coherent", "alpha": [100.0, 0.0]})
    path = tmp_path / "big.json"
    path.write_text(json.dumps(d))
    code, out = _main(["run", "--config", str(path), "--out", str(tmp_path / "o")], capsys)
    assert code == 3
    assert "propagate" in out.err


# --- runs ------------------------------------------------------------------------

@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("full")
    run(_doc(), out)
    return out


def test_output_files_and_columns(full_run):
    files = sorted(os.listdir(full_run))
    assert files == ["coeffs.csv", "dos.csv", "manifest.json", "modes.csv", "rho.csv", "u.csv", "validate.csv"]
    head, u = _read(full_run / "u.csv")
    assert head == ["t", "re_u_00", "im_u_00", "abs_u_00"]
    assert len(u) == 41 and u[0, 1] == 1.0
    assert np.allclose(u[:, 3], np.hypot(u[:, 1], u[:, 2]))
    head, c = _read(full_run / "coeffs.csv")
    assert head == ["t", "eps_tilde_00", "gamma_00", "gamma_tilde_00"]
    head, r = _read(full_run / "rho.csv")
    assert head[0] == "t" and head[1] == "p_0" and head[-2:] == ["trace", "min_eigenvalue"]
    assert np.allclose(r[:, head.index("trace")], 1.0, atol=1e-12)
    head, d = _read(full_run / "dos.csv")
    assert head == ["omega", "D_cont"] and len(d) == 101 and np.all(d[:, 1] >= 0)
    head, m = _read(full_run / "modes.csv")
    assert head == ["omega_prime", "residue", "log_residue"] and len(m) == 0


def test_validation_report_passes(full_run):
    with open(full_run / "validate.csv") as fh:
        rows = list(csv.DictReader(fh))
    checks = [(r["check"], r["method_b"]) for r in rows]
    assert ("u", "spectral") in checks and ("u", "discrete_bath") in checks and ("v", "dyson") in checks
    assert ("occupation", "green_functions") in checks and ("sum_rule", "identity") in checks
    for r in rows:
        assert r["status"] == "PASS", r
        assert float(r["max_deviation"]) <= float(r["tolerance"])


def test_manifest_round_trip(full_run, tmp_path):
    manifest = json.loads((full_run / "manifest.json").read_text())
    meta = manifest["_manifest"]
    assert meta["files"] == ["coeffs.csv", "dos.csv", "modes.csv", "rho.csv", "u.csv", "validate.csv"]
    assert set(meta["timings_s"]) == {"propagate", "coeffs", "spectrum", "modes", "validate"}
    assert manifest["numerics"]["rtol"] == 1e-8 and manifest["numerics"]["tail_tol"] == 1e-8
    run(full_run / "manifest.json", tmp_path)
    assert _csvs(tmp_path) == _csvs(full_run)


def test_tolerance_and_seed_flags(tmp_path, capsys):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(_doc(tasks=["coeffs"])))
    code, _ = _main(["run", str(path), "--out", str(tmp_path / "o"), "--tolerance", "1e-9", "--seed", "11"], capsys)
    assert code == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["numerics"]["rtol"] == 1e-9 and manifest["numerics"]["seed"] == 11


def test_sweep_runs_are_thread_independent(tmp_path):
    d = _doc(tasks=["propagate", "coeffs"], numerics={},
             sweep={"parameter": "/environment/0/model/eta", "values": [0.1, 0.3]})
    top = run(d, tmp_path / "serial", threads=1)
    run(d, tmp_path / "parallel", threads=2)
    assert top["entries"] == ["eta=0.1", "eta=0.3"]
    for label in top["entries"]:
        assert _csvs(tmp_path / "serial" / label) == _csvs(tmp_path / "parallel" / label)
    a = _read(tmp_path / "serial" / "eta=0.1" / "u.csv")[1]
    b = _read(tmp_path / "serial" / "eta=0.3" / "u.csv")[1]
    assert a[-1, 3] > b[-1, 3]


def test_fermionic_two_lead_run(tmp_path):
    d = load_scenario("set_lorentzian")
    d["grid"] = {"t0": 0.0, "t_end": 2.0, "h": 0.02}
    d["tasks"] = ["propagate", "modes"]
    run(d, tmp_path)
    head, m = _read(tmp_path / "modes.csv")
    assert len(m) == 2 and np.all(np.isfinite(m[:, 2]))
    head, r = _read(tmp_path / "rho.csv")
    assert head[1:3] == ["p_0", "p_1"]


def test_console_script_and_log_level(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(_doc(tasks=["coeffs"], numerics={})))
    env = dict(os.environ, NMG_LOG="INFO")
    proc = subprocess.run([sys.executable, "-m", "nmg", "run", str(path), "--out", str(tmp_path / "o")],
                          capture_output=True, text=True, env=env)
    assert proc.returncode == 0
    assert "task coeffs done" in proc.stderr
