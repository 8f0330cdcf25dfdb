import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from triscale.asymptotic_free import backbone_frequency
from triscale.cli import apply_override, ConfigError, run
from triscale.model import OscillatorParams

BASELINE = {"omega": 1.0, "c": 1.0, "d": 1.0, "lambda": 0.5, "epsilon": 0.01, "f_m": 1.0}


def _config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- overrides -------------------------------------------------------------------------

def test_override_parses_json_and_falls_back_to_text():
    data = {"params": {"omega": 1.0}}
    apply_override(data, "params.c=2.5")
    apply_override(data, "check=free")
    apply_override(data, "epsilons=[0.02,0.01,0.005]")
    assert data == {"params": {"omega": 1.0, "c": 2.5}, "check": "free", "epsilons": [0.02, 0.01, 0.005]}
    with pytest.raises(ConfigError):
        apply_override(data, "no-equals-sign")
    with pytest.raises(ConfigError):
        apply_override(data, "check.deeper=1")


# --- commands ---------------------------------------------------------------------------

def test_backbone_csv(tmp_path):
    cfg = _config(tmp_path, {"params": {"omega": 1.0, "c": 1.0, "d": 1.0, "epsilon": 0.01},
                             "amplitudes": {"start": 0.0, "stop": 3.0, "num": 7}})
    out = tmp_path / "bb.csv"
    assert run(["backbone", "--config", cfg, "--out", str(out)]) == 0
    rows = _rows(out)
    assert list(rows[0]) == ["a", "nu", "nu_order1"] and len(rows) == 7
    p = OscillatorParams(omega=1.0, c=1.0, d=1.0, epsilon=0.01)
    for row in rows:
        assert float(row["nu"]) == backbone_frequency(float(row["a"]), p)


def test_backbone_of_linear_system_is_flat(tmp_path):
    cfg = _config(tmp_path, {"params": {"omega": 1.3, "epsilon": 0.01}, "amplitudes": [0.0, 1.0, 2.0]})
    out = tmp_path / "bb.csv"
    assert run(["backbone", "--config", cfg, "--out", str(out)]) == 0
    assert {row["nu"] for row in _rows(out)} == {"1.3"}


def test_response_linear_peak_is_symmetric(tmp_path):
    cfg = _config(tmp_path, {"params": {**BASELINE, "c": 0.0, "d": 0.0}, "sigma_range": [-2.0, 2.0],
                             "n_points": 41})
    out = tmp_path / "r.csv"
    assert run(["response", "--config", cfg, "--out", str(out)]) == 0
    rows = _rows(out)
    assert list(rows[0]) == ["sigma", "forcing_freq", "a", "beta", "gamma", "stable", "residual", "trace_j",
                             "det_j"]
    sigma = np.array([float(r["sigma"]) for r in rows])
    a = np.array([float(r["a"]) for r in rows])
    assert abs(sigma[np.argmax(a)]) < 0.15
    assert all(float(r["residual"]) <= 1e-12 for r in rows)
    assert all(r["stable"] in ("0", "1") for r in rows)


def test_peak_json_with_located_branch_maximum(tmp_path):
    cfg = _config(tmp_path, {"params": BASELINE, "locate": True})
    out = tmp_path / "peak.json"
    assert run(["peak", "--config", cfg, "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert data["a0"] == 2.0 and data["sigma0"] == 1.5
    assert data["sigma1"] == pytest.approx(-43 / 6)
    assert data["gamma"] == -data["beta"]
    assert data["located"]["residual"] <= 1e-14


def test_simulate_writes_requested_grid(tmp_path):
    cfg = _config(tmp_path, {"system": "forced_1dof", "params": BASELINE, "t_end": 10.0,
                             "initial": {"stationary": True}, "output": {"step": 0.5}})
    out = tmp_path / "sim.csv"
    assert run(["simulate", "--config", cfg, "--out", str(out)]) == 0
    rows = _rows(out)
    assert list(rows[0]) == ["t", "u_1", "v_1"] and len(rows) == 21
    assert float(rows[-1]["t"]) == 10.0


def test_simulate_chain_from_nonlinear_mode(tmp_path):
    cfg = _config(tmp_path, {"system": "free_ndof", "model": {"chain": {"n": 3}, "epsilon": 0.02},
                             "t_end": 5.0, "initial": {"amplitude": 1.0}, "output": {"n": 6}})
    out = tmp_path / "sim.csv"
    assert run(["simulate", "--config", cfg, "--out", str(out)]) == 0
    assert list(_rows(out)[0]) == ["t", "u_1", "u_2", "u_3", "v_1", "v_2", "v_3"]


def test_spectrum_writes_spectrum_and_peaks(tmp_path):
    cfg = _config(tmp_path, {"system": "free_1dof", "params": {"omega": 1.0, "c": 1.0, "d": 1.0, "epsilon": 0.01},
                             "t_end": 600.0, "initial": {"amplitude": 1.0},
                             "spectrum": {"n_samples": 4096, "n_peaks": 3}})
    out = tmp_path / "spec.csv"
    assert run(["spectrum", "--config", cfg, "--out", str(out)]) == 0
    assert list(_rows(out)[0]) == ["frequency", "magnitude"]
    peaks = _rows(tmp_path / "spec_peaks.csv")
    assert list(peaks[0]) == ["frequency", "magnitude", "bin_index"]
    nu = backbone_frequency(1.0, OscillatorParams(omega=1.0, c=1.0, d=1.0, epsilon=0.01))
    assert float(peaks[0]["frequency"]) * 2 * np.pi == pytest.approx(nu, abs=2 * np.pi / 600)


def test_modal_json(tmp_path):
    cfg = _config(tmp_path, {"model": {"chain": {"n": 5}}})
    out = tmp_path / "modal.json"
    assert run(["modal", "--config", cfg, "--out", str(out)]) == 0
    data = json.loads(out.read_text())
    assert len(data["omegas"]) == 5 and np.array(data["phis"]).shape == (5, 5)
    assert data["max_residual"] < 1e-9 and data["orthonormality_error"] < 1e-10
    assert data["resonance_flags"] == []


def test_validate_writes_report_and_table(tmp_path):
    cfg = _config(tmp_path, {"check": "free", "params": {"omega": 1.0, "c": 1.0, "d": 1.0}, "a": 1.0,
                             "gamma": 5.0})
    out = tmp_path / "free.json"
    assert run(["validate", "--config", cfg, "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    assert report["check"] == "free" and report["status"] == "ok"
    assert len(_rows(tmp_path / "free.csv")) == 3


def test_validate_refuses_unstable_branch(tmp_path):
    cfg = _config(tmp_path, {"check": "forced", "params": {**BASELINE, "sigma": 1.2}, "branch": 1})
    assert run(["validate", "--config", cfg, "--out", str(tmp_path / "v.json")]) == 3


# --- error classes and invariants -----------------------------------------------------------

@pytest.mark.parametrize("data", [
    {"params": BASELINE, "amplitudes": [1.0], "colour": "red"},
    {"params": {**BASELINE, "mass": 1.0}, "amplitudes": [1.0]},
    {"amplitudes": [1.0]},
    {"params": {**BASELINE, "omega": -1.0}, "amplitudes": [1.0]},
])
def test_bad_config_exits_2(tmp_path, data):
    assert run(["backbone", "--config", _config(tmp_path, data)]) == 2


def test_unreadable_config_exits_2(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert run(["modal", "--config", str(tmp_path / "bad.json")]) == 2
    assert run(["modal", "--config", str(tmp_path / "missing.json")]) == 2


def test_out_of_range_tolerance_exits_2(tmp_path):
    cfg = _config(tmp_path, {"system": "free_1dof", "params": BASELINE, "t_end": 1.0, "initial": {"state": [0, 0]}})
    assert run(["simulate", "--config", cfg, "--rel-tol", "1e-20"]) == 2


def test_internal_resonance_exits_5(tmp_path):
    cfg = _config(tmp_path, {"system": "free_ndof", "model": {"mass": [[1, 0], [0, 1]],
                                                               "stiffness": [[1, 0], [0, 4]]},
                             "t_end": 1.0, "initial": {"amplitude": 1.0}})
    assert run(["simulate", "--config", cfg]) == 5


def test_integrator_failure_exits_4(tmp_path):
    # a softening cubic released far out escapes to infinity in finite time
    cfg = _config(tmp_path, {"system": "free_1dof", "params": {"omega": 1.0, "d": -1.0, "epsilon": 0.1},
                             "t_end": 100.0, "initial": {"state": [3.0, 0.0]}})
    assert run(["simulate", "--config", cfg, "--out", str(tmp_path / "x.csv")]) == 4


def test_solver_failure_exits_3(tmp_path):
    cfg = _config(tmp_path, {"check": "envelope", "params": BASELINE, "initial": {"a": 1.0, "beta": 0.0},
                             "t_end": 1.0})
    assert run(["validate", "--config", cfg, "--out", str(tmp_path / "e.json")]) == 3


def test_set_overrides_config(tmp_path):
    cfg = _config(tmp_path, {"params": {"omega": 1.0, "epsilon": 0.01}, "amplitudes": [1.0]})
    out = tmp_path / "bb.csv"
    assert run(["backbone", "--config", cfg, "--out", str(out), "--set", "params.omega=2.0"]) == 0
    assert _rows(out)[0]["nu"] == "2"


def test_seedless_passes_without_randomness(tmp_path):
    cfg = _config(tmp_path, {"params": BASELINE})
    assert run(["peak", "--config", cfg, "--seedless", "--out", str(tmp_path / "p.json")]) == 0


def test_repeat_runs_are_byte_identical(tmp_path):
    cfg = _config(tmp_path, {"system": "forced_1dof", "params": BASELINE, "t_end": 50.0,
                             "initial": {"stationary": True}, "output": {"n": 101}})
    outs = [tmp_path / f"run{i}.csv" for i in range(2)]
    for out in outs:
        assert run(["simulate", "--config", cfg, "--out", str(out)]) == 0
    assert outs[0].read_bytes() == outs[1].read_bytes()
    raw = outs[0].read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")


def test_stdout_output_and_multi_file_refusal(tmp_path, capsys):
    cfg = _config(tmp_path, {"params": {"omega": 1.0, "epsilon": 0.01}, "amplitudes": [0.0, 1.0]})
    assert run(["backbone", "--config", cfg]) == 0
    text = capsys.readouterr().out
    assert list(csv.reader(io.StringIO(text)))[0] == ["a", "nu", "nu_order1"]
    spec_cfg = _config(tmp_path, {"system": "free_1dof", "params": {"omega": 1.0, "epsilon": 0.01},
                                  "t_end": 100.0, "initial": {"amplitude": 1.0},
                                  "spectrum": {"n_samples": 256}}, "spec.json")
    assert run(["spectrum", "--config", spec_cfg]) == 2


def test_module_entry_point(tmp_path):
    cfg = _config(tmp_path, {"model": {"chain": {"n": 2}}})
    proc = subprocess.run([sys.executable, "-m", "triscale", "modal", "--config", cfg],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert len(json.loads(proc.stdout)["omegas"]) == 2
