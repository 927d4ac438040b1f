import json
import struct

import numpy as np
import pytest
import yaml

from qmfg import __version__
from qmfg.cli import EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main, resolve_threads, run, validate_file
from qmfg.config import DEFAULTS, ConfigError, defaults_yaml, load, validate
from qmfg.io import read_csv, read_field, write_csv, write_field

SMALL_GRID = {"bandLimit": 24, "grid": {"nlat": 32, "nlon": 64}}


def write_config(path, cfg, as_json=False):
    path.write_text(json.dumps(cfg) if as_json else yaml.safe_dump(cfg))
    return path


# --- io -------------------------------------------------------------------------


def test_csv_round_trips_exactly(tmp_path):
    vals = [0.1, 1 / 3, np.pi * 1e-300, -2.5e17, np.nextafter(1.0, 2.0)]
    p = write_csv(tmp_path / "t.csv", ["k", "x", "name"], [[i, v, "a"] for i, v in enumerate(vals)])
    raw = p.read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n")
    header, rows = read_csv(p)
    assert header == ["k", "x", "name"]
    assert [r[1] for r in rows] == vals
    assert raw.splitlines()[2] == b"1,0.33333333333333331,a"
    with pytest.raises(ValueError):
        write_csv(tmp_path / "bad.csv", ["a", "b"], [[1]])


def test_field_dump_header_and_payload(tmp_path):
    data = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4) / 7
    p = write_field(tmp_path / "f.qmfgfld", data, 5)
    raw = p.read_bytes()
    assert raw[:8] == b"QMFGFLD1"
    assert struct.unpack("<HHHH", raw[8:16]) == (1, 5, 3, 4)
    assert len(raw) == 16 + data.size * 8
    np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f8"), data.ravel())
    back, L = read_field(p)
    assert L == 5
    np.testing.assert_array_equal(back, data)
    (tmp_path / "g").write_bytes(b"NOTMAGIC" + raw[8:])
    with pytest.raises(ValueError):
        read_field(tmp_path / "g")


# --- config ---------------------------------------------------------------------


def test_defaults_are_valid_and_round_trip():
    assert yaml.safe_load(defaults_yaml()) == DEFAULTS
    cfg, model, diags = validate({})
    assert diags == [] and cfg == DEFAULTS
    assert model.d == 2 and len(model.Ls) == 3


def test_named_violations():
    assert validate({"numerics": {"dt": -0.1}})[2] == ["numerics.dt: -0.1 is less than or equal to the minimum of 0"]
    bad = [[0, 1, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0], [0, 0, 0, 0]]
    diags = validate({"spec": {"A": {"matrix": bad}}})[2]
    assert any("pair symmetry" in d for d in diags) and all(d.startswith("spec.A") for d in diags)
    assert validate({"spec": {"H": [[0, 1], [0, 0]]}})[2] == ["spec.H: not Hermitian"]
    assert validate({"spec": {"c": 0}})[2][0].startswith("spec.c:")
    assert "unexpected" in validate({"numerics": {"dtt": 0.1}})[2][0]
    assert "memory guard" in validate({"experiment": "nash", "numerics": {"Ns": [30]}})[2][0]
    assert "integer multiple" in validate({"numerics": {"dt": 0.03}})[2][0]
    assert validate({"spec": {"psi0": [0, 0]}})[2] == ["spec.psi0: zero vector"]


def test_complex_entries_and_overrides(tmp_path):
    p = write_config(tmp_path / "c.json", {"spec": {"Hc": [[0, "-1j"], ["1j", 0]], "psi0": [1, "1j"]}}, as_json=True)
    cfg, model = load(p, seed=7, output="x")
    assert cfg["seed"] == 7 and cfg["output"] == "x"
    np.testing.assert_allclose(model.psi0, [1, 1j])
    with pytest.raises(ConfigError):
        load(tmp_path / "missing.yaml")


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv("QMFG_THREADS", raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv("QMFG_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv("QMFG_THREADS", "many")
    with pytest.raises(ConfigError):
        resolve_threads(None)


# --- commands -------------------------------------------------------------------


def test_validate_and_show_defaults(tmp_path, capsys):
    good = write_config(tmp_path / "good.yaml", {"experiment": "filtering"})
    assert main(["validate", "--config", str(good)]) == EXIT_OK
    assert capsys.readouterr().out == ""
    bad = write_config(tmp_path / "bad.yaml", {"numerics": {"dt": -1}})
    assert main(["validate", "--config", str(bad)]) == EXIT_CONFIG
    assert "numerics.dt" in capsys.readouterr().out
    assert main(["show-defaults"]) == EXIT_OK
    assert yaml.safe_load(capsys.readouterr().out) == DEFAULTS
    assert validate_file(tmp_path / "nope.yaml")[0].startswith("config: cannot read")


def test_run_rejects_invalid_config(tmp_path):
    bad = write_config(tmp_path / "bad.yaml", {"numerics": {"dt": -1}})
    assert run(bad, out=str(tmp_path / "o")) == EXIT_CONFIG
    assert not (tmp_path / "o").exists()


def test_filtering_with_zero_operators_is_constant(tmp_path):
    cfg = {"experiment": "filtering", "spec": {"H": [[0, 0], [0, 0]], "Hc": [[0, 0], [0, 0]], "Ls": "none",
                                               "T": 0.05},
           "numerics": {"dt": 0.01, "M": 3, "sampleEvery": 1}}
    p = write_config(tmp_path / "f.yaml", cfg)
    assert main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == EXIT_OK
    header, rows = read_csv(tmp_path / "o" / "filtering.csv")
    states = np.array([r[4:] for r in rows])
    assert len(rows) == 3 * 6
    assert np.all(states == states[0])
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["version"] == __version__ and man["seed"] == DEFAULTS["seed"]
    assert man["config"]["numerics"]["M"] == 3 and man["config"]["spec"]["U0"] == 1.0
    assert man["files"] == ["filtering.csv", "filtering_mean.csv"]


def test_meanfield_convergence_files(tmp_path):
    cfg = {"experiment": "meanfield-convergence", "spec": {"T": 0.02},
           "numerics": {"dt": 0.001, "Ns": [2, 4, 8], "replicas": 4, "M": 4, "sampleEvery": 10}}
    p = write_config(tmp_path / "m.yaml", cfg)
    assert run(p, out=str(tmp_path / "o")) == EXIT_OK
    header, rows = read_csv(tmp_path / "o" / "convergence.csv")
    assert header == ["N", "t", "alpha_mean", "alpha_stderr", "trace_dist_mean", "bound_24", "bound_30"]
    assert sorted({r[0] for r in rows}) == [2, 4, 8]
    res = json.loads((tmp_path / "o" / "manifest.json").read_text())["results"]
    assert res["sandwich_violation"] <= 1e-9 and res["bound_24_holds"]


def test_mfg_solve_artifacts(tmp_path):
    cfg = {"experiment": "mfg-solve", "numerics": {"dt": 0.01, **SMALL_GRID}}
    p = write_config(tmp_path / "m.yaml", cfg)
    assert run(p, out=str(tmp_path / "o")) == EXIT_OK
    out = tmp_path / "o"
    man = json.loads((out / "manifest.json").read_text())
    res = man["results"]
    assert res["converged"] and res["iterations"] <= 20 and res["consistency_residual"] <= 1e-4
    vals, L = read_field(out / "density.qmfgfld")
    assert L == 24 and vals.shape == (2, 32, 64)
    header, rows = read_csv(out / "mfg_fields.csv")
    assert header == ["t", "theta", "phi", "S", "u", "mu"] and len(rows) == 2 * 32 * 64
    assert max(abs(r[4]) for r in rows) <= 1.0


def test_divergence_exits_3(tmp_path, monkeypatch):
    import qmfg.cli as cli

    def diverging(*a, **k):
        raise FloatingPointError("forward step 3: clipped mass 1e-1")

    monkeypatch.setattr(cli, "picard_solve", diverging)
    p = write_config(tmp_path / "m.yaml", {"numerics": {"dt": 0.01, **SMALL_GRID}})
    assert run(p, out=str(tmp_path / "o")) == EXIT_NUMERICAL


@pytest.mark.parametrize("experiment, numerics", [
    ("filtering", {"dt": 0.001, "M": 6, "sites": 2, "sampleEvery": 5}),
    ("nash", {"dt": 0.01, **SMALL_GRID, "Ns": [2, 3], "replicas": 6, "agentDt": 0.005}),
])
def test_same_seed_gives_byte_identical_csv(tmp_path, experiment, numerics):
    cfg = {"experiment": experiment, "spec": {"T": 0.02 if experiment == "filtering" else 0.1}, "numerics": numerics}
    p = write_config(tmp_path / "c.yaml", cfg)
    assert run(p, out=str(tmp_path / "a"), threads=1) == EXIT_OK
    assert run(p, out=str(tmp_path / "b"), threads=2) == EXIT_OK
    assert run(p, seed=99, out=str(tmp_path / "c")) == EXIT_OK
    csvs = sorted(x.name for x in (tmp_path / "a").glob("*.csv"))
    assert csvs
    for name in csvs:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert any((tmp_path / "a" / n).read_bytes() != (tmp_path / "c" / n).read_bytes() for n in csvs)
