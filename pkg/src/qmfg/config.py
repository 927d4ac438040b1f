"""Experiment configuration: schema, defaults, validation and model building.

A configuration is a YAML (or JSON) mapping with four top-level sections::

    experiment: mfg-solve          # filtering | meanfield-convergence | mfg-solve | nash
    seed: 2024
    output: results
    spec: {H, Hc, A, J, F, c, U0, T, psi0, Ls, control}
    numerics: {dt, agentDt, grid, bandLimit, M, replicas, Ns, sites, tol, maxIter, ...}

Operators are nested lists whose entries are numbers or complex literals such
as ``"0.5-1j"``.  ``A`` is ``{exchange: g}``, ``{zero: true}`` or
``{matrix: d^2 x d^2}``; ``psi0`` is an amplitude list or Bloch angles
``{theta, phi}``; ``Ls`` is ``gell-mann``, ``none`` or a list of operators.
Missing keys take the values of ``DEFAULTS``; unknown keys are rejected.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml
from jsonschema import Draft202012Validator

from .core import InteractionTensor, exchange_tensor, gell_mann_family, is_hermitian
from .filtering import SCHEMES, FeedbackControl
from .meanfield import MAX_AMPLITUDES
from .mfg import GameSpec
from .projective import bloch_to_psi
from .sphere import SphereGrid

EXPERIMENTS = ("filtering", "meanfield-convergence", "mfg-solve", "nash")
DEVIATION_NAMES = ("const+U0", "const-U0", "const0", "best-response")

DEFAULTS = {
    "experiment": "mfg-solve",
    "seed": 2024,
    "output": "results",
    "spec": {
        "H": [[0.5, 0], [0, -0.5]],
        "Hc": [[0, "-1j"], ["1j", 0]],
        "A": {"exchange": 1.0},
        "J": [[1, 0], [0, -1]],
        "F": [[0, 1], [1, 0]],
        "c": 1.0,
        "U0": 1.0,
        "T": 0.1,
        "psi0": {"theta": 1.2, "phi": 0.7},
        "Ls": "gell-mann",
        "control": None,
    },
    "numerics": {
        "dt": 0.005,
        "agentDt": 0.001,
        "grid": {"nlat": 64, "nlon": 128},
        "bandLimit": 48,
        "M": 100,
        "replicas": 50,
        "Ns": [2, 4, 8],
        "sites": 1,
        "tol": 1e-5,
        "maxIter": 20,
        "sampleEvery": 10,
        "scheme": "euler-maruyama",
        "renormalize": True,
        "deviations": list(DEVIATION_NAMES),
        "controlVariate": True,
    },
}

_ENTRY = {"oneOf": [{"type": "number"}, {"type": "string"}]}
_MATRIX = {"type": "array", "minItems": 1, "items": {"type": "array", "minItems": 1, "items": _ENTRY}}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POS_INT = {"type": "integer", "minimum": 1}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "additionalProperties": False, "required": list(required)}


SCHEMA = _obj({
    "experiment": {"enum": list(EXPERIMENTS)},
    "seed": {"type": "integer", "minimum": 0},
    "output": {"type": "string", "minLength": 1},
    "spec": _obj({
        "H": _MATRIX,
        "Hc": _MATRIX,
        "A": {"oneOf": [
            _obj({"exchange": {"type": "number"}}, ["exchange"]),
            _obj({"zero": {"const": True}}, ["zero"]),
            _obj({"matrix": _MATRIX}, ["matrix"]),
        ]},
        "J": _MATRIX,
        "F": _MATRIX,
        "c": _POS,
        "U0": _POS,
        "T": _POS,
        "psi0": {"oneOf": [
            {"type": "array", "minItems": 2, "items": _ENTRY},
            _obj({"theta": {"type": "number"}, "phi": {"type": "number"}}, ["theta", "phi"]),
        ]},
        "Ls": {"oneOf": [{"enum": ["gell-mann", "none"]}, {"type": "array", "items": _MATRIX}]},
        "control": {"oneOf": [
            {"type": "null"},
            _obj({"observable": _MATRIX, "gain": {"type": "number"}, "offset": {"type": "number"},
                  "bound": _POS}, ["observable", "gain"]),
        ]},
    }),
    "numerics": _obj({
        "dt": _POS,
        "agentDt": _POS,
        "grid": _obj({"nlat": _POS_INT, "nlon": _POS_INT}),
        "bandLimit": _POS_INT,
        "M": _POS_INT,
        "replicas": _POS_INT,
        "Ns": {"type": "array", "minItems": 1, "items": _POS_INT},
        "sites": _POS_INT,
        "tol": _POS,
        "maxIter": _POS_INT,
        "sampleEvery": _POS_INT,
        "scheme": {"enum": list(SCHEMES)},
        "renormalize": {"type": "boolean"},
        "deviations": {"type": "array", "items": {"enum": list(DEVIATION_NAMES)}, "uniqueItems": True},
        "controlVariate": {"type": "boolean"},
    }),
})


class ConfigError(ValueError):
    """Invalid configuration; ``diagnostics`` lists one message per violation."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


def load_file(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"config: cannot read {path}: {exc.strerror}"]) from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"config: not valid YAML/JSON: {exc}"]) from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(["config: top level must be a mapping"])
    return data


def merge_defaults(raw: dict) -> dict:
    """Overlay ``raw`` on ``DEFAULTS`` (sub-mappings merge, everything else replaces)."""

    def merge(base, over):
        out = copy.deepcopy(base)
        for k, v in over.items():
            if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("A", "psi0", "control"):
                out[k] = merge(out[k], v)
            else:
                out[k] = copy.deepcopy(v)
        return out

    return merge(DEFAULTS, raw)


def _path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "config"


def schema_diagnostics(cfg: dict) -> list[str]:
    errs = sorted(Draft202012Validator(SCHEMA).iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    return [f"{_path(e)}: {e.message}" for e in errs]


def parse_complex(x) -> complex:
    if isinstance(x, str):
        return complex(x.replace(" ", ""))
    return complex(x)


def parse_matrix(rows, name: str) -> np.ndarray:
    try:
        m = np.array([[parse_complex(x) for x in row] for row in rows], dtype=complex)
    except (ValueError, TypeError) as exc:
        raise ConfigError([f"{name}: bad matrix entry ({exc})"]) from exc
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ConfigError([f"{name}: matrix must be square"])
    return m


@dataclass
class Model:
    """Operators parsed from the ``spec`` section."""

    H: np.ndarray
    Hc: np.ndarray
    A: InteractionTensor
    J: np.ndarray
    F: np.ndarray
    c: float
    U0: float
    T: float
    psi0: np.ndarray
    Ls: list
    control: FeedbackControl | None

    @property
    def d(self) -> int:
        return self.H.shape[0]

    def game(self) -> GameSpec:
        return GameSpec(self.H, self.Hc, self.A, self.J, self.F, self.c, self.U0, self.T, self.psi0)


def _physics(spec: dict) -> tuple[Model | None, list[str]]:
    diags = []
    mats = {}
    for name in ("H", "Hc", "J", "F"):
        try:
            mats[name] = parse_matrix(spec[name], f"spec.{name}")
        except ConfigError as exc:
            diags += exc.diagnostics
    if diags:
        return None, diags
    d = mats["H"].shape[0]
    for name, m in mats.items():
        if m.shape != (d, d):
            diags.append(f"spec.{name}: shape {m.shape} does not match H ({d}x{d})")
        elif not is_hermitian(m):
            diags.append(f"spec.{name}: not Hermitian")

    A = None
    a = spec["A"]
    try:
        if "exchange" in a:
            A = exchange_tensor(float(a["exchange"])) if d == 2 else None
            if d != 2:
                diags.append("spec.A: the exchange tensor couples qubits only")
        elif "zero" in a:
            A = InteractionTensor.zero(d)
        else:
            m = parse_matrix(a["matrix"], "spec.A.matrix")
            if m.shape != (d * d, d * d):
                diags.append(f"spec.A.matrix: shape {m.shape}, expected ({d * d}, {d * d})")
            else:
                A = InteractionTensor.from_matrix(m)
    except ValueError as exc:
        diags += exc.diagnostics if isinstance(exc, ConfigError) else [f"spec.A: {p}" for p in str(exc).split("; ")]
    except ConfigError as exc:
        diags += exc.diagnostics

    p = spec["psi0"]
    if isinstance(p, dict):
        psi0 = bloch_to_psi(p["theta"], p["phi"]) if d == 2 else None
        if d != 2:
            diags.append("spec.psi0: Bloch angles describe qubits only")
    else:
        try:
            psi0 = np.array([parse_complex(x) for x in p])
        except (ValueError, TypeError) as exc:
            diags.append(f"spec.psi0: bad amplitude ({exc})")
            psi0 = None
        if psi0 is not None:
            if psi0.shape != (d,):
                diags.append(f"spec.psi0: length {psi0.shape[0]} does not match dimension {d}")
            elif not np.linalg.norm(psi0) > 0:
                diags.append("spec.psi0: zero vector")

    ls = spec["Ls"]
    if ls == "gell-mann":
        Ls = gell_mann_family(d - 1)
    elif ls == "none":
        Ls = []
    else:
        Ls = []
        for i, rows in enumerate(ls):
            try:
                m = parse_matrix(rows, f"spec.Ls.{i}")
            except ConfigError as exc:
                diags += exc.diagnostics
                continue
            if m.shape != (d, d):
                diags.append(f"spec.Ls.{i}: shape {m.shape} does not match H")
            Ls.append(m)

    control = None
    if spec["control"] is not None:
        cs = spec["control"]
        try:
            obs = parse_matrix(cs["observable"], "spec.control.observable")
            if obs.shape != (d, d):
                diags.append("spec.control.observable: shape does not match H")
            elif not is_hermitian(obs):
                diags.append("spec.control.observable: not Hermitian")
            else:
                control = FeedbackControl.linear(obs, float(cs["gain"]), float(cs.get("bound", spec["U0"])),
                                                 float(cs.get("offset", 0.0)))
        except ConfigError as exc:
            diags += exc.diagnostics
    if diags:
        return None, diags
    return Model(mats["H"], mats["Hc"], A, mats["J"], mats["F"], float(spec["c"]), float(spec["U0"]),
                 float(spec["T"]), psi0, Ls, control), []


def _numerics(cfg: dict, model: Model) -> list[str]:
    num = cfg["numerics"]
    exp = cfg["experiment"]
    diags = []
    T = model.T
    if num["dt"] > T:
        diags.append(f"numerics.dt: {num['dt']} exceeds spec.T = {T}")
    if exp == "nash" and num["agentDt"] > T:
        diags.append(f"numerics.agentDt: {num['agentDt']} exceeds spec.T = {T}")
    for key in ("dt", "agentDt") if exp == "nash" else ("dt",):
        k = round(T / num[key])
        if k >= 1 and abs(k * num[key] - T) > 1e-9 * T:
            diags.append(f"numerics.{key}: spec.T = {T} is not an integer multiple of {num[key]}")
    if exp in ("mfg-solve", "nash"):
        if model.d != 2:
            diags.append("spec.H: the MFG solver handles qubits only")
        g = num["grid"]
        L = num["bandLimit"]
        try:
            SphereGrid(L, g["nlat"], g["nlon"])
        except ValueError as exc:
            diags.append(f"numerics.grid: {exc}")
    Ns = num["Ns"] if exp in ("meanfield-convergence", "nash") else [num["sites"]]
    for n in Ns:
        if model.d**n > MAX_AMPLITUDES:
            key = "numerics.Ns" if exp != "filtering" else "numerics.sites"
            diags.append(f"{key}: {model.d}^{n} amplitudes exceed the memory guard {MAX_AMPLITUDES}")
    if exp == "meanfield-convergence" and model.A is not None and model.A.dim != model.d:
        diags.append("spec.A: tensor dimension does not match H")
    if exp == "nash" and not num["deviations"]:
        diags.append("numerics.deviations: at least one deviation is required")
    return diags


def validate(raw: dict) -> tuple[dict | None, Model | None, list[str]]:
    """Diagnostics for a raw configuration mapping; empty when it is valid."""
    cfg = merge_defaults(raw)
    diags = schema_diagnostics(cfg)
    if diags:
        return None, None, diags
    model, diags = _physics(cfg["spec"])
    if model is None:
        return None, None, diags
    diags = _numerics(cfg, model)
    if diags:
        return None, None, diags
    return cfg, model, []


def load(path, seed: int | None = None, output: str | None = None) -> tuple[dict, Model]:
    """Read, merge and validate a configuration file; raise ``ConfigError`` on problems."""
    raw = load_file(path)
    if seed is not None:
        raw["seed"] = seed
    if output is not None:
        raw["output"] = output
    cfg, model, diags = validate(raw)
    if diags:
        raise ConfigError(diags)
    return cfg, model


def defaults_yaml() -> str:
    return yaml.safe_dump(DEFAULTS, sort_keys=False, default_flow_style=None)
