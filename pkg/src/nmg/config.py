"""Run configuration: JSON schema, validation and resolution.

A configuration is a JSON document::

    {
      "name": "fig2_subohmic",
      "energy_unit": "eps_s",
      "system": {"epsilon_s": 1.0, "statistics": "bosonic"},
      "environment": [
        {"model": {"type": "ohmic", "eta": 0.4, "s": 0.5, "omega_c": 1.0},
         "kT": 1.0, "mu": 0.0}
      ],
      "grid": {"t0": 0.0, "t_end": 50.0, "h": 0.02},
      "tasks": ["propagate", "coeffs"],
      "numerics": {"v_method": "fdt"},
      "initial_state": {"kind": "fock", "n": 1},
      "sweep": {"parameter": "/environment/0/model/eta", "values": [0.05, 0.4, 0.8]}
    }

Energies are in units of ``energy_unit``.  With the default ``"eps_s"`` all
numbers are already reduced.  With a physical unit (``"ueV"``, ``"meV"``,
``"eV"``) every energy is divided by ``reference_energy`` (default: the
scalar ``epsilon_s``) and the run proceeds in reduced units; times are
always in units of ``hbar / reference_energy``.

Resolution fills every default and converts to reduced units.  The
resolved document is what ``manifest.json`` echoes, and re-feeding it
reproduces the run.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ConfigError, DivergentOccupation
from .spectral_models import (
    Environment,
    LorentzianCutoff,
    OhmicFamily,
    PhotonicBandEdge,
    Reservoir,
    Statistics,
    Tabulated,
)
from .volterra_engine import SystemSpec, TimeGrid

__all__ = ["SCHEMA", "TASKS", "RunConfig", "load_config", "resolve", "validate_document"]

TASKS = ("propagate", "spectrum", "coeffs", "modes", "validate")
ENERGY_UNITS = ("eps_s", "ueV", "meV", "eV")

_pos = {"type": "number", "exclusiveMinimum": 0}
_num = {"type": "number"}
_matrix = {
    "type": "array", "minItems": 1,
    "items": {"type": "array", "minItems": 1, "items": _num},
}

_MODELS = {
    "ohmic": {
        "properties": {"type": {"const": "ohmic"}, "eta": _pos, "s": _pos, "omega_c": _pos},
        "required": ["type", "eta", "s", "omega_c"],
    },
    "lorentzian_cutoff": {
        "properties": {"type": {"const": "lorentzian_cutoff"}, "gamma": _pos, "d": _pos,
                       "omega_c": _num, "omega_cap": _pos},
        "required": ["type", "gamma", "d", "omega_c", "omega_cap"],
    },
    "photonic": {
        "properties": {"type": {"const": "photonic"}, "c": _pos, "omega_e": _num},
        "required": ["type", "c", "omega_e"],
    },
    "tabulated": {
        "properties": {
            "type": {"const": "tabulated"},
            "samples": {"type": "array", "minItems": 2,
                        "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": _num}},
            "support": {"type": "array", "minItems": 1,
                        "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": _num}},
        },
        "required": ["type", "samples"],
    },
}

_model_schema = {
    "type": "object",
    "required": ["type"],
    "properties": {"type": {"enum": list(_MODELS)}},
    "allOf": [
        {"if": {"properties": {"type": {"const": name}}, "required": ["type"]},
         "then": dict(body, additionalProperties=False)}
        for name, body in _MODELS.items()
    ],
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "nmg run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["system", "environment", "grid", "tasks"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "energy_unit": {"enum": list(ENERGY_UNITS)},
        "reference_energy": _pos,
        "system": {
            "type": "object",
            "additionalProperties": False,
            "required": ["epsilon_s"],
            "properties": {
                "epsilon_s": {"oneOf": [_num, _matrix]},
                "epsilon_s_imag": _matrix,
                "statistics": {"enum": ["bosonic", "fermionic"]},
            },
        },
        "environment": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["model"],
                "properties": {
                    "model": _model_schema,
                    "kT": {"type": "number", "minimum": 0},
                    "mu": _num,
                    "statistics": {"enum": ["bosonic", "fermionic"]},
                    "coupling": _matrix,
                },
            },
        },
        "grid": {
            "type": "object",
            "additionalProperties": False,
            "required": ["t_end", "h"],
            "properties": {"t0": _num, "t_end": _num, "h": _pos},
        },
        "tasks": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"enum": list(TASKS)}},
        "numerics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rtol": _pos,
                "atol": _pos,
                "spectral_rtol": _pos,
                "v_method": {"enum": ["fdt", "dyson"]},
                "rho_method": {"enum": ["exact", "heun"]},
                "n_max": {"type": "integer", "minimum": 1},
                "tail_tol": _pos,
                "oracle": {"type": "boolean"},
                "oracle_modes": {"type": "integer", "minimum": 16},
                "seed": {"type": ["integer", "null"]},
                "validate_t_max": _pos,
                "dos_points": {"type": "integer", "minimum": 2},
                "dos_range": {"type": ["array", "null"], "minItems": 2, "maxItems": 2, "items": _num},
            },
        },
        "initial_state": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["fock", "thermal", "coherent", "mixed"]},
                "n": {"type": "integer", "minimum": 0},
                "nbar": {"type": "number", "minimum": 0},
                "alpha": {"type": "array", "minItems": 2, "maxItems": 2, "items": _num},
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "required": ["parameter", "values"],
            "properties": {
                "parameter": {"type": "string", "pattern": "^/"},
                "values": {"type": "array", "minItems": 1},
                "labels": {"type": "array", "items": {"type": "string"}},
            },
        },
        "output": {"type": "string"},
        "_manifest": {"type": "object"},
    },
}

NUMERICS_DEFAULTS = {
    "rtol": 1e-8,
    "atol": 1e-10,
    "spectral_rtol": 1e-10,
    "v_method": "fdt",
    "rho_method": "exact",
    "n_max": 30,
    "tail_tol": 1e-8,
    "oracle": False,
    "oracle_modes": 4000,
    "seed": None,
    "validate_t_max": 10.0,
    "dos_points": 2001,
    "dos_range": None,
}

# power of the energy unit carried by each field
_ENERGY_POWER = {
    "ohmic": {"eta": 0, "s": 0, "omega_c": 1},
    "lorentzian_cutoff": {"gamma": 1, "d": 1, "omega_c": 1, "omega_cap": 1},
    "photonic": {"c": 1.5, "omega_e": 1},
}

_validator = jsonschema.Draft202012Validator(SCHEMA)


def _pointer(path) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in path)


def validate_document(doc) -> None:
    """Raise :class:`ConfigError` (JSON pointer included) on schema violations."""
    errors = sorted(_validator.iter_errors(doc), key=lambda e: (len(list(e.absolute_path)), str(e.absolute_path)))
    if not errors:
        return
    err = jsonschema.exceptions.best_match(errors)
    path = list(err.absolute_path)
    if err.validator == "required" and isinstance(err.instance, dict):
        missing = [r for r in err.validator_value if r not in err.instance]
        if missing:
            path.append(missing[0])
    raise ConfigError(err.message, _pointer(path))


def _get(doc, pointer):
    node = doc
    parts = [p.replace("~1", "/").replace("~0", "~") for p in pointer.lstrip("/").split("/")]
    for p in parts[:-1]:
        node = node[int(p)] if isinstance(node, list) else node[p]
    return node, (int(parts[-1]) if isinstance(node, list) else parts[-1])


def _set(doc, pointer, value):
    try:
        node, key = _get(doc, pointer)
        if isinstance(node, list):
            node[key] = value
        else:
            if key not in node:
                raise KeyError(key)
            node[key] = value
    except (KeyError, IndexError, ValueError, TypeError):
        raise ConfigError(f"sweep parameter {pointer!r} does not exist in the configuration",
                          "/sweep/parameter") from None


@dataclass
class RunConfig:
    """A resolved single run (one sweep entry)."""

    name: str
    system: SystemSpec
    environment: Environment
    grid: TimeGrid
    tasks: tuple
    numerics: dict
    initial_state: dict
    resolved: dict
    label: str | None = None
    reference_energy: float = 1.0
    energy_unit: str = "eps_s"
    extra: dict = field(default_factory=dict)


def _scale_model(model: dict, ref: float) -> dict:
    m = dict(model)
    if m["type"] == "tabulated":
        m["samples"] = [[w / ref, j / ref] for w, j in m["samples"]]
        if "support" in m:
            m["support"] = [[a / ref, b / ref] for a, b in m["support"]]
        return m
    for key, power in _ENERGY_POWER[m["type"]].items():
        m[key] = m[key] / ref**power
    return m


def _normalize_units(doc: dict) -> tuple[dict, float, str]:
    unit = doc.get("energy_unit", "eps_s")
    out = copy.deepcopy(doc)
    out["energy_unit"] = "eps_s"
    if unit == "eps_s":
        out.pop("reference_energy", None)
        return out, 1.0, unit
    eps = doc["system"]["epsilon_s"]
    ref = doc.get("reference_energy")
    if ref is None:
        if isinstance(eps, list):
            raise ConfigError("reference_energy is required for matrix epsilon_s with a physical unit",
                              "/reference_energy")
        ref = float(eps)
        if not ref > 0:
            raise ConfigError("epsilon_s must be positive to serve as the reference energy",
                              "/system/epsilon_s")
    out.pop("reference_energy", None)
    sysd = out["system"]
    if isinstance(eps, list):
        sysd["epsilon_s"] = [[x / ref for x in row] for row in eps]
        if "epsilon_s_imag" in sysd:
            sysd["epsilon_s_imag"] = [[x / ref for x in row] for row in sysd["epsilon_s_imag"]]
    else:
        sysd["epsilon_s"] = eps / ref
    for res in out["environment"]:
        res["model"] = _scale_model(res["model"], ref)
        for key in ("kT", "mu"):
            if key in res:
                res[key] = res[key] / ref
    return out, float(ref), unit


def _build_model(m: dict):
    t = m["type"]
    if t == "ohmic":
        return OhmicFamily(m["eta"], m["s"], m["omega_c"])
    if t == "lorentzian_cutoff":
        return LorentzianCutoff(m["gamma"], m["d"], m["omega_c"], m["omega_cap"])
    if t == "photonic":
        return PhotonicBandEdge(m["c"], m["omega_e"])
    return Tabulated([tuple(p) for p in m["samples"]],
                     [tuple(iv) for iv in m["support"]] if "support" in m else None)


def _fill_defaults(doc: dict) -> dict:
    out = copy.deepcopy(doc)
    out.pop("_manifest", None)
    out.pop("sweep", None)
    out.pop("output", None)
    out.setdefault("name", "run")
    sysd = out["system"]
    sysd.setdefault("statistics", "bosonic")
    for res in out["environment"]:
        res.setdefault("kT", 0.0)
        res.setdefault("mu", 0.0)
        res.setdefault("statistics", sysd["statistics"])
    out["grid"].setdefault("t0", 0.0)
    num = dict(NUMERICS_DEFAULTS)
    num.update(out.get("numerics", {}))
    out["numerics"] = num
    ini = {"kind": "fock", "n": 1}
    ini.update(out.get("initial_state", {}))
    out["initial_state"] = ini
    return out


def resolve(doc: dict, label: str | None = None) -> RunConfig:
    """Build a :class:`RunConfig` from a single (sweep-free) document."""
    doc, ref, unit = _normalize_units(doc)
    doc = _fill_defaults(doc)
    sysd = doc["system"]
    eps = np.atleast_2d(np.asarray(sysd["epsilon_s"], dtype=float)).astype(complex)
    if "epsilon_s_imag" in sysd:
        im = np.asarray(sysd["epsilon_s_imag"], dtype=float)
        if im.shape != eps.shape:
            raise ConfigError("epsilon_s_imag must match epsilon_s in shape", "/system/epsilon_s_imag")
        eps = eps + 1j * im
    try:
        system = SystemSpec(eps, sysd["statistics"])
    except ValueError as exc:
        raise ConfigError(str(exc), "/system/epsilon_s") from None
    reservoirs = []
    for i, res in enumerate(doc["environment"]):
        base = f"/environment/{i}"
        try:
            model = _build_model(res["model"])
        except ValueError as exc:
            raise ConfigError(str(exc), base + "/model") from None
        kT = res["kT"]
        beta = math.inf if kT == 0 else 1.0 / kT
        coupling = None
        if "coupling" in res:
            coupling = np.asarray(res["coupling"], dtype=float)
            if coupling.ndim != 2 or coupling.shape[0] != coupling.shape[1]:
                raise ConfigError("coupling must be a square matrix", base + "/coupling")
            if coupling.shape[0] != system.dimension:
                raise ConfigError("coupling size differs from the system dimension", base + "/coupling")
        elif system.dimension > 1:
            coupling = np.eye(system.dimension)
        try:
            reservoirs.append(Reservoir(model, beta, res["mu"], res["statistics"], coupling))
        except DivergentOccupation as exc:
            raise ConfigError(str(exc), base + "/mu") from None
        except ValueError as exc:
            raise ConfigError(str(exc), base) from None
        if Statistics.parse(res["statistics"]) is not system.statistics:
            raise ConfigError("reservoir statistics must match the system statistics", base + "/statistics")
    env = Environment(tuple(reservoirs), dimension=system.dimension)
    g = doc["grid"]
    try:
        grid = TimeGrid(float(g["t0"]), float(g["t_end"]), float(g["h"]))
    except ValueError as exc:
        # t_end <= t0 is a fault of t_end; every other grid error is one of h
        field_ = "/grid/t_end" if str(exc).startswith("t_end") else "/grid/h"
        raise ConfigError(str(exc), field_) from None
    num = doc["numerics"]
    if num["dos_range"] is not None and not num["dos_range"][1] > num["dos_range"][0]:
        raise ConfigError("dos_range must be increasing", "/numerics/dos_range")
    ini = doc["initial_state"]
    if system.statistics is Statistics.FERMIONIC:
        if ini["kind"] == "coherent":
            raise ConfigError("coherent states are bosonic", "/initial_state/kind")
        if ini["kind"] == "fock" and ini.get("n", 0) > 1:
            raise ConfigError("a fermionic level has occupation 0 or 1", "/initial_state/n")
        if ini["kind"] == "thermal" and ini.get("nbar", 0.0) > 1:
            raise ConfigError("fermionic occupation must not exceed 1", "/initial_state/nbar")
    elif ini["kind"] == "mixed":
        raise ConfigError("the maximally mixed state is defined for a fermionic level only",
                          "/initial_state/kind")
    return RunConfig(doc["name"], system, env, grid, tuple(doc["tasks"]), num, ini, doc,
                     label, ref, unit)


def _label(pointer: str, value) -> str:
    key = pointer.rstrip("/").split("/")[-1]
    if isinstance(value, float):
        value = repr(value)
    return f"{key}={value}"


def load_config(source, *, tolerance: float | None = None, seed: int | None = None) -> list[RunConfig]:
    """Parse, validate and resolve a configuration (path, JSON text or dict).

    A ``sweep`` expands into one :class:`RunConfig` per value, each carrying
    a ``label`` naming its output sub-directory.
    """
    if isinstance(source, dict):
        doc = copy.deepcopy(source)
    else:
        text = Path(source).read_text() if not str(source).lstrip().startswith("{") else str(source)
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "") from None
    validate_document(doc)
    if tolerance is not None:
        if not tolerance > 0:
            raise ConfigError("tolerance must be positive", "/numerics/rtol")
        doc.setdefault("numerics", {})["rtol"] = float(tolerance)
    if seed is not None:
        doc.setdefault("numerics", {})["seed"] = int(seed)
    sweep = doc.pop("sweep", None)
    if sweep is None:
        return [resolve(doc)]
    labels = sweep.get("labels")
    if labels is not None and len(labels) != len(sweep["values"]):
        raise ConfigError("labels must match values in length", "/sweep/labels")
    runs = []
    for i, value in enumerate(sweep["values"]):
        entry = copy.deepcopy(doc)
        _set(entry, sweep["parameter"], value)
        try:
            validate_document(entry)
        except ConfigError as exc:
            raise ConfigError(f"sweep value {value!r}: {exc.reason}", f"/sweep/values/{i}") from None
        label = labels[i] if labels is not None else _label(sweep["parameter"], value)
        runs.append(resolve(entry, label))
    return runs
