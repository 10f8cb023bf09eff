"""Scenario configuration: schema, defaults, and builders for model objects.

A scenario is a TOML (or JSON) tree.  Every section is optional except
``[coefficients]``; unknown keys and wrongly typed values are rejected
with the line they appear on.
"""

from __future__ import annotations

import hashlib
import json
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .coefficients import build_coefficients, singular_square_field
from .fields import GridField
from .harnack import anchored_exponential
from .model import Ensemble, TimeGrid
from .rng import STREAM_AUX, standard_normals

SCENARIO_DIR = Path(__file__).with_name("scenarios")

_NUM = (int, float)

SCHEMA = {
    "scenario": {"name": (str, "scenario"), "dim": (int, 1), "seed": (int, 0)},
    "coefficients": {"family": (str, None), "params": (dict, {})},
    "grid": {"t_start": (_NUM, 0.0), "t_end": (_NUM, 1.0), "n_steps": (int, 100)},
    "initial": {"kind": (str, "dirac"), "x": (list, [0.0]), "mean": (list, [0.0]), "sd": (_NUM, 1.0),
                "size": (int, 1000), "path": (str, "")},
    "transport": {"theta": (_NUM, 2.0), "method": (str, "auto"), "epsilon": (_NUM, 1e-3), "cap": (int, 256),
                  "other": (dict, {"kind": "normal", "mean": [1.0], "sd": 1.0})},
    "picard": {"tol": (_NUM, 1e-6), "max_iter": (int, 30), "theta": (_NUM, 2.0)},
    "krylov": {"f": (dict, {"kind": "indicator", "half_width": 1.0}), "box": (_NUM, 6.0), "shape": (int, 600),
               "p": (_NUM, 4.0), "q": (_NUM, 4.0), "lam": (_NUM, 1.0), "markov_checks": (int, 0)},
    "harnack": {"mu0": (dict, {"kind": "dirac", "x": [0.0]}), "nu0": (dict, {"kind": "dirac", "x": [1.0]}),
                "t0": (_NUM, 1.0), "f": (dict, {"alpha": 1.0, "anchor": -10.0}),
                "p_values": (list, [1.5, 2.0, 4.0]), "p_f": (dict, {"alpha": 0.25, "anchor": -10.0}),
                "C": (_NUM, None), "c": (_NUM, None), "merge_factor": (_NUM, 10.0), "delta": (_NUM, None),
                "lam": (_NUM, 0.0)},
    "shift_harnack": {"v": (list, [1.0]), "t0": (_NUM, 1.0), "f": (dict, {"alpha": -1.0, "anchor": 10.0}),
                      "p_values": (list, [2.0]), "p_f": (dict, {"alpha": -0.5, "anchor": 10.0})},
    "zvonkin": {"lam": (_NUM, 10.0), "x_lo": (_NUM, -4.0), "x_hi": (_NUM, 4.0), "nx": (int, 801),
                "nt": (int, 4000), "dt_ladder": (list, [4e-3, 1e-3, 2.5e-4]), "size": (int, 500),
                "x0": (_NUM, 0.2), "find_threshold": (bool, True), "target": (_NUM, 0.2)},
    "validate": {"n_points": (int, 200), "n_measures": (int, 12), "ensemble_size": (int, 24),
                 "box": (_NUM, 3.0), "theta": (_NUM, 2.0)},
    "tolerances": {"se_factor": (_NUM, 3.0)},
}


class ConfigError(ValueError):
    """Schema violation, reported with the offending line when it can be found."""


def _line_of(text: str, key: str, section: str | None = None) -> int | None:
    in_section = section is None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if s.startswith("["):
            name = s.strip("[]").strip()
            in_section = section is None or name == section or name.startswith(section + ".")
            if key == section and name == section:
                return i
            continue
        if in_section and (s.startswith(key + " ") or s.startswith(key + "=")):
            return i
    return None


def _where(text, key, section):
    line = _line_of(text, key, section) if text else None
    return f"line {line}: " if line else ""


def parse_text(text: str, fmt: str = "toml") -> dict:
    try:
        return json.loads(text) if fmt == "json" else tomllib.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None


def load_config(path) -> tuple[dict, str]:
    """Read a config file (or the name of a shipped scenario); returns (tree, text)."""
    p = Path(path)
    if not p.exists():
        shipped = SCENARIO_DIR / (p.name if p.suffix else p.name + ".toml")
        if shipped.exists():
            p = shipped
        else:
            raise ConfigError(f"config {path} not found (shipped scenarios: {', '.join(list_scenarios())})")
    text = p.read_text()
    return parse_text(text, "json" if p.suffix == ".json" else "toml"), text


def list_scenarios() -> list:
    return sorted(f.stem for f in SCENARIO_DIR.glob("*.toml"))


def _type_ok(val, typ) -> bool:
    if isinstance(val, bool) and typ is not bool:
        return False
    return isinstance(val, typ)


def resolve(tree: dict, text: str = "") -> dict:
    """Validate ``tree`` against the schema and fill in defaults."""
    out = {}
    for section, keys in tree.items():
        if section not in SCHEMA:
            raise ConfigError(f"{_where(text, section, section)}unknown section [{section}]; "
                              f"known: {', '.join(SCHEMA)}")
        if not isinstance(keys, dict):
            raise ConfigError(f"{_where(text, section, None)}[{section}] must be a table")
    for section, spec in SCHEMA.items():
        given = tree.get(section, {})
        sec = {}
        for key, val in given.items():
            if key not in spec:
                raise ConfigError(f"{_where(text, key, section)}unknown key '{key}' in [{section}]; "
                                  f"known: {', '.join(spec)}")
            typ = spec[key][0]
            if not _type_ok(val, typ):
                tname = typ.__name__ if isinstance(typ, type) else "number"
                raise ConfigError(f"{_where(text, key, section)}[{section}].{key} must be {tname}, "
                                  f"got {type(val).__name__}")
            sec[key] = val
        for key, (typ, default) in spec.items():
            if key not in sec:
                if default is None and section == "coefficients" and key == "family":
                    raise ConfigError("[coefficients] needs a 'family' key")
                if default is not None:
                    sec[key] = json.loads(json.dumps(default))
        out[section] = sec
    out["coefficients"]["params"] = dict(out["coefficients"].get("params", {}))
    try:
        build_coefficients(out["coefficients"]["family"], out["coefficients"]["params"], out["scenario"]["dim"])
    except ValueError as exc:
        raise ConfigError(f"{_where(text, 'family', 'coefficients')}{exc}") from None
    g = out["grid"]
    TimeGrid(float(g["t_start"]), float(g["t_end"]), g["n_steps"])
    return out


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()


def dump_resolved(resolved: dict, path) -> None:
    import tomli_w

    Path(path).write_text(tomli_w.dumps(resolved))


def build_spec(cfg: dict):
    c = cfg["coefficients"]
    return build_coefficients(c["family"], c["params"], cfg["scenario"]["dim"])


def build_grid(cfg: dict) -> TimeGrid:
    g = cfg["grid"]
    return TimeGrid(float(g["t_start"]), float(g["t_end"]), g["n_steps"])


_ENSEMBLE_SLOTS = {"initial": 0, "mu0": 1, "nu0": 2, "other": 3}


def build_ensemble(table: dict, dim: int, seed: int, slot: str = "initial", size: int | None = None) -> Ensemble:
    """Dirac, Gaussian, or CSV ensembles; Gaussian draws are counter-based."""
    kind = table.get("kind", "dirac")
    size = int(table.get("size", size or 1))
    if kind == "dirac":
        return Ensemble.dirac(np.broadcast_to(np.asarray(table.get("x", [0.0]), float), (dim,)), size)
    if kind == "normal":
        mean = np.broadcast_to(np.asarray(table.get("mean", [0.0]), float), (dim,))
        z = standard_normals(seed, STREAM_AUX, 2**40 + _ENSEMBLE_SLOTS.get(slot, 9), size, dim)
        return Ensemble(mean + float(table.get("sd", 1.0)) * z)
    if kind == "csv":
        return Ensemble.from_csv(table["path"])
    raise ConfigError(f"unknown ensemble kind {kind!r} (dirac, normal, csv)")


def build_test_function(table: dict):
    return anchored_exponential(float(table.get("alpha", 1.0)), float(table.get("anchor", 0.0)),
                                int(table.get("coord", 0)))


def build_krylov_field(cfg: dict) -> GridField:
    k, dim = cfg["krylov"], cfg["scenario"]["dim"]
    f = k["f"]
    kind = f.get("kind", "indicator")
    box, shape = float(k["box"]), int(k["shape"])
    g = cfg["grid"]
    t_range = (float(g["t_start"]), float(g["t_end"]))
    if kind == "indicator":
        hw = float(f.get("half_width", 1.0))
        return GridField.from_function(lambda t, x: np.all(np.abs(x) <= hw, axis=1).astype(float),
                                       [-box] * dim, [box] * dim, [shape] * dim, t_range, 1)
    if kind == "one":
        return GridField.from_function(lambda t, x: np.ones(x.shape[0]), [-box] * dim, [box] * dim,
                                       [shape] * dim, t_range, 1)
    if kind == "singular_square":
        p = cfg["coefficients"]["params"]
        return singular_square_field(float(p.get("alpha", 0.25)), float(p.get("beta", 1.0)), dim, box, shape,
                                     t_range, 1)
    raise ConfigError(f"unknown krylov field kind {kind!r} (indicator, one, singular_square)")
