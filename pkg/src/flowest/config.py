"""Pipeline configuration: YAML file, schema validation, defaults.

Every range problem is reported with the offending key path before any
computation starts.
"""
from __future__ import annotations

import copy
import os
from typing import Any

import jsonschema
import yaml

METHODS = ("LSQ", "LSE", "QSE", "SLSE", "K-LSQ", "K-LSE")


class ConfigError(ValueError):
    pass


_window = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_pos_int = {"type": "integer", "minimum": 1}
_pos_num = {"type": "number", "exclusiveMinimum": 0}

SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "output_dir": {"type": "string"},
                "snapshots": {"type": "string"},
                "format": {"enum": ["text", "binary"]},
            },
        },
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "required": ["grid", "n_modes"],
            "properties": {
                "grid": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["dims"],
                    "properties": {
                        "dims": {"type": "array", "items": {"type": "integer", "minimum": 3},
                                 "minItems": 2, "maxItems": 3},
                        "lower": {"type": "array", "items": {"type": "number"}},
                        "upper": {"type": "array", "items": {"type": "number"}},
                    },
                },
                "n_modes": {"type": "integer", "minimum": 3},
                "n_unresolved": {"type": "integer", "minimum": 0},
                "dynamics": {"enum": ["limit-cycle", "chaotic-quadratic"]},
                "family": {"enum": ["trigonometric", "polynomial-bump"]},
                "span": _window,
                "dt": _pos_num,
                "sample_every": _pos_int,
                "burn_in": {"type": "number", "minimum": 0},
                "tail_strength": {"type": "number", "minimum": 0},
            },
        },
        "pod": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n_retained"],
            "properties": {"n_retained": _pos_int, "window": _window},
        },
        "calibration": {
            "type": "object",
            "additionalProperties": False,
            "required": ["window", "n_nodes"],
            "properties": {
                "window": _window,
                "n_nodes": {"type": "integer", "minimum": 3},
                "nonlinear": {"enum": ["convective", "synthetic"]},
            },
        },
        "sensors": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind", "location"],
                "properties": {
                    "kind": {"enum": ["point-velocity", "wall-shear", "box-average"]},
                    "location": {"type": "array", "items": {"type": "number"}},
                    "component": {"type": "integer", "minimum": 0, "maximum": 2},
                    "weight": {"type": "number"},
                    "wall_axis": {"type": "integer", "minimum": 0, "maximum": 2},
                    "wall_side": {"enum": ["low", "high"]},
                    "extent": {"type": "array", "items": {"type": "number"}},
                },
            },
        },
        "estimation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["training_window", "window", "methods"],
            "properties": {
                "training_window": _window,
                "window": _window,
                "methods": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["method"],
                        "properties": {
                            "method": {"enum": list(METHODS)},
                            "c_r": _pos_num,
                            "n_nodes": {"type": "integer", "minimum": 2},
                            "window": _pos_int,
                            "stride": _pos_int,
                            "misfit": {"enum": ["auto", "coefficient", "sensor"]},
                            "segment_length": {"type": "integer", "minimum": 2},
                            "max_iter": _pos_int,
                        },
                    },
                },
            },
        },
        "report": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "c_r_values": {"type": "array", "items": _pos_num, "minItems": 1},
                "sweep_variant": {"enum": ["K-LSQ", "K-LSE"]},
                "sweep_n_nodes": {"type": "integer", "minimum": 2},
            },
        },
    },
}

DEFAULTS: dict = {
    "seed": 0,
    "paths": {"output_dir": "flowest-out", "format": "text"},
    "synth": {"n_unresolved": 0, "dynamics": "limit-cycle", "family": "trigonometric",
              "span": [0.0, 10.0], "dt": 0.005, "sample_every": 4, "tail_strength": 0.1},
    "calibration": {"nonlinear": "convective"},
    "report": {"c_r_values": [0.01, 0.1, 1.0, 10.0, 100.0], "sweep_variant": "K-LSE"},
}


def _path(err: jsonschema.ValidationError) -> str:
    parts = [f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path]
    return "".join(parts).lstrip(".") or "<root>"


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_window(cfg: dict, key: str, within: tuple[float, float] | None = None, within_key: str = ""):
    section, name = key.split(".")
    w = cfg.get(section, {}).get(name)
    if w is None:
        return
    if not w[0] < w[1]:
        raise ConfigError(f"{key}: window start {w[0]} must be below its end {w[1]}")
    if within is not None and (w[0] < within[0] or w[1] > within[1]):
        raise ConfigError(f"{key}: window {w} lies outside {within_key} {list(within)}")


def validate(cfg: dict) -> dict:
    """Schema and cross-field checks; returns the config merged with defaults."""
    errors = sorted(jsonschema.Draft202012Validator(SCHEMA).iter_errors(cfg), key=lambda e: [str(p) for p in e.absolute_path])
    if errors:
        e = errors[0]
        raise ConfigError(f"{_path(e)}: {e.message}")
    # section defaults only apply to sections the user wrote (plus the always-present ones)
    base = {k: v for k, v in DEFAULTS.items() if k in cfg or k in ("seed", "paths", "report")}
    cfg = _merge(base, cfg)
    synth = cfg.get("synth")
    span = None
    if synth is not None:
        span = tuple(synth["span"])
        _check_window(cfg, "synth.span")
        ndim = len(synth["grid"]["dims"])
        for corner in ("lower", "upper"):
            v = synth["grid"].get(corner)
            if v is not None and len(v) != ndim:
                raise ConfigError(f"synth.grid.{corner}: {len(v)} entries for a {ndim}-axis grid")
        lo = synth["grid"].get("lower", [0.0] * ndim)
        hi = synth["grid"].get("upper", [1.0] * ndim)
        for ax, (a, b) in enumerate(zip(lo, hi)):
            if not a < b:
                raise ConfigError(f"synth.grid.upper[{ax}]: must exceed lower ({a} >= {b})")
        if synth["dt"] * synth["sample_every"] > span[1] - span[0]:
            raise ConfigError("synth.dt: sampling interval longer than synth.span")
    for key in ("pod.window", "calibration.window", "estimation.training_window", "estimation.window"):
        _check_window(cfg, key, span, "synth.span")
    if "pod" in cfg and "estimation" in cfg:
        n_r = cfg["pod"]["n_retained"]
        for i, m in enumerate(cfg["estimation"]["methods"]):
            if m["method"] in ("K-LSQ", "K-LSE") and "calibration" not in cfg:
                raise ConfigError(f"estimation.methods[{i}].method: {m['method']} needs a calibration section")
            if "stride" in m and "window" not in m:
                raise ConfigError(f"estimation.methods[{i}].stride: needs a window (sample count)")
        if "calibration" in cfg and cfg["calibration"]["n_nodes"] < n_r + 1:
            raise ConfigError(f"calibration.n_nodes: {cfg['calibration']['n_nodes']} nodes cannot "
                              f"determine {n_r + 1} coefficients per mode")
    return cfg


def load(path: str | os.PathLike) -> dict[str, Any]:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return raw
