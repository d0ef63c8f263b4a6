"""Run configuration: JSON file + schema validation + dotted ``--set`` overrides.

Every value the pipeline uses has a key here, so a resolved configuration
(written into each run's ``manifest.json``) reproduces the run on its own.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

import jsonschema

from .inr.training import TrainConfig
from .phantom import DEFAULT_COEFFICIENTS, DEFAULT_INTERCEPT, PhantomSpec
from .preprocess import ABLATIONS, CANONICAL_FEATURES, DEFAULT_RULES, FeatureSelection, NormalizationRule
from .projection import ProjectorSpec


class ConfigError(ValueError):
    pass


_PROJECTOR = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": ["ridge", "pinv"]},
        "epsilon": {"type": "number", "exclusiveMinimum": 0},
        "rcond": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
    },
}
_TRIPLE_POS_INT = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3}
_TRIPLE_POS = {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 3, "maxItems": 3}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": ["string", "null"]},
                "target": {"type": "string"},
                "mask": {"type": ["string", "null"]},
                "ct": {"type": ["string", "null"]},
            },
        },
        "phantom": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dims": _TRIPLE_POS_INT,
                "spacing_mm": _TRIPLE_POS,
                "seed": {"type": "integer", "minimum": 0},
                "n_blobs": {"type": "integer", "minimum": 1},
                "prostate_radius_vox": {"type": "number", "exclusiveMinimum": 0},
                "tumour_radius_vox": {"type": "number", "exclusiveMinimum": 0},
                "envelope": {"enum": ["softplus_affine", "linear"]},
                "coefficients": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {f: {"type": "number"} for f in CANONICAL_FEATURES},
                },
                "intercept": {"type": "number"},
                "ortho_amplitude": {"type": "number", "minimum": 0},
                "noise_sd": {"type": "number", "minimum": 0},
            },
        },
        "normalization": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["minmax01", "divide_by", "zscore_scaled", "none"]},
                    "value": {"type": ["number", "null"]},
                },
            },
        },
        "features": {
            "oneOf": [
                {"enum": sorted(ABLATIONS)},
                {"type": "array", "items": {"enum": list(CANONICAL_FEATURES)}, "minItems": 1, "uniqueItems": True},
            ]
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lam": {"type": "number", "minimum": 0},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "factor": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "patience": {"type": "integer", "minimum": 0},
                "rel_threshold": {"type": "number", "minimum": 0},
                "min_lr": {"type": "number", "minimum": 0},
                "projection_scope": {"enum": ["batch", "global"]},
                "n_fourier": {"type": "integer", "minimum": 1},
                "sigma_b": {"type": "number", "exclusiveMinimum": 0},
                "hidden": {"type": "integer", "minimum": 1},
                "n_hidden": {"type": "integer", "minimum": 0},
                "omega0": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "projector": _PROJECTOR,
        "eval_projector": _PROJECTOR,
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "ablations": {"type": "array", "items": {"enum": sorted(ABLATIONS)}, "minItems": 1, "uniqueItems": True},
        "output_dir": {"type": "string"},
        "tofts": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dce": {"type": ["string", "null"]},
                "aif_delay": {"type": "number", "minimum": 0},
                "aif_amplitude": {"type": "number", "exclusiveMinimum": 0},
                "aif_decay1": {"type": "number", "exclusiveMinimum": 0},
                "aif_decay2": {"type": "number", "exclusiveMinimum": 0},
                "init": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
            },
        },
        "ttp": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dce": {"type": ["string", "null"]},
                "norm_const": {"type": "number", "exclusiveMinimum": 0},
                "percentile": {"type": "number", "minimum": 0, "maximum": 1},
            },
        },
    },
}


def default_config() -> dict:
    train = TrainConfig().to_dict()
    projector = train.pop("projector")
    train.pop("seed")
    return {
        "dataset": {"dir": None, "target": "SUV", "mask": "regions", "ct": "CT"},
        "phantom": {
            "dims": [42, 42, 36],
            "spacing_mm": [2.0, 2.0, 2.0],
            "seed": 0,
            "n_blobs": 6,
            "prostate_radius_vox": 8.0,
            "tumour_radius_vox": 4.0,
            "envelope": "softplus_affine",
            "coefficients": dict(DEFAULT_COEFFICIENTS),
            "intercept": DEFAULT_INTERCEPT,
            "ortho_amplitude": 0.0,
            "noise_sd": 0.0,
        },
        "normalization": {k: {"kind": r.kind, "value": r.value} for k, r in DEFAULT_RULES.items()},
        "features": "full",
        "train": train,
        "projector": projector,
        "eval_projector": dict(projector),
        "seeds": [0],
        "ablations": list(ABLATIONS),
        "output_dir": "orthosep_out",
        "tofts": {"dce": None, "aif_delay": 10.0, "aif_amplitude": 5.0, "aif_decay1": 0.1,
                  "aif_decay2": 0.005, "init": [0.005, 0.3, 0.05]},
        "ttp": {"dce": None, "norm_const": 240.0, "percentile": 0.2},
    }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("coefficients",):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, text = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = _parse_value(text)


def _error_path(err: jsonschema.ValidationError) -> str:
    return ".".join(str(p) for p in err.absolute_path) or "<root>"


def validate(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as err:
        raise ConfigError(f"invalid config at {_error_path(err)}: {err.message}") from None


def resolve(path=None, overrides=(), seed: int | None = None, output_dir=None) -> dict:
    """Load (or default), merge over defaults, apply overrides, validate.

    A run ``manifest.json`` is accepted too: its ``resolved_config`` is used.
    """
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: not valid JSON ({err})") from None
        if "resolved_config" in user:
            user = user["resolved_config"]
        if not isinstance(user, dict):
            raise ConfigError("config root must be an object")
        validate(user)
    cfg = _merge(default_config(), user)
    for a in overrides:
        apply_override(cfg, a)
    if seed is not None:
        cfg["seeds"] = [int(seed)]
        cfg["phantom"]["seed"] = int(seed)
    if output_dir is not None:
        cfg["output_dir"] = str(output_dir)
    validate(cfg)
    # cross-field checks the schema cannot express
    try:
        phantom_spec(cfg)
        rules(cfg)
        train_config(cfg)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return cfg


def phantom_spec(cfg: dict) -> PhantomSpec:
    p = dict(cfg["phantom"])
    p["dims"] = tuple(p["dims"])
    p["spacing_mm"] = tuple(p["spacing_mm"])
    return PhantomSpec(**p)


def rules(cfg: dict) -> dict[str, NormalizationRule]:
    return {k: NormalizationRule(v["kind"], v.get("value")) for k, v in cfg["normalization"].items()}


def selection(cfg: dict, name: str | None = None) -> FeatureSelection:
    feats = cfg["features"] if name is None else name
    if isinstance(feats, str):
        if feats not in ABLATIONS:
            raise ConfigError(f"unknown feature selection {feats!r}")
        return ABLATIONS[feats]
    return FeatureSelection("custom", tuple(feats))


def train_config(cfg: dict, seed: int | None = None) -> TrainConfig:
    t = dict(cfg["train"])
    t["projector"] = ProjectorSpec(**cfg["projector"])
    t["seed"] = cfg["seeds"][0] if seed is None else seed
    return TrainConfig(**t)


def eval_projector(cfg: dict) -> ProjectorSpec:
    return ProjectorSpec(**cfg["eval_projector"])
