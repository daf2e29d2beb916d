"""Experiment configuration: JSON schema, defaults and dotted-path overrides."""
from __future__ import annotations

import copy
import hashlib
import json
from typing import Any, Iterable, Mapping

import jsonschema

__all__ = ["SCHEMA", "ConfigError", "load_config", "validate", "apply_overrides", "parse_override",
           "config_hash", "DEFAULTS", "resolve"]


class ConfigError(ValueError):
    """Invalid experiment configuration; ``problems`` lists each offending key."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid config:\n  " + "\n  ".join(problems))
        self.problems = problems


_num = {"type": "number"}
_int = {"type": "integer", "minimum": 0}
_posint = {"type": "integer", "minimum": 1}
_opt_num = {"type": ["number", "null"]}
_stages = {"type": ["array", "null"], "items": _posint, "minItems": 1}

SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "noisydarts experiment",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string"},
        "space": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "name": {"enum": ["darts", "nasbench201", "s1", "s2", "s3", "s4", "custom"]},
                "remove": {"type": "array", "items": {"type": "string"}},
                "ops": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "intermediate_nodes": _posint,
                "topology": {"enum": ["darts", "nasbench201"]},
                "edge_ops": {"type": ["array", "object"]},
            },
            "required": ["name"],
        },
        "noise": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "distribution": {"enum": ["gaussian", "uniform"]},
                "mode": {"enum": ["additive", "multiplicative"]},
                "placement": {"enum": ["ofs", "nfa", "es", "droppath", "none"]},
                "mu": _opt_num,
                "sigma": {"type": "number", "minimum": 0},
                "schedule": {"enum": ["fixed", "linear_decay"]},
                "decay_end": {"type": ["integer", "null"], "minimum": 1},
                "drop_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "allow_biased": {"type": "boolean"},
            },
        },
        "optimizer": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "epochs": _int, "batch_size": _posint,
                "w_lr": _num, "w_lr_min": _num, "w_momentum": _num, "w_weight_decay": _num,
                "alpha_lr": _num, "alpha_beta1": _num, "alpha_beta2": _num, "alpha_weight_decay": _num,
                "grad_clip": _opt_num, "channels": _posint, "layers": _posint, "stages": _stages,
                "alpha_jitter": _num, "noise_op_sigma": _num,
            },
        },
        "retrain": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "genotype": {"type": ["string", "null"]},
                "epochs": _int, "batch_size": _posint, "lr": _num, "lr_min": _num,
                "momentum": _num, "weight_decay": _num, "grad_clip": _opt_num,
                "channels": _posint, "layers": _posint, "stages": _stages,
            },
        },
        "data": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "source": {"enum": ["synthetic", "idx", "cifar10"]},
                "split_seed": {"type": ["integer", "null"]},
                "per_class": {"type": ["integer", "null"], "minimum": 1},
                "test_per_class": {"type": ["integer", "null"], "minimum": 1},
                "image_size": {"type": ["integer", "null"], "minimum": 1},
                # synthetic generator
                "num_classes": _posint, "n_samples": _int, "n_test": _int, "channels": _posint,
                "pattern": {"enum": ["blobs", "gratings"]}, "orientations": _posint,
                "blobs": _posint, "jitter": _num, "pixel_noise": _num, "data_seed": {"type": "integer"},
                # files
                "train_images": {"type": "string"}, "train_labels": {"type": "string"},
                "test_images": {"type": "string"}, "test_labels": {"type": "string"},
                "train_files": {"type": ["string", "array"]}, "test_files": {"type": ["string", "array"]},
                "bench_lookup": {"type": ["string", "null"]},
            },
        },
        "diagnostics": {
            "type": "object", "additionalProperties": False,
            "properties": {
                "hessian": {"type": "boolean"},
                "hessian_samples": _posint,
                "hessian_step": _num,
                "smoothing_window": _posint,
                "landscape": {"type": "boolean"},
                "landscape_radius": _int,
                "landscape_step": _num,
                "landscape_second": {"enum": ["gradient", "random"]},
                "landscape_samples": _posint,
                "unbiasedness": {"type": "boolean"},
                "smoothing": {"type": "boolean"},
                "relative_sigma": _num,
                "draws": _posint,
                "verify_samples": _posint,
                "histogram": {"type": "boolean"},
                "histogram_op": {"type": "string"},
                "histogram_bins": _posint,
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": {"type": "array", "minItems": 1},
        },
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "output_dir": {"type": "string"},
    },
    "required": ["space"],
}

DEFAULTS: dict = {
    "name": "experiment",
    "noise": {"placement": "ofs", "sigma": 0.2},
    "optimizer": {},
    "retrain": {"enabled": False},
    "data": {"source": "synthetic", "num_classes": 10, "n_samples": 1000, "n_test": 500, "image_size": 16},
    "diagnostics": {},
    "sweep": {},
    "seeds": [0],
    "output_dir": "runs",
}


def _merge(base: Mapping, extra: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def validate(cfg: Mapping) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(e.absolute_path))
    if errors:
        problems = []
        for e in errors:
            path = ".".join(str(p) for p in e.absolute_path) or "<root>"
            problems.append(f"{path}: {e.message}")
        raise ConfigError(problems)


def parse_override(text: str) -> tuple[str, Any]:
    """``a.b=value``; the value is read as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError([f"override {text!r}: expected key=value"])
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ConfigError([f"override {text!r}: empty key"])
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def set_path(cfg: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        nxt = node.get(p)
        if nxt is None:
            nxt = node[p] = {}
        if not isinstance(nxt, dict):
            raise ConfigError([f"override {key!r}: {p!r} is not an object"])
        node = nxt
    node[parts[-1]] = value


def apply_overrides(cfg: Mapping, overrides: Iterable[str | tuple[str, Any]]) -> dict:
    out = copy.deepcopy(dict(cfg))
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_path(out, key, value)
    return out


def resolve(cfg: Mapping) -> dict:
    """Validate, then fill defaults for omitted blocks."""
    validate(cfg)
    out = _merge(DEFAULTS, cfg)
    if "noise" in cfg:
        out["noise"] = dict(cfg["noise"])
    validate(out)
    return out


def load_config(path: str, overrides: Iterable[str] = ()) -> dict:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config ({exc.strerror})"]) from exc
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: top level must be an object"])
    return resolve(apply_overrides(raw, overrides))


def config_hash(cfg: Mapping) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
