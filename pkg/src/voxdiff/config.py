"""Run configuration: a JSON document with one object per pipeline stage.

Every field is optional. Missing fields take the defaults below, unknown keys are
rejected, and ``section.key=value`` overrides are applied after the file is loaded.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import jsonschema

from .diffusion import ChannelSchedules, GuidanceConfig, NoiseSchedule
from .fit import INIT_DENSITY_RAW, WHITE_RAW, FitConfig
from .nn import UNetConfig
from .scenegen import DatasetConfig
from .train import TrainConfig
from .voxgrid import ActivationParams

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "dataset": {
        "n_scenes": 64,
        "n_views": 64,
        "resolution": 16,
        "image_size": 64,
        "radius": 4.0,
        "n_samples": None,
    },
    "render": {"alpha": 1.0, "beta": 0.0, "d_min": -10.0},
    "fit": {
        "iterations": 2000,
        "rays_per_step": 4096,
        "lr": 0.05,
        "lambda_d": 1e-4,
        "lambda_c": 1e-4,
        "huber_delta": 1.0,
        "c_raw": WHITE_RAW,
        "init_density": INIT_DENSITY_RAW,
        "heldout_views": 4,
        "regularize": True,
    },
    "unet": {
        "variant": "single",
        "width": 16,
        "levels": 2,
        "res_blocks": 2,
        "channel_mult": [1, 2, 2, 2],
        "attention_resolutions": [],
        "temb_dim": None,
        "zero_init_head": True,
        "dtype": "float32",
    },
    "schedule": {"T": 1000, "density": "cosine", "color": "cosine", "s": 0.008},
    "train": {
        "lr": 1e-4,
        "batch_size": 8,
        "iterations": 2000,
        "clip_norm": 500.0,
        "warmup": 100,
        "weighting": "simple",
        "visibility": False,
        "tau": -8.0,
        "snr_cap": 1e4,
        "ckpt_every": 0,
        "source": "fitted",
    },
    "guidance": {
        "K": 5,
        "step_size": 0.01,
        "lam_noisy": 1.0,
        "lam_denoised": 1.0,
        "mode": "both",
        "full_backprop": False,
        "deterministic": False,
    },
    "io": {"dataset": None, "spiral_views": 0},
}

_ENUMS = {
    ("unet", "variant"): ["single", "double"],
    ("unet", "dtype"): ["float32", "float64"],
    ("schedule", "density"): ["cosine", "linear"],
    ("schedule", "color"): ["cosine", "linear"],
    ("train", "weighting"): ["simple", "snr"],
    ("train", "source"): ["fitted", "ground_truth"],
    ("guidance", "mode"): ["noisy", "denoised", "both"],
}
_NULLABLE = {("dataset", "n_samples"): "integer", ("unet", "temb_dim"): "integer", ("io", "dataset"): "string"}


class ConfigError(ValueError):
    pass


def _field_schema(section: str, key: str, value: Any) -> dict:
    if (section, key) in _NULLABLE:
        return {"type": [_NULLABLE[(section, key)], "null"]}
    if (section, key) in _ENUMS:
        return {"enum": _ENUMS[(section, key)]}
    if isinstance(value, bool):
        return {"type": "boolean"}
    if isinstance(value, int):
        return {"type": "integer"}
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, list):
        return {"type": "array", "items": {"type": "integer"}}
    return {"type": "string"}


def config_schema() -> dict:
    """JSON Schema (draft 2020-12) for run configuration files."""
    sections = {}
    for section, fields in DEFAULTS.items():
        sections[section] = {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _field_schema(section, k, v) for k, v in fields.items()},
        }
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "voxdiff run configuration",
        "type": "object",
        "additionalProperties": False,
        "properties": sections,
    }


def _validate(doc: dict) -> None:
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        lines = []
        for e in errors:
            prefix = [str(p) for p in e.absolute_path]
            if e.validator == "additionalProperties":
                allowed = set(e.schema.get("properties", {}))
                for key in sorted(set(e.instance) - allowed):
                    lines.append(f"{'.'.join(prefix + [key])}: unknown key")
                continue
            lines.append(f"{'.'.join(prefix) or '<root>'}: {e.message}")
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(lines))


def parse_override(text: str):
    """``section.key=value`` with ``value`` parsed as JSON, falling back to a bare string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    path, raw = text.split("=", 1)
    parts = path.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(f"override key {path!r} must look like section.key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return parts[0], parts[1], value


@dataclass
class RunConfig:
    data: Dict[str, Dict[str, Any]]

    def section(self, name: str) -> Dict[str, Any]:
        return self.data[name]

    def to_json(self) -> dict:
        return copy.deepcopy(self.data)

    def activation(self) -> ActivationParams:
        return ActivationParams(**self.data["render"])

    def dataset_config(self, seed: int) -> DatasetConfig:
        return DatasetConfig(seed=seed, activation=self.activation(), **self.data["dataset"])

    def fit_config(self, seed: int) -> FitConfig:
        f = {k: v for k, v in self.data["fit"].items() if k not in ("heldout_views", "regularize")}
        return FitConfig(seed=seed, n_samples=self.data["dataset"]["n_samples"], **f)

    def unet_config(self, resolution: Optional[int] = None) -> UNetConfig:
        res = self.data["dataset"]["resolution"] if resolution is None else resolution
        return UNetConfig(resolution=res, **self.data["unet"])

    def schedules(self) -> ChannelSchedules:
        s = self.data["schedule"]
        return ChannelSchedules(NoiseSchedule(s["T"], s["density"], s["s"]), NoiseSchedule(s["T"], s["color"], s["s"]))

    def train_config(self, seed: int) -> TrainConfig:
        t = {k: v for k, v in self.data["train"].items() if k != "source"}
        return TrainConfig(seed=seed, **t)

    def guidance_config(self) -> GuidanceConfig:
        g = {k: v for k, v in self.data["guidance"].items() if k != "deterministic"}
        return GuidanceConfig(**g)


def resolve_config(doc: Optional[dict] = None, overrides: Iterable[str] = ()) -> RunConfig:
    doc = copy.deepcopy(doc or {})
    if not isinstance(doc, dict):
        raise ConfigError("<root>: configuration must be a JSON object")
    for text in overrides:
        section, key, value = parse_override(text)
        target = doc.setdefault(section, {})
        if not isinstance(target, dict):
            raise ConfigError(f"{section}: expected an object")
        target[key] = value
    _validate(doc)
    merged = copy.deepcopy(DEFAULTS)
    for section, fields in doc.items():
        merged[section].update(fields)
    cfg = RunConfig(merged)
    try:
        # construct every stage config once so cross-field constraints fail before any work starts
        cfg.activation()
        cfg.dataset_config(0).quadrature()
        cfg.fit_config(0)
        cfg.unet_config()
        cfg.schedules()
        cfg.train_config(0)
        cfg.guidance_config()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return cfg


def load_config(path=None, overrides: Iterable[str] = ()) -> RunConfig:
    """Read, override, validate, and default a configuration file (``None`` means all defaults)."""
    doc = {}
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"{path}: no such file") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return resolve_config(doc, overrides)
