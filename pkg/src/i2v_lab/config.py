"""Flat, namespaced run configuration with typed defaults."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

# key -> (default, description)
DEFAULTS: dict[str, tuple[object, str]] = {
    "model.resolution": (32, "frame height and width in pixels"),
    "model.channels": ([32, 64], "U-Net stage widths"),
    "model.d": (64, "attention token width"),
    "model.d_cond": (32, "condition token width"),
    "model.max_frames": (16, "temporal positional table length"),
    "model.groups": (4, "group-norm groups"),
    "model.image_tokens": (4, "content-encoder tokens"),
    "model.seed": (0, "weight initialization seed"),
    "schedule.T": (1000, "number of diffusion steps"),
    "data.clips": (64, "training clips"),
    "data.frames": (8, "frames per clip"),
    "data.seed": (0, "training set seed"),
    "data.heldout_clips": (20, "held-out clips"),
    "data.heldout_seed": (1, "held-out set seed"),
    "base.steps": (2000, "base-stage optimizer steps"),
    "base.lr": (5e-4, "base-stage learning rate"),
    "base.weight_decay": (0.0, "base-stage decoupled weight decay"),
    "base.batch_size": (1, "clips per base step"),
    "base.cond_dropout": (0.1, "probability of replacing the condition by the null prompt"),
    "base.content_dropout": (0.5, "probability of omitting image tokens in a base step"),
    "base.seed": (100, "base-stage batch/noise seed"),
    "i2v.steps": (1000, "adapter-stage optimizer steps"),
    "i2v.lr": (1e-4, "adapter learning rate"),
    "i2v.weight_decay": (1e-2, "adapter decoupled weight decay"),
    "i2v.beta1": (0.9, "AdamW beta1"),
    "i2v.beta2": (0.999, "AdamW beta2"),
    "i2v.eps": (1e-8, "AdamW epsilon"),
    "i2v.batch_size": (1, "clips per adapter step"),
    "i2v.cond_dropout": (0.1, "probability of replacing the condition by the null prompt"),
    "i2v.seed": (200, "adapter-stage batch/noise seed"),
    "sampler.steps": (50, "denoising steps for a full-length run"),
    "sampler.mode": ("deterministic", "deterministic or ancestral"),
    "sampler.guidance": (1.0, "classifier-free guidance weight w"),
    "sampler.clip_x0": (True, "clamp each predicted clean frame to [-1, 1]"),
    "prior.enabled": (True, "start from the frame similarity prior"),
    "prior.t0": (1.0, "start time as a fraction of T"),
    "prior.p": (0.6, "keep probability of original pixels"),
    "prior.blur_sigma": (1.5, "Gaussian blur sigma in pixels"),
    "prior.mask_seed": (0, "degradation mask seed"),
    "sample.seed": (0, "initial-noise seed"),
    "sample.model": ("i2v", "checkpoint to sample from: i2v or base"),
    "sample.reference": ("", "reference frame (PPM); empty uses held-out clip sample.clip"),
    "sample.clip": (0, "held-out clip index used when no reference is given"),
    "sample.caption": ("", "space-separated caption words; empty uses the clip caption"),
    "sample.frames": (8, "frames to generate"),
    "paths.run": ("run", "base directory for relative paths"),
    "paths.data": ("data.bin", "dataset cache"),
    "paths.base": ("base.ckpt", "base checkpoint"),
    "paths.i2v": ("i2v.ckpt", "adapter checkpoint"),
    "paths.samples": ("samples", "frame output directory"),
    "paths.metrics": ("metrics.json", "metric report"),
}


def _coerce(key: str, value):
    default = DEFAULTS[key][0]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"{key}: expected true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{key}: expected an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{key}: expected a number, got {value!r}")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"{key}: expected a string, got {value!r}")
    elif isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigurationError(f"{key}: expected a list of integers, got {value!r}")
    return value


@dataclass
class RunConfig:
    values: dict = field(default_factory=lambda: {k: v[0] for k, v in DEFAULTS.items()})

    def __getitem__(self, key):
        return self.values[key]

    def update(self, pairs: dict) -> "RunConfig":
        for key, value in pairs.items():
            if key not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {key!r}")
            self.values[key] = _coerce(key, value)
        self.validate()
        return self

    def validate(self):
        v = self.values
        if v["sampler.mode"] not in ("deterministic", "ancestral"):
            raise ConfigurationError(f"sampler.mode: expected deterministic or ancestral, got {v['sampler.mode']!r}")
        if v["sample.model"] not in ("i2v", "base"):
            raise ConfigurationError(f"sample.model: expected i2v or base, got {v['sample.model']!r}")
        for key in ("schedule.T", "data.clips", "data.heldout_clips", "sampler.steps", "base.batch_size", "i2v.batch_size"):
            if v[key] < 1:
                raise ConfigurationError(f"{key}: must be >= 1, got {v[key]}")
        for key in ("data.frames", "sample.frames"):
            if not 2 <= v[key] <= v["model.max_frames"]:
                raise ConfigurationError(f"{key}: must lie in [2, model.max_frames], got {v[key]}")
        for key in ("base.steps", "i2v.steps"):
            if v[key] < 0:
                raise ConfigurationError(f"{key}: must be >= 0, got {v[key]}")
        for key in ("base.cond_dropout", "base.content_dropout", "i2v.cond_dropout", "prior.p"):
            if not 0.0 <= v[key] <= 1.0:
                raise ConfigurationError(f"{key}: must lie in [0, 1], got {v[key]}")
        if not 0.0 < v["prior.t0"] <= 1.0:
            raise ConfigurationError(f"prior.t0: must lie in (0, 1], got {v['prior.t0']}")
        if not v["prior.blur_sigma"] > 0:
            raise ConfigurationError(f"prior.blur_sigma: must be positive, got {v['prior.blur_sigma']}")
        if not v["sampler.guidance"] >= 0:
            raise ConfigurationError(f"sampler.guidance: must be >= 0, got {v['sampler.guidance']}")

    def path(self, key: str) -> Path:
        p = Path(self.values[f"paths.{key}"])
        return p if p.is_absolute() else Path(self.values["paths.run"]) / p

    def to_dict(self) -> dict:
        return dict(self.values)


def parse_override(text: str) -> tuple[str, object]:
    """``key=value`` where value is JSON if it parses, else a bare string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigurationError(f"config {path} must be a JSON object")
        cfg.update(doc)
    cfg.update(dict(parse_override(o) for o in overrides))
    return cfg
