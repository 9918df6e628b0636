"""Flat JSON run configuration with fail-closed validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .synth import SynthConfig, VISIBILITY_TAGS

MODES = ("umm_cma", "umm", "mam_only", "cm_only")
SUBSET_TAGS = ("r", "x", "rx")


@dataclass
class RunConfig:
    seed: int = 0
    # model dimensions
    l: int = 8
    c: int = 16
    cf: int = 8
    # scene grid
    h: int = 24
    w: int = 24
    k: int = 6
    # matching cost weights
    w_cls: float = 1.0
    w_dice: float = 1.0
    w_bce: float = 1.0
    # loss weights
    none_weight: float = 0.1
    lambda_mse: float = 1.0
    lambda_mmd: float = 1.0
    beta_kl: float = 0.01
    # optimizer
    lr: float = 0.02
    steps: int = 200
    # synthesis
    visibility: dict = field(default_factory=lambda: {
        "1": "r", "2": "r", "3": "x", "4": "x", "5": "both", "6": "both"})
    noise_sigma: float = 0.0
    shapes_min: int = 3
    shapes_max: int = 6
    n_train: int = 64
    n_test: int = 32
    # pipeline
    mode: str = "umm_cma"
    subsets: list = field(default_factory=lambda: ["r", "x", "rx"])

    def __post_init__(self):
        for name in ("seed", "l", "c", "cf", "h", "w", "k", "steps",
                     "n_train", "n_test", "shapes_min", "shapes_max"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"field {name!r} must be an integer, got {v!r}")
        for name in ("w_cls", "w_dice", "w_bce", "none_weight", "lambda_mse",
                     "lambda_mmd", "beta_kl", "lr", "noise_sigma"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"field {name!r} must be a number, got {v!r}")
            if v < 0:
                raise ConfigError(f"field {name!r} must be >= 0, got {v!r}")
            setattr(self, name, float(v))
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.subsets, list) or not self.subsets:
            raise ConfigError("subsets must be a nonempty list")
        for tag in self.subsets:
            if tag not in SUBSET_TAGS:
                raise ConfigError(
                    f"subset tag must be one of {SUBSET_TAGS}, got {tag!r}")
        if not isinstance(self.visibility, dict):
            raise ConfigError("visibility must be a class->tag map")
        vis = {}
        for key, tag in self.visibility.items():
            try:
                cls = int(key)
            except (TypeError, ValueError):
                raise ConfigError(f"visibility key {key!r} is not a class id")
            if tag not in VISIBILITY_TAGS:
                raise ConfigError(
                    f"visibility for class {cls} must be one of "
                    f"{VISIBILITY_TAGS}, got {tag!r}")
            vis[cls] = tag
        for cls in range(1, self.k + 1):
            if cls not in vis:
                raise ConfigError(f"visibility missing for class {cls}")
        self.visibility = vis

    def synth_config(self) -> SynthConfig:
        return SynthConfig(h=self.h, w=self.w, k=self.k, cf=self.cf,
                           visibility=dict(self.visibility),
                           noise_sigma=self.noise_sigma,
                           shapes_min=self.shapes_min,
                           shapes_max=self.shapes_max, seed=self.seed)


def config_from_dict(data: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**data)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(data)
