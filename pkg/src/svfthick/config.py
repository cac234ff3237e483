"""Declarative pipeline configuration (JSON) with dotted command-line overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .loss import LossConfig
from .optim import IterativeConfig
from .phantom import PhantomSpec
from .regressor import TrainConfig, UnetSpec
from .svf import IntegrationConfig


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "thresholds": {"wm": 0.5, "gm": 0.5},
    "loss": {"similarity": "mse", "lambda": 0.02, "steps": 7, "allow_any_lambda": False},
    "iterative": {"max_iters": 300, "lr": 0.05, "tol": 1e-4, "window": 10,
                  "smoothing_sigma": 1.0, "image_sigma": 1.5},
    "train": {"patch_size": [32, 32, 32], "batch_size": 2, "lr": 1e-3, "weight_decay": 1e-5,
              "epochs": 10, "checkpoint_every": 1, "pooling_steps": 2, "base_features": 8,
              "slope": 0.2, "init_gain": 0.1, "image_sigma": 1.5, "val_subjects": 2, "select": True},
    "phantom": {"kind": "slab", "dims": [32, 8, 8], "spacing_mm": [1.0, 1.0, 1.0], "wm_extent": 12.0,
                "gm_thickness_mm": 3.0, "perturbation": None, "subjects": 20,
                "levels": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]},
}


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be a table")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def _parse_override(item: str) -> dict:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key.path=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    tree: dict = {}
    node = tree
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return tree


@dataclass
class PipelineConfig:
    raw: dict

    @classmethod
    def load(cls, path=None, overrides=()) -> "PipelineConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if path is not None:
            try:
                data = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file {path} not found") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
            if not isinstance(data, dict):
                raise ConfigError("config file must hold a JSON object")
            cfg = _merge(cfg, data)
        for item in overrides:
            cfg = _merge(cfg, _parse_override(item))
        out = cls(cfg)
        try:
            out.loss_config()
            out.iterative_config()
            out.train_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid configuration: {exc}") from None
        return out

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def threads(self) -> int:
        return max(1, int(self.raw["threads"]))

    @property
    def thresholds(self) -> tuple[float, float]:
        t = self.raw["thresholds"]
        return float(t["wm"]), float(t["gm"])

    def loss_config(self) -> LossConfig:
        c = self.raw["loss"]
        return LossConfig(c["similarity"], float(c["lambda"]), IntegrationConfig(int(c["steps"])),
                          bool(c["allow_any_lambda"]))

    def iterative_config(self) -> IterativeConfig:
        c = self.raw["iterative"]
        return IterativeConfig(int(c["max_iters"]), float(c["lr"]), self.loss_config(), float(c["tol"]),
                               int(c["window"]), float(c["smoothing_sigma"]), float(c["image_sigma"]))

    def train_config(self) -> TrainConfig:
        c = self.raw["train"]
        unet = UnetSpec(int(c["pooling_steps"]), int(c["base_features"]),
                        slope=float(c["slope"]), init_gain=float(c["init_gain"]))
        return TrainConfig(unet, tuple(c["patch_size"]) if isinstance(c["patch_size"], list) else c["patch_size"],
                           int(c["batch_size"]), float(c["lr"]), float(c["weight_decay"]), self.loss_config(),
                           int(c["epochs"]), int(c["checkpoint_every"]), self.seed, float(c["image_sigma"]))

    def phantom_spec(self) -> PhantomSpec:
        c = self.raw["phantom"]
        return PhantomSpec(c["kind"], tuple(c["dims"]), tuple(c["spacing_mm"]), float(c["wm_extent"]),
                           float(c["gm_thickness_mm"]),
                           perturbation=tuple(c["perturbation"]) if c["perturbation"] else None)
