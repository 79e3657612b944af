"""Run configuration: one YAML/JSON file plus ``--set key=value`` overrides."""

from __future__ import annotations

import copy
from dataclasses import asdict, fields
from pathlib import Path
from typing import Any

import yaml

from .datagen import KINDS, ScenarioSpec
from .model import ModelConfig
from .train import LossWeights, TrainConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


def _dataclass_defaults(cls, exclude=()) -> dict:
    return {f.name: f.default for f in fields(cls) if f.name not in exclude}


SCENARIO_KEYS = _dataclass_defaults(ScenarioSpec, exclude=("kind", "seed"))
MODEL_KEYS = _dataclass_defaults(ModelConfig, exclude=("seed",))
TRAIN_KEYS = _dataclass_defaults(TrainConfig, exclude=("seed", "loss_weights"))
LOSS_KEYS = asdict(LossWeights())


def default_config() -> dict:
    scenario = {k: (list(map(list, v)) if k == "bev_extent" else v) for k, v in SCENARIO_KEYS.items()}
    return {
        "seed": 0,
        "out": "runs/default",
        "data": {
            "dir": None,
            "kinds": ["straight", "t_junction", "crossroad"],
            "splits": {"train": 500, "val": 100, "test": 100},
            "scenario": scenario,
        },
        "model": dict(MODEL_KEYS),
        "train": dict(TRAIN_KEYS) | {"loss_weights": dict(LOSS_KEYS), "resume": None, "val_scenes": 30},
        "eval": {
            "split": "test",
            "checkpoint": None,
            "edge_threshold": 0.5,
            "node_threshold": 0.3,
            "ground_truth": False,
        },
        "infer": {"split": "test", "index": 0, "checkpoint": None, "input": None, "edge_threshold": 0.5, "node_threshold": 0.3},
        "plot": {"input": None, "index": 0, "compare": False},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        # free-form mappings (split sizes) and leaf values replace wholesale
        if isinstance(base[k], dict) and k != "splits":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} expects a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(text: str) -> dict:
    """``"model.d=32"`` -> ``{"model": {"d": 32}}`` with the value parsed as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    try:
        value = yaml.safe_load(raw) if raw else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value in {text!r}: {exc}") from None
    node: Any = value
    for part in reversed(key.split(".")):
        node = {part: node}
    return node


def load_config(path: str | Path | None = None, overrides=(), seed: int | None = None, out: str | None = None) -> dict:
    """Resolve defaults, then the file, then ``--set`` overrides, then ``--seed``/``--out``."""
    cfg = default_config()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        try:
            loaded = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = _merge(cfg, loaded)
    for item in overrides:
        cfg = _merge(cfg, parse_override(item))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer")
    for kind in cfg["data"]["kinds"]:
        if kind not in KINDS:
            raise ConfigError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
    splits = cfg["data"]["splits"]
    if not isinstance(splits, dict) or not splits:
        raise ConfigError("data.splits must map split names to scene counts")
    for name, n in splits.items():
        if not isinstance(n, int) or n < 0:
            raise ConfigError(f"data.splits.{name} must be a non-negative integer")
    # build the typed configs once so bad values fail before any work starts
    try:
        scenario_spec(cfg, "straight", 0)
        model_config(cfg)
        train_config(cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    for section in ("eval", "infer"):
        for k in ("edge_threshold", "node_threshold"):
            v = cfg[section][k]
            if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                raise ConfigError(f"{section}.{k} must lie in [0, 1]")


def scenario_spec(cfg: dict, kind: str, seed: int) -> ScenarioSpec:
    fields_ = dict(cfg["data"]["scenario"])
    fields_["bev_extent"] = tuple(tuple(float(x) for x in r) for r in fields_["bev_extent"])
    return ScenarioSpec(kind=kind, seed=seed, **fields_)


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(seed=cfg["seed"], **cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    t = {k: v for k, v in cfg["train"].items() if k not in ("resume", "val_scenes")}
    t["loss_weights"] = LossWeights(**t["loss_weights"])
    return TrainConfig(seed=cfg["seed"], **t)


def data_dir(cfg: dict) -> Path:
    return Path(cfg["data"]["dir"]) if cfg["data"]["dir"] else Path(cfg["out"]) / "data"


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)

