"""Run configuration: one JSON document with dotted-path command-line overrides."""

from __future__ import annotations

import copy
import dataclasses
import json

from .errors import ConfigurationError, InvalidArgument
from .model import ModelConfig, preset
from .optics.design import DesignOptions
from .optics.lens import MetalensSpec, spec_preset
from .regularization import RegularizerWeights
from .training import TrainConfig


def _fields(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name == "regs":
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f.name] = f.default_factory()
    return out


def defaults() -> dict:
    """The complete default configuration tree."""
    train = _fields(TrainConfig)
    train["regs"] = dataclasses.asdict(RegularizerWeights())
    design = _fields(DesignOptions)
    design.update({"energy_weight": 0.005, "channels": None})
    return {
        "seed": 0,
        "threads": None,
        "model": {"preset": "cifar10", "variant": "LKSV"},
        "train": train,
        "data": {"path": None, "grayscale": "green", "train_limit": 5000, "test_limit": 1000, "synthetic": False},
        "optics": {"preset": "desk", "overrides": {}},
        "design": design,
        "simulate": {"noise_std": 0.0, "features": None},
    }


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Recursive merge; unknown keys are rejected so typos do not pass silently."""
    out = copy.deepcopy(base)
    for key, val in update.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigurationError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(val, dict) and key != "overrides":
            out[key] = merge(out[key], val, where + ".")
        else:
            out[key] = val
    return out


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=c`` -> (["a", "b"], value); the value is JSON when it parses, else a string."""
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not of the form key.path=value")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip().split("."), val


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for text in overrides:
        keys, val = parse_override(text)
        node = cfg
        for i, k in enumerate(keys[:-1]):
            if k not in node or not isinstance(node[k], dict):
                raise ConfigurationError(f"unknown config key {'.'.join(keys[: i + 1])!r}")
            node = node[k]
        if keys[-1] not in node and not (len(keys) >= 2 and keys[-2] == "overrides"):
            raise ConfigurationError(f"unknown config key {'.'.join(keys)!r}")
        node[keys[-1]] = val
    return cfg


def load(path: str | None = None, overrides: list[str] | None = None) -> dict:
    cfg = defaults()
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigurationError(f"config {path} must hold a JSON object")
        cfg = merge(cfg, user)
    return apply_overrides(cfg, overrides or [])


def _build(cls, values: dict, label: str):
    try:
        return cls(**values)
    except (TypeError, InvalidArgument) as exc:
        raise ConfigurationError(f"invalid {label} settings: {exc}") from exc


def model_config(cfg: dict) -> ModelConfig:
    try:
        return preset(cfg["model"]["preset"], cfg["model"]["variant"])
    except InvalidArgument as exc:
        raise ConfigurationError(str(exc)) from exc


def train_config(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    t["regs"] = _build(RegularizerWeights, t["regs"], "regularizer")
    t["seed"] = cfg["seed"]
    return _build(TrainConfig, t, "train")


def optics_spec(cfg: dict) -> MetalensSpec:
    try:
        spec = spec_preset(cfg["optics"]["preset"])
    except InvalidArgument as exc:
        raise ConfigurationError(str(exc)) from exc
    extra = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["optics"]["overrides"].items()}
    if extra:
        try:
            spec = dataclasses.replace(spec, **extra)
        except (TypeError, InvalidArgument) as exc:
            raise ConfigurationError(f"invalid optics override: {exc}") from exc
    return spec


def design_options(cfg: dict) -> DesignOptions:
    d = {k: v for k, v in cfg["design"].items() if k != "channels"}
    d["seed"] = cfg["seed"]
    return _build(DesignOptions, d, "design")


def dump(cfg: dict, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
