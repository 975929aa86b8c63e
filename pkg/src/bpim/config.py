"""Run configuration: one YAML file holding model, training and data settings."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import yaml

from .model import FLAGS, ModelConfig
from .train import TrainConfig, train_config_from_dict, train_config_to_dict


class ConfigError(ValueError):
    pass


_JSON_TYPES = {bool: "boolean", int: "integer", float: "number", str: "string"}


def _field_schema(f: dataclasses.Field) -> dict:
    t = f.type if isinstance(f.type, type) else None
    if t is None:
        # postponed annotations arrive as strings
        name = str(f.type)
        t = {"bool": bool, "int": int, "float": float, "str": str}.get(name)
    if t is float:
        return {"type": "number"}
    if t in _JSON_TYPES:
        return {"type": _JSON_TYPES[t]}
    return {}


_EXTRA = {
    "obj_balance": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
    "anchors": {
        "type": "object",
        "additionalProperties": False,
        "patternProperties": {
            "^[2-5]$": {
                "type": "array",
                "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            }
        },
    },
}


def _section(cls) -> dict:
    props = {f.name: _EXTRA.get(f.name) or _field_schema(f) for f in dataclasses.fields(cls)}
    return {"type": "object", "additionalProperties": False, "properties": props}


DATA_KEYS = {
    "root": {"type": ["string", "null"]},
    "val_root": {"type": ["string", "null"]},
    "name": {"type": "string"},
}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": _section(ModelConfig),
        "train": _section(TrainConfig),
        "data": {"type": "object", "additionalProperties": False, "properties": DATA_KEYS},
        "ablation": {
            "type": "array",
            "items": {"type": "array", "items": {"enum": list(FLAGS)}, "uniqueItems": True},
        },
        "seed": {"type": "integer"},
    },
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data_root: str | None = None
    val_root: str | None = None
    dataset_name: str = "synthetic"
    ablation: list[list[str]] = field(default_factory=lambda: [[], ["big", "awf", "pig", "csf_tff"]])
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": train_config_to_dict(self.train),
            "data": {"root": self.data_root, "val_root": self.val_root, "name": self.dataset_name},
            "ablation": [list(r) for r in self.ablation],
            "seed": self.seed,
        }

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed, train=dataclasses.replace(self.train, seed=seed))


def resolve_data_path(path: str | None) -> str | None:
    """Relative dataset paths are looked up under ``$BPIM_CACHE`` when it is set."""
    if path is None:
        return None
    p = Path(path)
    cache = os.environ.get("BPIM_CACHE")
    if not p.is_absolute() and cache and not p.exists():
        return str(Path(cache) / p)
    return str(p)


def config_from_dict(d: Mapping[str, Any] | None) -> RunConfig:
    d = dict(d or {})
    try:
        jsonschema.validate(d, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {e.message}") from None
    seed = int(d.get("seed", 0))
    train_d = dict(d.get("train", {}))
    train_d.setdefault("seed", seed)
    data = d.get("data", {})
    try:
        cfg = RunConfig(
            model=ModelConfig.from_dict(d.get("model", {})),
            train=train_config_from_dict(train_d),
            data_root=data.get("root"),
            val_root=data.get("val_root"),
            dataset_name=data.get("name", "synthetic"),
            seed=seed,
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if "ablation" in d:
        cfg.ablation = [list(r) for r in d["ablation"]]
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        d = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: {e}") from None
    if d is not None and not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(d)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)
