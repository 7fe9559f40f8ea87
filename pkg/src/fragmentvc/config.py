"""JSON run configuration.

A run configuration has up to four sections, each optional::

    {"model": {...}, "train": {...}, "audio": {...}, "paths": {...}}

Omitted fields take their defaults: ``ModelConfig()`` (desk scale),
``TrainConfig.desk()``, ``AudioConfig()`` and empty paths. Unknown sections or
keys and values of the wrong type are rejected before any work starts.

Defaults worth knowing (all overridable):

- model: ``d_model`` 64, ``n_heads`` 2, 3 extractors, 3 smoothers (assumed
  count), feed-forward kernel 9 with 2x expansion (assumed ratio).
- train: 2000 steps, stage 1 until step 1000, source-inclusion decay until
  step 1600, batch 2, peak learning rate 1e-3 with 100 warmup steps.
- audio: 16 kHz, 400-sample window, 320-sample hop, 80 mel bins over
  0-8000 Hz with natural-log compression (conventions, not fixed values).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .audio import AudioConfig
from .model import ModelConfig
from .training import TrainConfig

PATH_KEYS = ("wav_dir", "out_dir", "manifest", "out")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    audio: AudioConfig = field(default_factory=AudioConfig)
    paths: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        try:
            self.model.validate()
            self.train.validate()
            self.audio.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.model.upstream_dim != self.audio.upstream_dim:
            raise ConfigError(f"model.upstream_dim={self.model.upstream_dim} "
                              f"!= audio.upstream_dim={self.audio.upstream_dim}")
        if self.model.n_mel != self.audio.n_mels:
            raise ConfigError(f"model.n_mel={self.model.n_mel} != audio.n_mels={self.audio.n_mels}")

    def to_dict(self) -> dict[str, Any]:
        return {"model": dataclasses.asdict(self.model), "train": dataclasses.asdict(self.train),
                "audio": dataclasses.asdict(self.audio), "paths": dict(self.paths)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_type(section: str, key: str, value, expected) -> None:
    if expected is bool:
        ok = isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    if not ok:
        raise ConfigError(f"{section}.{key}: expected {expected.__name__}, got {value!r}")


def _build(cls, section: str, values, base):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be an object")
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    py_types = {"int": int, "float": float, "bool": bool, "str": str}
    for key, value in values.items():
        _check_type(section, key, value, py_types[types[key]])
    coerced = {k: float(v) if types[k] == "float" else v for k, v in values.items()}
    return dataclasses.replace(base, **coerced)


def from_dict(doc: dict[str, Any]) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(doc) - {"model", "train", "audio", "paths"})
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    paths = doc.get("paths", {})
    if not isinstance(paths, dict):
        raise ConfigError("section 'paths' must be an object")
    bad = sorted(set(paths) - set(PATH_KEYS))
    if bad:
        raise ConfigError(f"unknown key(s) in 'paths': {', '.join(bad)}")
    for key, value in paths.items():
        _check_type("paths", key, value, str)
    cfg = RunConfig(
        model=_build(ModelConfig, "model", doc.get("model", {}), ModelConfig()),
        train=_build(TrainConfig, "train", doc.get("train", {}), TrainConfig.desk()),
        audio=_build(AudioConfig, "audio", doc.get("audio", {}), AudioConfig()),
        paths=dict(paths),
    )
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(doc)
