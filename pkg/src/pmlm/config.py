"""Run configuration: one JSON document, five key groups.

Groups: model.*, train.*, masking.*, finetune.*, paths.*. Every key is
optional (defaults apply) but unknown keys are rejected loudly, at any
nesting level. Serialization is canonical (sorted keys), so a config
survives parse -> serialize -> parse unchanged and its hash is stable.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .finetune import FinetuneConfig
from .masking import MaskingConfig, MaskSplit
from .model import ModelConfig
from .training import PhaseConfig, TrainConfig

__all__ = [
    "ConfigError",
    "Paths",
    "RunConfig",
    "config_hash",
    "default_run_config",
    "load_run_config",
    "parse_run_config",
    "serialize_run_config",
]


class ConfigError(ValueError):
    """A config document is malformed; the message names the key."""


@dataclass
class Paths:
    corpus: str | None = None
    vocab: str | None = None
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    paths: Paths = field(default_factory=Paths)

    def to_json_dict(self) -> dict:
        train = self.train.to_dict()
        masking = train.pop("masking")  # masking is its own top-level group
        return {
            "model": self.model.to_dict(),
            "train": train,
            "masking": masking,
            "finetune": self.finetune.to_dict(),
            "paths": self.paths.to_dict(),
        }


def default_run_config() -> RunConfig:
    return RunConfig()


def _check_keys(group: str, given: dict, cls) -> None:
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"{group}: unknown key(s) {unknown}")


def parse_run_config(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    known_groups = ("model", "train", "masking", "finetune", "paths")
    unknown = sorted(set(doc) - set(known_groups))
    if unknown:
        raise ConfigError(f"unknown top-level group(s) {unknown}")

    def group(name: str) -> dict:
        g = doc.get(name, {})
        if not isinstance(g, dict):
            raise ConfigError(f"{name}: must be an object")
        return dict(g)

    model_d = group("model")
    train_d = group("train")
    masking_d = group("masking")
    finetune_d = group("finetune")
    paths_d = group("paths")

    _check_keys("model", model_d, ModelConfig)
    _check_keys("train", train_d, TrainConfig)
    if "masking" in train_d:
        raise ConfigError("train.masking: masking settings belong in the top-level masking group")
    _check_keys("masking", masking_d, MaskingConfig)
    for split_key in ("token_split", "position_split"):
        if split_key in masking_d:
            if not isinstance(masking_d[split_key], dict):
                raise ConfigError(f"masking.{split_key}: must be an object")
            _check_keys(f"masking.{split_key}", masking_d[split_key], MaskSplit)
    for phase_key in ("phase1", "phase2"):
        if phase_key in train_d:
            if not isinstance(train_d[phase_key], dict):
                raise ConfigError(f"train.{phase_key}: must be an object")
            _check_keys(f"train.{phase_key}", train_d[phase_key], PhaseConfig)
    _check_keys("finetune", finetune_d, FinetuneConfig)
    _check_keys("paths", paths_d, Paths)

    try:
        model = ModelConfig.from_dict(model_d)
        masking = MaskingConfig.from_dict(masking_d)
        train_d["masking"] = masking.to_dict()
        train = TrainConfig.from_dict(train_d)
        finetune = FinetuneConfig.from_dict(finetune_d)
        paths = Paths(**paths_d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return RunConfig(model=model, train=train, finetune=finetune, paths=paths)


def serialize_run_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_json_dict(), sort_keys=True, indent=2) + "\n"


def load_run_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return parse_run_config(doc)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_json_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:8]
