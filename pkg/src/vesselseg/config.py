"""Run configuration file: one JSON object merging phantom, model, training and ablation settings."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .model import AblationFlags, ModelConfig
from .phantom import PhantomSpec
from .training import TrainConfig

SECTIONS = ("phantom", "model", "train", "ablation", "paths", "heldout")
PATH_KEYS = ("val", "ood")


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: AblationFlags = field(default_factory=AblationFlags)
    paths: dict = field(default_factory=dict)
    heldout: int = 3

    def with_seed(self, seed: int | None) -> "RunConfig":
        if seed is None:
            return self
        return replace(
            self,
            phantom=replace(self.phantom, seed=seed),
            train=replace(self.train, seed=seed),
        )

    def to_dict(self) -> dict:
        return {
            "phantom": self.phantom.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "ablation": self.ablation.to_dict(),
            "paths": dict(self.paths),
            "heldout": self.heldout,
        }


def parse_config(doc: dict, base: Path | None = None) -> RunConfig:
    """Build a RunConfig; unknown keys and missing referenced paths are errors."""
    if not isinstance(doc, dict):
        raise ValueError("config must be a JSON object")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    ablation = doc.get("ablation", {})
    bad = set(ablation) - set(AblationFlags.__dataclass_fields__)
    if bad:
        raise ValueError(f"unknown ablation keys: {sorted(bad)}")
    paths = dict(doc.get("paths", {}))
    bad = set(paths) - set(PATH_KEYS)
    if bad:
        raise ValueError(f"unknown paths keys: {sorted(bad)}")
    for key, value in paths.items():
        p = Path(value)
        if base is not None and not p.is_absolute():
            p = base / p
        if not p.exists():
            raise FileNotFoundError(f"config path {key!r} does not exist: {p}")
        paths[key] = str(p)
    heldout = int(doc.get("heldout", 3))
    if heldout < 1:
        raise ValueError("heldout must be >= 1")
    return RunConfig(
        phantom=PhantomSpec.from_dict(doc.get("phantom", {})),
        model=ModelConfig.from_dict(doc.get("model", {})),
        train=TrainConfig.from_dict(doc.get("train", {})),
        ablation=AblationFlags(**ablation),
        paths=paths,
        heldout=heldout,
    )


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc
    return parse_config(doc, path.parent)
