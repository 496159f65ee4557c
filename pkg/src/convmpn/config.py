"""Run configuration: one JSON document with a section per component."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import MatchConfig
from .model import ModelConfig
from .synth import SynthSpec
from .trainer import TrainConfig

SECTIONS = ("model", "train", "synth", "match", "paths")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    match: MatchConfig = field(default_factory=MatchConfig)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "synth": self.synth.to_dict(),
            "match": self.match.to_dict(),
            "paths": dict(self.paths),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Strict load: unknown sections or keys raise ValueError; missing ones take defaults."""
        if not isinstance(d, dict):
            raise ValueError("run config must be a JSON object")
        unknown = set(d) - set(SECTIONS)
        if unknown:
            raise ValueError(f"unknown run config sections: {sorted(unknown)}")
        model = dict(d.get("model", {}))
        base = ModelConfig.paper() if model.get("preset") == "paper" else ModelConfig.desk()
        unknown = set(model) - set(base.to_dict())
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        model = ModelConfig.from_dict({**base.to_dict(), **model})
        paths = d.get("paths", {})
        if not isinstance(paths, dict) or not all(isinstance(v, str) for v in paths.values()):
            raise ValueError("paths must map names to strings")
        return cls(
            model=model,
            train=TrainConfig.from_dict(d.get("train", {})),
            synth=SynthSpec.from_dict(d.get("synth", {})),
            match=MatchConfig.from_dict(d.get("match", {})),
            paths=dict(paths),
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())
