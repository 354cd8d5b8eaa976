"""Run configuration: one JSON document covering model, training, loss and
data settings, with dotted-path overrides and a stable content hash that
checkpoints and reports embed.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .generator import GenConfig
from .losses import LossWeights
from .trainer import TrainConfig


@dataclass
class DataConfig:
    grid_size: int = 5
    n_turns: int = 5
    p_it: float = 0.3
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50


@dataclass
class RunConfig:
    model: GenConfig = field(default_factory=GenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self):
        return {
            "model": dataclasses.asdict(self.model),
            "train": dataclasses.asdict(self.train),
            "loss": dataclasses.asdict(self.loss),
            "data": dataclasses.asdict(self.data),
        }

    @classmethod
    def from_dict(cls, blob):
        cfg = cls()
        sections = {"model": GenConfig, "train": TrainConfig, "loss": LossWeights, "data": DataConfig}
        for name, klass in sections.items():
            merged = dataclasses.asdict(getattr(cfg, name))
            extra = blob.get(name, {})
            unknown = set(extra) - set(merged)
            if unknown:
                raise KeyError(f"unknown config keys in '{name}': {sorted(unknown)}")
            merged.update(extra)
            setattr(cfg, name, klass(**merged))
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    def apply_override(self, dotted, raw_value):
        """Set e.g. 'train.batch_size=4'; values parse as JSON when possible."""
        section, _, key = dotted.partition(".")
        if not key:
            raise KeyError(f"override '{dotted}' must look like section.key")
        target = getattr(self, section, None)
        if target is None or not hasattr(target, key):
            raise KeyError(f"unknown config key '{dotted}'")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        blob = self.to_dict()
        blob[section][key] = value
        updated = RunConfig.from_dict(blob)
        for name in ("model", "train", "loss", "data"):
            setattr(self, name, getattr(updated, name))

    def config_hash(self):
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()
