"""Run configuration: a JSON document mirroring the training, rasterizer and
loss-weight settings plus input/output paths. Unknown keys are rejected;
defaults are filled in and the fully-resolved document is echoed into the
output directory of every run.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

from .losses import LossWeights
from .softras import RasterConfig
from .train import TrainConfig


def _from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


@dataclass
class Paths:
    scenes: str = ""
    out: str = ""


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    raster: RasterConfig = field(default_factory=RasterConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    paths: Paths = field(default_factory=Paths)

    def __post_init__(self):
        self.train.weights = self.weights

    @staticmethod
    def from_dict(doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ValueError("config root must be an object")
        unknown = set(doc) - {"train", "raster", "weights", "paths"}
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        return RunConfig(
            train=_from_dict(TrainConfig, doc.get("train", {}), "train"),
            raster=_from_dict(RasterConfig, doc.get("raster", {}), "raster"),
            weights=_from_dict(LossWeights, doc.get("weights", {}), "weights"),
            paths=_from_dict(Paths, doc.get("paths", {}), "paths"))

    @staticmethod
    def load(path: str) -> "RunConfig":
        with open(path) as f:
            return RunConfig.from_dict(json.load(f))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["train"].pop("weights", None)
        return d

    def echo(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config_used.json"), "w") as f:
            json.dump(self.to_dict(), f, indent=1, sort_keys=True)
