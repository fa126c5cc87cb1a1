"""Run configuration: a JSON document with one section per pipeline stage.

Every key has a default; unknown sections or keys are rejected before any
work starts.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .field import ModelConfig
from .losses import LossWeights
from .render import SamplingConfig
from .scene import DEPTH_MODES, SHAPES

MODES = ("localized", "accumulated", "off")


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    shape: str = "sphere"
    views: int = 8
    resolution: int = 64
    depth_mode: str = "metric"
    noise: float = 0.0
    seed: int = 0


@dataclass
class TrainConfig:
    mode: str = "localized"
    rays_per_step: int = 512
    steps: int = 0  # 0: derive from epochs, one epoch being one batch per view
    epochs: int = 300
    lr: float = 5e-4
    warmup_steps: int = 500
    lr_min: float = 2.5e-5
    foreground_fraction: float = 0.75
    seed: int = 0
    chunk_rays: int = 16
    checkpoint_every: int = 1000
    crossing_gradient: bool = False  # let the normal loss move the localized point through f_k, f_k+1


@dataclass
class EvalConfig:
    resolution: int = 128
    chamfer_samples: int = 100000
    seed: int = 0


SECTIONS = {
    "scene": SceneConfig,
    "sampling": SamplingConfig,
    "model": ModelConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        sc, tr, sa = self.scene, self.train, self.sampling
        checks = [
            (sc.shape in SHAPES, f"scene.shape must be one of {sorted(SHAPES)}"),
            (sc.views >= 2, "scene.views must be at least 2"),
            (sc.resolution >= 8, "scene.resolution must be at least 8"),
            (sc.depth_mode in DEPTH_MODES, f"scene.depth_mode must be one of {DEPTH_MODES}"),
            (sc.noise >= 0, "scene.noise must be non-negative"),
            (tr.mode in MODES, f"train.mode must be one of {MODES}"),
            (tr.rays_per_step >= 1, "train.rays_per_step must be at least 1"),
            (tr.steps >= 0 and tr.epochs >= 0, "train.steps and train.epochs must be non-negative"),
            (0 <= tr.foreground_fraction <= 1, "train.foreground_fraction must lie in [0, 1]"),
            (tr.chunk_rays >= 1, "train.chunk_rays must be at least 1"),
            (tr.lr > 0 and tr.lr_min >= 0, "learning rates must be positive"),
            (sa.n_coarse >= 2 and sa.n_rounds >= 0 and sa.n_per_round >= 1, "bad sampling counts"),
            (self.eval.resolution >= 8, "eval.resolution must be at least 8"),
            (self.eval.chamfer_samples >= 1, "eval.chamfer_samples must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
        parts = {}
        for name, kind in SECTIONS.items():
            section = doc.get(name, {})
            if not isinstance(section, dict):
                raise ConfigError(f"config section '{name}' must be an object")
            known = {f.name for f in fields(kind)}
            bad = set(section) - known
            if bad:
                raise ConfigError(f"unknown key(s) in '{name}': {', '.join(sorted(bad))}")
            try:
                parts[name] = kind(**section)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"section '{name}': {exc}") from exc
        return cls(**parts).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(doc)


def describe_defaults() -> str:
    """One ``section.key = default`` line per config key."""
    lines = []
    for name, kind in SECTIONS.items():
        for key, value in asdict(kind()).items():
            lines.append(f"  {name}.{key} = {json.dumps(value)}")
    return "\n".join(lines)
