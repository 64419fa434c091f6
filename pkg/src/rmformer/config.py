"""Run configuration: dataclasses plus the ``key = value`` text format.

Every key is ``section.field``; e.g. ``train.steps = 600``. Lines starting
with ``#`` are comments. Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError


@dataclass
class BackboneConfig:
    embed_dim: int = 32
    patch_size: int = 4
    window_size: int = 4
    depths: tuple = (2, 2, 2, 2)
    heads: tuple = (1, 2, 4, 8)
    mlp_ratio: float = 4.0

    def validate(self, input_side: Optional[int] = None):
        if self.patch_size < 1:
            raise ConfigError(f"model.patch_size must be >= 1, got {self.patch_size}")
        if self.window_size < 1:
            raise ConfigError(f"model.window_size must be >= 1, got {self.window_size}")
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("model.depths and model.heads need exactly 4 entries")
        for i, h in enumerate(self.heads):
            if (self.embed_dim * 2 ** i) % h:
                raise ConfigError(f"stage {i + 1} width {self.embed_dim * 2 ** i} not divisible by {h} heads")
        if input_side is not None:
            side = input_side
            if side % self.patch_size:
                raise ConfigError(f"input side {side} not divisible by patch size {self.patch_size}")
            side //= self.patch_size
            for stage in range(1, 5):
                if stage > 1:
                    if side % 2:
                        raise ConfigError(f"token grid {side} cannot be merged at stage {stage}")
                    side //= 2
                if side > self.window_size and side % self.window_size:
                    raise ConfigError(
                        f"stage {stage} token grid {side} not divisible by window {self.window_size}")


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    # cps side first, then one entry per refinement stage
    scales: tuple = (64, 128, 256)
    encoder_channels: int = 32
    pr_scales: tuple = (128, 256)
    pr_k: Optional[int] = None  # None -> 4 * sqrt(h * w)
    pr_guide: str = "edge"

    @property
    def cps_side(self):
        return self.scales[0]

    @property
    def stage_sides(self):
        return tuple(self.scales[1:])

    def validate(self):
        if not self.scales:
            raise ConfigError("model.scales must not be empty")
        prev = self.scales[0]
        for s in self.scales[1:]:
            ratio = s / self.scales[0]
            if s <= prev or ratio != int(ratio) or not _is_pow2(int(ratio)):
                raise ConfigError(
                    f"model.scales {self.scales} is not a doubling chain from {self.scales[0]}")
            prev = s
        if self.pr_guide not in ("edge", "absdiff"):
            raise ConfigError(f"model.pr_guide must be 'edge' or 'absdiff', got {self.pr_guide!r}")
        if self.pr_k is not None and self.pr_k < 0:
            raise ConfigError("model.pr_k must be >= 0 or 'auto'")
        if self.encoder_channels < 1:
            raise ConfigError("model.encoder_channels must be >= 1")
        self.backbone.validate(self.cps_side)
        if self.cps_side % 8:
            raise ConfigError("cps side must be divisible by 8 for the refiner's global branch")


@dataclass
class StageConfig:
    """Per refinement stage view derived from :class:`ModelConfig`."""

    stage_resolution: int
    encoder_channels: int
    n_encoder_blocks: int
    pr_sides: tuple
    pr_k: Optional[int]
    pr_guide: str = "edge"

    @property
    def pr_enabled(self):
        return bool(self.pr_sides)

    @classmethod
    def from_model(cls, model: ModelConfig, stage_resolution: int) -> "StageConfig":
        n = int(round(math.log2(stage_resolution / model.cps_side))) + 1
        sides = tuple(model.cps_side * 2 ** i for i in range(n))
        return cls(
            stage_resolution=stage_resolution,
            encoder_channels=model.encoder_channels,
            n_encoder_blocks=n,
            pr_sides=tuple(s for s in sides if s in model.pr_scales),
            pr_k=model.pr_k,
            pr_guide=model.pr_guide,
        )


@dataclass
class LossConfig:
    weights: tuple = (1.0, 1.0, 1.0)
    edge_width: int = 2
    supervise_refined: bool = True

    def validate(self):
        if len(self.weights) != 3:
            raise ConfigError("loss.weights needs 3 entries (cps, rrs1, rrs2)")
        if any(w < 0 or not math.isfinite(w) for w in self.weights):
            raise ConfigError(f"loss.weights must be finite and non-negative, got {self.weights}")
        if self.edge_width < 1:
            raise ConfigError("loss.edge_width must be >= 1")


@dataclass
class TrainConfig:
    lr_backbone: float = 0.001
    lr_other: float = 0.01
    momentum: float = 0.9
    epochs: int = 32
    steps: int = 0  # > 0 overrides epochs
    batch_size: int = 3
    seed: int = 0
    checkpoint_every: int = 0  # 0 -> final checkpoint only
    flip_prob: float = 0.5
    crop_fraction: float = 0.875

    def validate(self):
        if self.lr_backbone <= 0 or self.lr_other <= 0:
            raise ConfigError("learning rates must be > 0")
        if self.epochs < 1:
            raise ConfigError("train.epochs must be >= 1")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("train.steps must be >= 0 and train.batch_size >= 1")
        if not 0.0 < self.crop_fraction <= 1.0:
            raise ConfigError(f"train.crop_fraction must be in (0, 1], got {self.crop_fraction}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError("train.flip_prob must be in [0, 1]")


@dataclass
class DataConfig:
    dir: str = ""  # empty -> synthetic samples
    n_samples: int = 8
    complexity: float = 0.5
    seed: int = 0

    def validate(self):
        if self.n_samples < 1:
            raise ConfigError("data.n_samples must be >= 1")
        if not 0.0 <= self.complexity <= 1.0:
            raise ConfigError("data.complexity must be in [0, 1]")


@dataclass
class EvalConfig:
    beta2: float = 0.3


@dataclass
class OutputConfig:
    dir: str = "runs/default"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self):
        self.model.validate()
        self.loss.validate()
        self.train.validate()
        self.data.validate()
        return self

    def to_dict(self):
        return {key: getattr(_owner(self, key), key.rsplit(".", 1)[1]) for key in KEYS}

    def to_text(self):
        return "".join(f"{key} = {_format(value)}\n" for key, value in self.to_dict().items())


def _is_pow2(n):
    return n >= 1 and n & (n - 1) == 0


def _tuple_of(kind):
    def parse(text):
        parts = [p.strip() for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(kind(p) for p in parts)
    return parse


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_int(text):
    return None if text.lower() == "auto" else int(text)


def _format(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


# key -> (parser, help)
KEYS = {
    "model.embed_dim": (int, "backbone embedding channels C"),
    "model.patch_size": (int, "pixels per patch side"),
    "model.window_size": (int, "tokens per attention window side"),
    "model.depths": (_tuple_of(int), "transformer blocks per backbone stage (4 values)"),
    "model.heads": (_tuple_of(int), "attention heads per backbone stage (4 values)"),
    "model.mlp_ratio": (float, "MLP hidden width / token width"),
    "model.scales": (_tuple_of(int), "cps side followed by refinement stage sides, e.g. 64,128,256"),
    "model.encoder_channels": (int, "image guided encoder width"),
    "model.pr_scales": (_tuple_of(int), "decoder sides where the pixel refiner runs (empty = off)"),
    "model.pr_k": (_opt_int, "pixels re-predicted per refiner call, or 'auto' (4*sqrt(h*w))"),
    "model.pr_guide": (str, "refiner selection guide: edge | absdiff"),
    "loss.weights": (_tuple_of(float), "stage loss weights cps,rrs1,rrs2"),
    "loss.edge_width": (int, "edge ground-truth band width in pixels"),
    "loss.supervise_refined": (_bool, "add loss terms for refined maps"),
    "train.lr_backbone": (float, "base learning rate of the shared backbone"),
    "train.lr_other": (float, "base learning rate of every other parameter"),
    "train.momentum": (float, "SGD momentum"),
    "train.epochs": (int, "epochs (ignored when train.steps > 0)"),
    "train.steps": (int, "total optimisation steps; 0 = derive from epochs"),
    "train.batch_size": (int, "samples per step"),
    "train.seed": (int, "initialisation / augmentation seed"),
    "train.checkpoint_every": (int, "checkpoint cadence in steps; 0 = final only"),
    "train.flip_prob": (float, "horizontal flip probability"),
    "train.crop_fraction": (float, "random crop side as a fraction of the image side"),
    "data.dir": (str, "directory with images/ and masks/; empty = synthetic"),
    "data.n_samples": (int, "synthetic sample count"),
    "data.complexity": (float, "synthetic boundary complexity in [0, 1]"),
    "data.seed": (int, "synthetic data base seed"),
    "eval.beta2": (float, "F-measure beta squared"),
    "output.dir": (str, "output directory"),
}


def _owner(cfg: RunConfig, key: str):
    section, name = key.split(".", 1)
    obj = getattr(cfg, section)
    if section == "model" and name in {f.name for f in dataclasses.fields(BackboneConfig)}:
        obj = obj.backbone
    return obj


def set_key(cfg: RunConfig, key: str, text: str, line: Optional[int] = None):
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}", line)
    parser, _ = KEYS[key]
    try:
        value = parser(text.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}", line) from None
    setattr(_owner(cfg, key), key.rsplit(".", 1)[1], value)


def parse_text(text: str, cfg: Optional[RunConfig] = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = line.split("=", 1)
        set_key(cfg, key.strip(), value, lineno)
    return cfg


def load_config(path=None, overrides=()) -> RunConfig:
    """Read a config file (optional) and apply ``key=value`` overrides; overrides win."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parse_text(path.read_text(), cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        set_key(cfg, key.strip(), value)
    return cfg.validate()


def describe_keys():
    defaults = RunConfig().to_dict()
    return "\n".join(f"  {k} = {_format(defaults[k])}  # {h}" for k, (_, h) in KEYS.items())
