"""Run configuration: one JSON file plus flag overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .errors import ValidationError
from .model import KINDS, ModelConfig

PRESETS = ("hsi", "imagenet")
RECIPES = ("staged", "single")


@dataclass
class RunConfig:
    seed: int | None = None
    out: str = "run"
    baseline: str = "lum"
    d_tar: float = 0.1
    lambda_ratio: float = 5.0
    ratio_loss: str = "mse"
    tau: float = 1.0
    tau_final: float | None = None  # linear anneal over stage 1 when set
    stage_multiplier: float = 0.5
    recipe: str = "staged"
    preset: str = "hsi"
    batch_size: int = 64
    grad_clip: float | None = None
    data: dict = field(default_factory=lambda: {"synthetic": {"classes": 8, "bands": 64, "size": 96}})
    window: int = 9
    upsample: int = 3
    split: tuple = (4, 6)
    model: dict = field(default_factory=dict)
    stage_overrides: dict = field(default_factory=dict)
    cs_tile: int = 8
    noise_sigma: float = 0.0
    eval_batch: int = 256

    def __post_init__(self):
        self.validate(require_seed=False)

    def validate(self, require_seed: bool = True) -> "RunConfig":
        if require_seed and self.seed is None:
            raise ValidationError("a seed is required (--seed or \"seed\" in the config)")
        if self.seed is not None and (not isinstance(self.seed, int) or self.seed < 0):
            raise ValidationError(f"seed must be a non-negative integer, got {self.seed!r}")
        if not 0 < self.d_tar <= 1:
            raise ValidationError(f"d_tar must lie in (0, 1], got {self.d_tar}")
        if self.baseline not in KINDS:
            raise ValidationError(f"baseline must be one of {KINDS}, got '{self.baseline}'")
        if self.preset not in PRESETS:
            raise ValidationError(f"preset must be one of {PRESETS}")
        if self.recipe not in RECIPES:
            raise ValidationError(f"recipe must be one of {RECIPES}")
        if not self.stage_multiplier > 0:
            raise ValidationError("stage multiplier must be > 0")
        if self.ratio_loss not in ("mse", "l1"):
            raise ValidationError("ratio_loss must be 'mse' or 'l1'")
        if self.batch_size < 2:
            raise ValidationError("batch size must be >= 2")
        if self.noise_sigma < 0:
            raise ValidationError("noise sigma must be >= 0")
        if not self.tau > 0 or (self.tau_final is not None and not self.tau_final > 0):
            raise ValidationError("temperatures must be > 0")
        self.split = tuple(self.split)
        return self

    @property
    def image_size(self) -> int:
        return self.window * self.upsample

    def model_config(self, bands: int, num_classes: int) -> ModelConfig:
        kw = dict(self.model)
        kw.update(kind=self.baseline, bands=bands, num_classes=num_classes,
                  image_size=self.image_size, d_tar=self.d_tar, tau=self.tau)
        kw.setdefault("patch", 9)
        return ModelConfig.from_dict(kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split"] = list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path, overrides: dict | None = None) -> "RunConfig":
        """JSON file (optional) with ``overrides`` applied on top; overrides win."""
        d: dict = {}
        if path is not None:
            try:
                with open(path) as fh:
                    d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"config {path}: {exc}") from None
            if not isinstance(d, dict):
                raise ValidationError(f"config {path} must hold a JSON object")
        for k, v in (overrides or {}).items():
            if v is not None:
                d[k] = v
        return cls.from_dict(d)
