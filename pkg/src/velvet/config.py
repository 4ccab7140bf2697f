"""Run configuration: a flat JSON-serializable dataclass.

Unknown keys in a config file are rejected outright so typos cannot
silently disable an objective.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

LOSS_NAMES = ("cm_top", "cm_mid", "cm_bot", "mm_match", "mm_mlm",
              "lan_mlm", "vis_inp", "vis_rot", "vis_con")


@dataclass
class RunConfig:
    seed: int = 0
    epochs: int = 50
    batch_size: int = 10
    lr: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 1e-5
    max_steps: int = 0          # 0 = derive from epochs
    val_fraction: float = 0.0

    text_preset: str = "tribert-b"
    vision_preset: str = "swinvit-s"
    volume_size: int = 96
    window_size: int = 6
    max_sentences: int = 50
    max_words_per_sentence: int = 200
    max_words_per_report: int = 512
    max_len: int = 1024

    proj_dim: int = 512
    bot_token_cap: int = 512
    mm_layers: int = 3
    mm_heads: int = 4
    mm_memory_level: str = "top"
    mine_both_directions: bool = False
    temperature_init: float = 0.07
    local_aggregation: str = "mean"

    crop_size: int = 64
    intensity_shift: float = 0.1
    intensity_scale: float = 0.1
    flip_prob: float = 0.5
    mask_ratio: float = 0.15
    inpaint_block: int = 16
    inpaint_rate: float = 0.3

    enable_cm_top: bool = True
    enable_cm_mid: bool = True
    enable_cm_bot: bool = True
    enable_mm_match: bool = True
    enable_mm_mlm: bool = True
    enable_lan_mlm: bool = True
    enable_vis_inp: bool = True
    enable_vis_rot: bool = True
    enable_vis_con: bool = True

    weight_cm_top: float = 1.0
    weight_cm_mid: float = 1.0
    weight_cm_bot: float = 1.0
    weight_mm_match: float = 1.0
    weight_mm_mlm: float = 1.0
    weight_lan_mlm: float = 1.0
    weight_vis_inp: float = 1.0
    weight_vis_rot: float = 1.0
    weight_vis_con: float = 1.0

    amp: bool = False
    data_parallel: bool = False

    def enabled(self, name: str) -> bool:
        return getattr(self, f"enable_{name}")

    def weight(self, name: str) -> float:
        return getattr(self, f"weight_{name}")

    @property
    def enabled_losses(self) -> tuple[str, ...]:
        return tuple(n for n in LOSS_NAMES if self.enabled(n))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(data)

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1; epochs/max_steps >= 0")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.mm_memory_level not in ("top", "mid"):
            raise ConfigError("mm_memory_level must be 'top' or 'mid'")
        if self.local_aggregation not in ("mean", "lse"):
            raise ConfigError("local_aggregation must be 'mean' or 'lse'")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must be in [0, 1)")


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Cosine annealing from base_lr at step 0 to 0 at the final step."""
    import math
    if total_steps <= 1:
        return base_lr
    t = min(step, total_steps - 1) / (total_steps - 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))
