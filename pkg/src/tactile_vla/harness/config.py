"""Run configuration and its flat ``key=value`` file format.

Blank lines and lines starting with ``#`` are ignored.  Every key is listed in
``KEYS`` with its type and meaning; anything else is an error.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from ..encoders import TACTILE_VIT, ViTConfig
from ..fusion import DepthVariant
from ..policy import PolicyConfig, Variant


class ConfigKeyError(KeyError):
    def __init__(self, key: str, where: str = ""):
        super().__init__(key)
        self.key = key
        self.where = where

    def __str__(self) -> str:
        return f"unknown config key {self.key!r}{self.where}"


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 200
    seed: int = 0
    variant: str = "TacFiLM"
    depth_variant: str = "All"
    log_every: int = 100
    ckpt_every: int = 5000
    eval_every: int = 0
    lora_r: int = 8
    lora_alpha: float = 16.0
    # model shape
    vit_embed_dim: int = 64
    vit_blocks: int = 6
    vit_heads: int = 4
    d_lm: int = 96
    lm_blocks: int = 4
    lm_heads: int = 4
    dtype: str = "float32"
    # data / evaluation
    demos: int = 80
    noise_scale: float = 0.3
    probe_n: int = 2000
    probe_steps: int = 600
    episodes: int = 30
    base_seed: int = 1000

    def __post_init__(self):
        Variant.parse(self.variant)
        DepthVariant.parse(self.depth_variant)
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps >= 0, batch_size >= 1 and lr > 0 required")

    def policy_config(self, variant=None, depth_variant=None) -> PolicyConfig:
        vit = ViTConfig(embed_dim=self.vit_embed_dim, blocks=self.vit_blocks, heads=self.vit_heads)
        return PolicyConfig(
            variant=Variant.parse(variant or self.variant),
            depth_variant=DepthVariant.parse(depth_variant or self.depth_variant),
            vit=vit,
            tactile=TACTILE_VIT,
            d_lm=self.d_lm,
            lm_blocks=self.lm_blocks,
            lm_heads=self.lm_heads,
            dtype=self.dtype,
        )

    def lr_at(self, step: int) -> float:
        """Linear warmup over ``warmup`` steps, then constant."""
        if self.warmup and step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        return self.lr


KEYS = {
    "steps": "optimiser steps for train/finetune",
    "batch_size": "(episode, step) samples per update",
    "lr": "peak Adam learning rate",
    "warmup": "linear warmup steps before the constant rate",
    "seed": "base seed for initialisation, batching and data collection",
    "variant": "VisionOnly | TactileConcat | TacFiLM",
    "depth_variant": "All | Early | Middle | Late (TacFiLM blocks)",
    "log_every": "loss log interval in steps",
    "ckpt_every": "periodic checkpoint interval in steps (0 disables)",
    "eval_every": "reserved; rollout evaluation during training (0 disables)",
    "lora_r": "LoRA rank for finetune",
    "lora_alpha": "LoRA scale numerator (delta = alpha / r * A @ B)",
    "vit_embed_dim": "visual ViT width per stream",
    "vit_blocks": "visual ViT depth",
    "vit_heads": "visual ViT attention heads",
    "d_lm": "decoder width",
    "lm_blocks": "decoder depth",
    "lm_heads": "decoder attention heads",
    "dtype": "float32 | float64 training precision",
    "demos": "successful demonstrations per task for collect",
    "noise_scale": "scripted expert action noise",
    "probe_n": "examples per probe dataset",
    "probe_steps": "tactile pretraining steps",
    "episodes": "evaluation rollouts per task",
    "base_seed": "first evaluation episode seed (episodes are seeded sequentially)",
}

assert set(KEYS) == {f.name for f in fields(TrainConfig)}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    types = {f.name: f.type for f in fields(TrainConfig)}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigKeyError(key, f" ({source}:{lineno})")
        kind = types[key]
        try:
            out[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
        except ValueError as e:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {value!r}") from e
    return out


def load_config(path=None, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text(), str(path)) if path else {}
    values.update({k: v for k, v in overrides.items() if v is not None})
    unknown = sorted(set(values) - set(KEYS))
    if unknown:
        raise ConfigKeyError(unknown[0])
    return TrainConfig(**values)


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"# {KEYS[f.name]}\n{f.name}={getattr(cfg, f.name)}\n" for f in fields(cfg))


def updated(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **kw)
