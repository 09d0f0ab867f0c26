"""Tactile fusion: FiLM parameter generation/application and the concat projector."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .layers import MLP, Module


class DepthVariant(str, enum.Enum):
    ALL = "All"
    EARLY = "Early"
    MIDDLE = "Middle"
    LATE = "Late"

    @classmethod
    def parse(cls, value: "str | DepthVariant") -> "DepthVariant":
        if isinstance(value, cls):
            return value
        for v in cls:
            if v.value.lower() == str(value).lower():
                return v
        raise ValueError(f"unknown depth variant {value!r}")


STREAMS = ("A", "B")


def select_film_blocks(variant: DepthVariant | str, blocks: int) -> list[int]:
    """Block indices that receive FiLM conditioning.

    ``All`` covers every block; the thirds variants take ``ceil(B/3)`` contiguous
    blocks at the start, centre (starting at ``floor((B - n) / 2)``) or end.
    """
    variant = DepthVariant.parse(variant)
    if variant is DepthVariant.ALL:
        if blocks < 1:
            raise ConfigError("need at least one block")
        return list(range(blocks))
    if blocks < 3:
        raise ConfigError(f"{variant.value} FiLM needs at least 3 blocks, got {blocks}")
    n = math.ceil(blocks / 3)
    if variant is DepthVariant.EARLY:
        start = 0
    elif variant is DepthVariant.MIDDLE:
        start = (blocks - n) // 2
    else:
        start = blocks - n
    return list(range(start, start + n))


@dataclass
class FiLMParams:
    gamma: Tensor
    beta: Tensor
    block_index: int
    stream_id: str


def film_apply(features: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """``features * (1 + gamma) + beta`` with per-channel ``gamma``/``beta``.

    ``features`` is ``[..., tokens, c]``; ``gamma``/``beta`` are ``[..., c]`` and are
    broadcast identically over every token.
    """
    c = features.shape[-1]
    if gamma.shape[-1] != c or beta.shape[-1] != c:
        raise ad.ShapeError(f"FiLM channels {gamma.shape[-1]}/{beta.shape[-1]} do not match features {c}")
    lead = gamma.shape[:-1]
    g = ad.reshape(gamma, lead + (1, c))
    b = ad.reshape(beta, beta.shape[:-1] + (1, c))
    return ad.add(ad.mul(features, ad.add(g, 1.0)), b)


class FiLMGenerator(Module):
    """One ``d_t -> 2 d_t -> 2 c`` MLP per (stream, conditioned block).

    The output layer starts at exactly zero, so every generated gamma/beta is
    zero until the first update.
    """

    def __init__(self, d_t: int, embed_dim: int, blocks: list[int], rng, dtype=np.float64, streams=STREAMS):
        self.embed_dim = embed_dim
        self.blocks = list(blocks)
        self.streams = tuple(streams)
        self.mlps = {
            f"{s}{b}": MLP(d_t, 2 * d_t, 2 * embed_dim, rng, dtype, zero_last=True) for s in self.streams for b in self.blocks
        }

    def __len__(self) -> int:
        return len(self.mlps)

    def generate(self, z: Tensor, block: int, stream: str) -> FiLMParams:
        key = f"{stream}{block}"
        if key not in self.mlps:
            raise KeyError(f"block {block} of stream {stream} is not FiLM-conditioned")
        out = self.mlps[key](z)
        c = self.embed_dim
        return FiLMParams(out[..., :c], out[..., c:], block, stream)

    def for_stream(self, z: Tensor, stream: str) -> dict[int, FiLMParams]:
        return {b: self.generate(z, b, stream) for b in self.blocks}


def film_generate(z: Tensor, generator: FiLMGenerator, block: int, stream: str) -> FiLMParams:
    return generator.generate(z, block, stream)


class ConcatProjector(Module):
    """Per-patch ``d_t -> hidden -> d_lm`` projection for the TactileConcat baseline."""

    def __init__(self, d_t: int, hidden: int, d_lm: int, rng, dtype=np.float64):
        self.mlp = MLP(d_t, hidden, d_lm, rng, dtype)

    def __call__(self, patch_features: Tensor) -> Tensor:
        return self.mlp(patch_features)


def concat_project(patch_features: Tensor, projector: ConcatProjector) -> Tensor:
    return projector(patch_features)
