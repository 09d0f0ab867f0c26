"""ViT backbones: the dual-stream visual encoder and the tactile encoder.

Images are ``H x W x C`` float arrays in [0, 1] (or a batch ``N x H x W x C``).
Patches are taken in raster order (left to right, then top to bottom); each patch
is flattened row-major with channels last, i.e. ``patch[r, c, ch]`` lands at
``(r * P + c) * C + ch``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError
from .fusion import FiLMParams, film_apply
from .layers import Block, LayerNorm, Linear, Module


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 48
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    blocks: int = 6
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.heads} heads")

    @property
    def tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size**2 * self.channels


TACTILE_VIT = ViTConfig(image_size=32, patch_size=8, channels=6, embed_dim=32, blocks=2, heads=4, mlp_ratio=2.0)


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """``[..., H, W, C] -> [..., tokens, P*P*C]``."""
    *lead, H, W, C = image.shape
    p = patch_size
    if H % p or W % p:
        raise ConfigError(f"image {H}x{W} not divisible by patch size {p}")
    x = image.reshape(*lead, H // p, p, W // p, p, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, (H // p) * (W // p), p * p * C)


def unpatchify(tokens: np.ndarray, patch_size: int, height: int, width: int, channels: int) -> np.ndarray:
    *lead, _, _ = tokens.shape
    p = patch_size
    n = len(lead)
    x = tokens.reshape(*lead, height // p, width // p, p, p, channels)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, height, width, channels)


class ViT(Module):
    """Pre-norm ViT with learned positional embeddings and no class token."""

    def __init__(self, config: ViTConfig, rng, dtype=np.float64):
        self.config = config
        d = config.embed_dim
        self.patch_embed = Linear(config.patch_dim, d, rng, dtype)
        self.pos = Parameter((rng.standard_normal((config.tokens, d)) * 0.02).astype(dtype))
        self.blocks = [Block(d, config.heads, config.mlp_ratio, rng, dtype) for _ in range(config.blocks)]
        self.norm = LayerNorm(d, dtype)

    def __call__(self, images, film: dict[int, FiLMParams] | None = None) -> tuple[Tensor, list[Tensor]]:
        cfg = self.config
        film = film or {}
        bad = [b for b in film if not 0 <= b < cfg.blocks]
        if bad:
            raise ConfigError(f"FiLM block index {bad[0]} outside [0, {cfg.blocks})")
        images = images.data if isinstance(images, Tensor) else np.asarray(images)
        if images.shape[-3:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise ConfigError(f"expected {cfg.image_size}x{cfg.image_size}x{cfg.channels} images, got {images.shape}")
        dtype = self.pos.dtype
        x = ad.add(self.patch_embed(Tensor(patchify(images.astype(dtype, copy=False), cfg.patch_size), dtype=dtype)), self.pos)
        activations = []
        for i, block in enumerate(self.blocks):
            mod = None
            if i in film:
                p = film[i]
                mod = lambda h, p=p: film_apply(h, p.gamma, p.beta)  # noqa: E731
            x, normed = block(x, mod)
            activations.append(normed)
        return self.norm(x), activations


def vit_forward(vit: ViT, image, film: dict[int, FiLMParams] | None = None) -> tuple[Tensor, list[Tensor]]:
    return vit(image, film)


def fuse_streams(a: Tensor, b: Tensor) -> Tensor:
    """Per-token channel concatenation, stream ``a`` first."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ad.ShapeError(f"stream token layouts differ: {a.shape} vs {b.shape}")
    return ad.concat([a, b], axis=-1)


class DualStreamBackbone(Module):
    """Two independently parameterised ViTs of identical shape, fused channel-wise."""

    def __init__(self, config: ViTConfig, rng, dtype=np.float64):
        self.config = config
        self.stream_a = ViT(config, rng, dtype)
        self.stream_b = ViT(config, rng, dtype)

    @property
    def out_dim(self) -> int:
        return 2 * self.config.embed_dim

    def __call__(self, images, film_a=None, film_b=None) -> Tensor:
        fa, _ = self.stream_a(images, film_a)
        fb, _ = self.stream_b(images, film_b)
        return fuse_streams(fa, fb)


# -- tactile ---------------------------------------------------------------


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic matrix averaging input cells by their overlap with each output cell."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        lo, hi = o * scale, (o + 1) * scale
        for i in range(int(np.floor(lo)), int(np.ceil(hi))):
            m[o, i] = max(0.0, min(hi, i + 1) - max(lo, i))
    return m / m.sum(axis=1, keepdims=True)


def area_resize(image: np.ndarray, size: int) -> np.ndarray:
    H, W = image.shape[-3], image.shape[-2]
    if (H, W) == (size, size):
        return image
    rows = _area_matrix(H, size)
    cols = _area_matrix(W, size)
    return np.einsum("oh,...hwc,pw->...opc", rows, image, cols)


TACTILE_GAP = 5


def tactile_preprocess(history, t: int, background: np.ndarray, size: int = 32) -> np.ndarray:
    """Background-subtracted pair of tactile frames ``t - 5`` and ``t``.

    Frames are ``h x w x C`` in [0, 1]; the older frame's channels come first.  The
    index is clamped at the start of the history.
    """
    if len(history) == 0:
        raise ValueError("tactile history is empty")
    if not 0 <= t < len(history):
        raise IndexError(f"step {t} outside history of length {len(history)}")
    bg = np.asarray(background, dtype=np.float64)
    old = np.clip(np.asarray(history[max(t - TACTILE_GAP, 0)], dtype=np.float64) - bg, 0.0, 1.0)
    new = np.clip(np.asarray(history[t], dtype=np.float64) - bg, 0.0, 1.0)
    return area_resize(np.concatenate([old, new], axis=-1), size)


@dataclass
class TactileEmbedding:
    patch_features: Tensor
    pooled: Tensor = field(default=None)

    def __post_init__(self):
        if self.pooled is None:
            self.pooled = ad.tmean(self.patch_features, axis=-2)


class TactileEncoder(Module):
    """ViT over preprocessed tactile pairs; pooled embedding is the token mean."""

    def __init__(self, config: ViTConfig = TACTILE_VIT, rng=None, dtype=np.float64):
        self.config = config
        self.vit = ViT(config, rng if rng is not None else np.random.default_rng(0), dtype)

    @property
    def dim(self) -> int:
        return self.config.embed_dim

    def __call__(self, images) -> TactileEmbedding:
        feats, _ = self.vit(images)
        return TactileEmbedding(feats)


def tactile_encode(images, encoder: TactileEncoder) -> TactileEmbedding:
    return encoder(images)
