"""Parameter containers and the transformer building blocks shared by every network."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor


class Module:
    """Minimal parameter tree.  Attribute order defines parameter order."""

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(val, Module):
                yield from val.named_modules(name)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{name}.{i}")
            elif isinstance(val, dict):
                for k, item in val.items():
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{name}.{k}")

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        for mod_name, mod in self.named_modules():
            for key, val in vars(mod).items():
                if isinstance(val, Parameter) and not key.startswith("_"):
                    name = f"{mod_name}.{key}" if mod_name else key
                    val.name = name
                    yield name, val

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class LoRA(Module):
    """Low-rank delta ``(alpha / r) * A @ B`` on a ``[d_in x d_out]`` weight."""

    def __init__(self, d_in: int, d_out: int, r: int, alpha: float, rng, dtype=np.float64):
        self.r = r
        self.alpha = float(alpha)
        self.A = Parameter(_normal(rng, (d_in, r), 1.0 / math.sqrt(d_in), dtype))
        self.B = Parameter(np.zeros((r, d_out), dtype=dtype))

    @property
    def scale(self) -> float:
        return self.alpha / self.r

    def delta(self) -> np.ndarray:
        return self.scale * (self.A.data @ self.B.data)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.mul(ad.linear(ad.linear(x, self.A), self.B), self.scale)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float64, bias: bool = True, zero: bool = False, std=None):
        if zero:
            w = np.zeros((d_in, d_out), dtype=dtype)
        else:
            w = _normal(rng, (d_in, d_out), std if std is not None else 1.0 / math.sqrt(d_in), dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None
        self.lora: LoRA | None = None

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.linear(x, self.weight, self.bias)
        if self.lora is not None:
            out = ad.add(out, self.lora(x))
        return out


class LayerNorm(Module):
    def __init__(self, c: int, dtype=np.float64, eps: float = 1e-5):
        self.gain = Parameter(np.ones(c, dtype=dtype))
        self.bias = Parameter(np.zeros(c, dtype=dtype))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng, dtype=np.float64, zero_last: bool = False):
        self.fc1 = Linear(d_in, d_hidden, rng, dtype)
        self.fc2 = Linear(d_hidden, d_out, rng, dtype, zero=zero_last)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))


class Attention(Module):
    def __init__(self, c: int, heads: int, rng, dtype=np.float64, causal: bool = False):
        if c % heads:
            raise ValueError(f"embed dim {c} not divisible by {heads} heads")
        self.heads = heads
        self.causal = causal
        self.q = Linear(c, c, rng, dtype)
        self.k = Linear(c, c, rng, dtype)
        self.v = Linear(c, c, rng, dtype)
        self.o = Linear(c, c, rng, dtype, std=1.0 / math.sqrt(c) / 2)

    def __call__(self, x: Tensor) -> Tensor:
        return ad.multi_head_attention(x, self.q, self.k, self.v, self.o, self.heads, self.causal)


class Block(Module):
    """Pre-norm transformer block.

    ``modulate`` (optional) is applied to the normalized features feeding
    attention; the MLP sublayer's norm is never modulated.
    """

    def __init__(self, c: int, heads: int, mlp_ratio: float, rng, dtype=np.float64, causal: bool = False):
        self.norm1 = LayerNorm(c, dtype)
        self.attn = Attention(c, heads, rng, dtype, causal)
        self.norm2 = LayerNorm(c, dtype)
        self.mlp = MLP(c, int(round(c * mlp_ratio)), c, rng, dtype)

    def __call__(self, x: Tensor, modulate=None) -> tuple[Tensor, Tensor]:
        h = self.norm1(x)
        normed = h
        if modulate is not None:
            h = modulate(h)
        x = ad.add(x, self.attn(h))
        x = ad.add(x, self.mlp(self.norm2(x)))
        return x, normed
