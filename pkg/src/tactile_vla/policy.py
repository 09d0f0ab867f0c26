"""Policy variants: vision-only, token-concatenated touch, and FiLM-conditioned touch.

Input sequence: ``[visual tokens | tactile tokens (concat only) | text | actions]``
where the text segment is left-padded to a fixed length and ends with the
instruction (``PAD.. BOS w1 .. wn``).  A causal decoder predicts action tokens,
and the output head is tied to the token embedding.
"""

from __future__ import annotations

import copy
import enum
import fnmatch
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import rng as rngmod
from . import sim
from .autodiff import Parameter, Tensor
from .dataset import NormStats
from .errors import ConfigError
from .encoders import TACTILE_VIT, DualStreamBackbone, TactileEmbedding, TactileEncoder, ViTConfig
from .fusion import ConcatProjector, DepthVariant, FiLMGenerator, select_film_blocks
from .layers import MLP, Block, LayerNorm, Linear, LoRA, Module


class Variant(str, enum.Enum):
    VISION_ONLY = "VisionOnly"
    TACTILE_CONCAT = "TactileConcat"
    TACFILM = "TacFiLM"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        for v in cls:
            if v.value.lower() == str(value).lower():
                return v
        raise ValueError(f"unknown policy variant {value!r}")


class LengthError(ValueError):
    pass


class DecodeError(ValueError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    variant: Variant = Variant.TACFILM
    depth_variant: DepthVariant = DepthVariant.ALL
    vit: ViTConfig = field(default_factory=ViTConfig)
    tactile: ViTConfig = TACTILE_VIT
    d_lm: int = 96
    lm_blocks: int = 4
    lm_heads: int = 4
    lm_mlp_ratio: float = 4.0
    text_vocab: int = 64
    bins: int = 256
    action_dims: int = 3
    chunk: int = 1
    text_len: int = 8
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant.parse(self.variant))
        object.__setattr__(self, "depth_variant", DepthVariant.parse(self.depth_variant))
        if self.d_lm % self.lm_heads:
            raise ConfigError(f"d_lm {self.d_lm} not divisible by {self.lm_heads} heads")
        if self.text_vocab < len(WORDS) + 1:
            raise ConfigError(f"text vocab {self.text_vocab} cannot hold {len(WORDS)} words plus UNK")
        if self.bins < 2 or self.action_dims < 1 or self.chunk < 1 or self.text_len < 2:
            raise ConfigError("bins >= 2, action_dims >= 1, chunk >= 1 and text_len >= 2 required")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.variant is Variant.TACFILM:
            select_film_blocks(self.depth_variant, self.vit.blocks)

    # vocabulary layout
    @property
    def action_base(self) -> int:
        return self.text_vocab

    @property
    def bos(self) -> int:
        return self.text_vocab + self.bins

    @property
    def eos(self) -> int:
        return self.bos + 1

    @property
    def pad(self) -> int:
        return self.bos + 2

    @property
    def vocab_size(self) -> int:
        return self.text_vocab + self.bins + 3

    # sequence layout
    @property
    def visual_tokens(self) -> int:
        return self.vit.tokens

    @property
    def tactile_tokens(self) -> int:
        return self.tactile.tokens if self.variant is Variant.TACTILE_CONCAT else 0

    @property
    def prefix_len(self) -> int:
        return self.visual_tokens + self.tactile_tokens + self.text_len

    @property
    def action_tokens(self) -> int:
        return self.action_dims * self.chunk

    @property
    def max_len(self) -> int:
        return self.prefix_len + self.action_tokens

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["depth_variant"] = self.depth_variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        d["vit"] = ViTConfig(**d["vit"])
        d["tactile"] = ViTConfig(**d["tactile"])
        return cls(**d)


# -- text --------------------------------------------------------------------

WORDS = sorted({w for s in sim._INSTRUCTIONS.values() for w in s.split()})
UNK = 0
_WORD_IDS = {w: i + 1 for i, w in enumerate(WORDS)}


def encode_text(text: str, config: PolicyConfig) -> np.ndarray:
    """Word ids (unknown words map to UNK), left-padded: ``PAD.. BOS w1 .. wn``."""
    ids = [_WORD_IDS.get(w, UNK) for w in text.lower().split()]
    if len(ids) + 1 > config.text_len:
        raise LengthError(f"instruction has {len(ids)} words; at most {config.text_len - 1} fit")
    return np.array([config.pad] * (config.text_len - 1 - len(ids)) + [config.bos] + ids, dtype=np.int64)


# -- action tokens -----------------------------------------------------------


def tokenize_action(a, stats: NormStats, config: PolicyConfig | None = None) -> np.ndarray:
    """``V_t + min(floor(clamp((a - lo) / (hi - lo), 0, 1) * K), K - 1)`` per dim."""
    config = config or PolicyConfig()
    a = np.asarray(a, dtype=np.float64)
    u = np.clip((a - stats.lo) / (stats.hi - stats.lo), 0.0, 1.0)
    bins = np.minimum(np.floor(u * config.bins).astype(np.int64), config.bins - 1)
    return config.action_base + bins


def detokenize_action(tokens, stats: NormStats, config: PolicyConfig | None = None) -> np.ndarray:
    """Bin centres: ``lo + (bin + 0.5) / K * (hi - lo)``."""
    config = config or PolicyConfig()
    tokens = np.asarray(tokens, dtype=np.int64)
    bins = tokens - config.action_base
    bad = (bins < 0) | (bins >= config.bins)
    if bad.any():
        raise DecodeError(f"token {int(tokens[bad].flat[0])} is not an action token [{config.action_base}, {config.action_base + config.bins})")
    return stats.lo + (bins + 0.5) / config.bins * (stats.hi - stats.lo)


# -- the model -----------------------------------------------------------------


@dataclass
class PolicyInput:
    """A batch of observations prepared for the policy."""

    rgb: np.ndarray  # [N, 48, 48, 3] in [0, 1]
    text: np.ndarray  # [N, text_len] token ids
    tactile: np.ndarray | None = None  # [N, 32, 32, 6] preprocessed pairs
    tactile_embedding: TactileEmbedding | None = None  # precomputed (frozen encoder)

    def __len__(self) -> int:
        return len(self.rgb)

    def subset(self, idx) -> "PolicyInput":
        emb = None
        if self.tactile_embedding is not None:
            emb = TactileEmbedding(Tensor(self.tactile_embedding.patch_features.data[idx]))
        tac = None if self.tactile is None else self.tactile[idx]
        return PolicyInput(self.rgb[idx], self.text[idx], tac, emb)


class Head(Module):
    """Final norm and output bias over the tied token embedding."""

    def __init__(self, d: int, vocab: int, dtype):
        self.norm = LayerNorm(d, dtype)
        self.bias = Parameter(np.zeros(vocab, dtype=dtype))


class Policy(Module):
    def __init__(self, config: PolicyConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.norm_stats: NormStats | None = None
        cfg, dt = config, config.np_dtype
        init = lambda name: rngmod.stream(seed, "init", name)  # noqa: E731
        self.visual = DualStreamBackbone(cfg.vit, init("visual"), dt)
        self.projector = MLP(self.visual.out_dim, cfg.d_lm, cfg.d_lm, init("projector"), dt)
        g = init("lm")
        self.tok_embed = Parameter((g.standard_normal((cfg.vocab_size, cfg.d_lm)) * 0.02).astype(dt))
        self.lm_pos = Parameter((g.standard_normal((cfg.max_len, cfg.d_lm)) * 0.02).astype(dt))
        self.lm_blocks = [Block(cfg.d_lm, cfg.lm_heads, cfg.lm_mlp_ratio, g, dt, causal=True) for _ in range(cfg.lm_blocks)]
        self.head = Head(cfg.d_lm, cfg.vocab_size, dt)
        self.tactile_encoder = None
        self.film = None
        self.concat = None
        if cfg.variant is not Variant.VISION_ONLY:
            self.tactile_encoder = TactileEncoder(cfg.tactile, init("tactile"), dt)
            self.tactile_encoder.freeze()
        if cfg.variant is Variant.TACFILM:
            blocks = select_film_blocks(cfg.depth_variant, cfg.vit.blocks)
            self.film = FiLMGenerator(cfg.tactile.embed_dim, cfg.vit.embed_dim, blocks, init("film"), dt)
        if cfg.variant is Variant.TACTILE_CONCAT:
            self.concat = ConcatProjector(cfg.tactile.embed_dim, cfg.d_lm, cfg.d_lm, init("concat"), dt)

    # -- pieces --

    def tactile_embedding(self, inputs: PolicyInput) -> TactileEmbedding | None:
        if self.tactile_encoder is None:
            return None
        if inputs.tactile_embedding is not None:
            return inputs.tactile_embedding
        if inputs.tactile is None:
            raise ConfigError(f"{self.config.variant.value} policy needs tactile input")
        if self.tactile_encoder.trainable():
            return self.tactile_encoder(inputs.tactile)
        with ad.no_grad():
            emb = self.tactile_encoder(inputs.tactile)
        return TactileEmbedding(Tensor(emb.patch_features.data), Tensor(emb.pooled.data))

    def prefix(self, inputs: PolicyInput) -> Tensor:
        """``[N, prefix_len, d_lm]`` embeddings before positions are added."""
        cfg = self.config
        emb = self.tactile_embedding(inputs)
        film_a = film_b = None
        if self.film is not None:
            film_a = self.film.for_stream(emb.pooled, "A")
            film_b = self.film.for_stream(emb.pooled, "B")
        fused = self.visual(inputs.rgb, film_a, film_b)
        parts = [self.projector(fused)]
        if self.concat is not None:
            parts.append(self.concat(emb.patch_features))
        text = np.asarray(inputs.text, dtype=np.int64)
        if text.shape[-1] != cfg.text_len:
            raise LengthError(f"text segment must have {cfg.text_len} tokens, got {text.shape[-1]}")
        parts.append(ad.embedding(self.tok_embed, text))
        return ad.concat(parts, axis=-2)

    def decode(self, prefix: Tensor, action_tokens: np.ndarray, positions=None) -> Tensor:
        """Run the decoder over prefix + action tokens; logits at ``positions`` (default: all)."""
        x = prefix
        action_tokens = np.asarray(action_tokens, dtype=np.int64)
        if action_tokens.shape[-1]:
            x = ad.concat([x, ad.embedding(self.tok_embed, action_tokens)], axis=-2)
        L = x.shape[-2]
        if L > self.config.max_len:
            raise LengthError(f"sequence of {L} tokens exceeds the configured maximum {self.config.max_len}")
        x = ad.add(x, self.lm_pos[:L])
        for block in self.lm_blocks:
            x, _ = block(x)
        if positions is not None:
            x = x[:, positions]
        h = self.head.norm(x)
        return ad.add(ad.matmul(h, ad.transpose(self.tok_embed)), self.head.bias)

    def sequence_length(self, inputs: PolicyInput) -> int:
        """Length of the input sequence the decoder sees before any action token."""
        return self.prefix(inputs).shape[-2]

    def base_parameters(self) -> list[tuple[str, Parameter]]:
        extra = ("film.", "concat.", "tactile_encoder.")
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(extra) and ".lora." not in n]


def build_policy(config: PolicyConfig, seed: int = 0) -> Policy:
    return Policy(config, seed)


def policy_forward(policy: Policy, inputs: PolicyInput, action_tokens_so_far=None) -> Tensor:
    """Next-token logits ``[N, vocab]`` after the prefix and the given action tokens."""
    toks = np.zeros((len(inputs), 0), dtype=np.int64) if action_tokens_so_far is None else np.asarray(action_tokens_so_far)
    if toks.ndim == 1:
        toks = np.broadcast_to(toks, (len(inputs), toks.shape[0]))
    logits = policy.decode(policy.prefix(inputs), toks, positions=[-1])
    return logits[:, 0]


def action_loss(policy: Policy, inputs: PolicyInput, targets: np.ndarray) -> Tensor:
    """Teacher-forced cross-entropy over the action tokens."""
    A = targets.shape[-1]
    P = policy.config.prefix_len
    logits = policy.decode(policy.prefix(inputs), targets[:, :-1], positions=list(range(P - 1, P - 1 + A)))
    return ad.softmax_cross_entropy(logits, targets)


def greedy_tokens(policy: Policy, inputs: PolicyInput, logit_hook=None) -> np.ndarray:
    """Greedy action tokens ``[N, action_dims * chunk]``; non-action logits are masked out."""
    cfg = policy.config
    with ad.no_grad():
        prefix = policy.prefix(inputs)
        toks = np.zeros((len(inputs), 0), dtype=np.int64)
        for _ in range(cfg.action_tokens):
            logits = policy.decode(prefix, toks, positions=[-1]).data[:, 0]
            if logit_hook is not None:
                logits = logit_hook(logits)
            masked = np.full_like(logits, -np.inf)
            lo, hi = cfg.action_base, cfg.action_base + cfg.bins
            masked[:, lo:hi] = logits[:, lo:hi]
            nxt = np.argmax(masked, axis=-1)  # first maximum, i.e. the lowest id on ties
            toks = np.concatenate([toks, nxt[:, None]], axis=1)
    return toks


def predict_action(policy: Policy, inputs: PolicyInput, logit_hook=None) -> np.ndarray:
    if policy.norm_stats is None:
        raise ConfigError("policy has no normalisation stats")
    toks = greedy_tokens(policy, inputs, logit_hook)
    return detokenize_action(toks, policy.norm_stats, policy.config)


# -- LoRA --------------------------------------------------------------------

DEFAULT_LORA_TARGETS = (
    "visual.stream_*.blocks.*.attn.*",
    "visual.stream_*.blocks.*.mlp.*",
    "lm_blocks.*.attn.*",
    "lm_blocks.*.mlp.*",
)
_NEW_MODULES = ("film", "concat", "head")


def lora_targets(policy: Policy, patterns=DEFAULT_LORA_TARGETS) -> list[tuple[str, Linear]]:
    out = []
    for name, mod in policy.named_modules():
        if isinstance(mod, Linear) and not name.startswith(_NEW_MODULES + ("tactile_encoder",)):
            if any(fnmatch.fnmatchcase(name, p) for p in patterns):
                out.append((name, mod))
    return out


def lora_wrap(policy: Policy, patterns=DEFAULT_LORA_TARGETS, r: int = 8, alpha: float = 16.0, seed: int | None = None) -> int:
    """Attach a LoRA branch to every matching linear and freeze the base.

    FiLM generators, the concat projector and the output head stay trainable.
    Returns the number of adapter parameters added.
    """
    targets = lora_targets(policy, patterns)
    if not targets:
        raise ConfigError(f"no linear layer matches {list(patterns)}")
    if any(m.lora is not None for _, m in targets):
        raise ConfigError("policy already carries LoRA adapters")
    g = rngmod.stream(policy.seed if seed is None else seed, "lora")
    dt = policy.config.np_dtype
    for _, lin in targets:
        lin.lora = LoRA(lin.d_in, lin.d_out, r, alpha, g, dt)
    for name, p in policy.named_parameters():
        p.frozen = not (".lora." in name or name.startswith(_NEW_MODULES))
    return sum(r * (lin.d_in + lin.d_out) for _, lin in targets)


def adapter_count(policy: Policy) -> int:
    return sum(m.lora.A.data.size + m.lora.B.data.size for _, m in policy.named_modules() if isinstance(m, Linear) and m.lora is not None)


def lora_merge(policy: Policy) -> Policy:
    """Copy of ``policy`` with every adapter folded into its base weight."""
    wrapped = [m for _, m in policy.named_modules() if isinstance(m, Linear) and m.lora is not None]
    if not wrapped:
        raise ConfigError("policy has no LoRA adapters to merge")
    merged = copy.deepcopy(policy)
    for _, lin in merged.named_modules():
        if isinstance(lin, Linear) and lin.lora is not None:
            lin.weight.data = (lin.weight.data + lin.lora.delta()).astype(lin.weight.dtype)
            lin.lora = None
    return merged


def with_variant(config: PolicyConfig, variant, depth_variant=None) -> PolicyConfig:
    return replace(config, variant=Variant.parse(variant), depth_variant=depth_variant or config.depth_variant)
