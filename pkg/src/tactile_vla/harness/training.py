"""Behaviour cloning and LoRA finetuning."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from .. import rng as rngmod
from ..checkpoint import save_policy
from ..dataset import EpisodeRecord, NormStats, compute_norm_stats, read_episodes
from ..encoders import TactileEmbedding, TactileEncoder
from ..errors import ConfigError
from ..policy import Policy, PolicyInput, Variant, action_loss, build_policy, encode_text, lora_wrap, tokenize_action
from ..rollout import dequantize
from .config import TrainConfig

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_good: Path | None, cause: str):
        msg = f"loss became non-finite at step {step} ({cause})"
        if last_good is not None:
            msg += f"; last good checkpoint written to {last_good}"
        super().__init__(msg)
        self.step = step
        self.last_good = last_good


def load_records(sources) -> list[EpisodeRecord]:
    """Accepts record lists, a single path or a list of paths."""
    if isinstance(sources, (str, Path)):
        return read_episodes(sources)
    out = []
    for s in sources:
        if isinstance(s, EpisodeRecord):
            out.append(s)
        else:
            out.extend(read_episodes(s))
    return out


@dataclass
class BCData:
    """Flattened (episode, step) table with tokenised targets."""

    rgb: np.ndarray  # uint8 [S, 48, 48, 3]
    text: np.ndarray  # [S, text_len]
    tokens: np.ndarray  # [S, action tokens]
    episode_start: np.ndarray
    episode_len: np.ndarray
    tactile: np.ndarray | None = None  # float [S, 32, 32, 6]
    tactile_features: np.ndarray | None = None  # cached encoder patch features

    def __len__(self) -> int:
        return len(self.tokens)

    def sample(self, g: np.random.Generator, batch: int) -> np.ndarray:
        """Uniform episode, then uniform step within it."""
        ep = g.integers(len(self.episode_len), size=batch)
        off = np.floor(g.random(batch) * self.episode_len[ep]).astype(np.int64)
        return self.episode_start[ep] + off

    def inputs(self, idx, dtype) -> PolicyInput:
        emb = None
        if self.tactile_features is not None:
            emb = TactileEmbedding(ad.Tensor(self.tactile_features[idx]))
        tac = None if self.tactile is None or emb is not None else self.tactile[idx].astype(dtype)
        return PolicyInput(dequantize(self.rgb[idx]).astype(dtype), self.text[idx], tac, emb)


def build_bc_data(records: list[EpisodeRecord], policy: Policy, stats: NormStats) -> BCData:
    cfg = policy.config
    rgb, text, toks, tac = [], [], [], []
    starts, lens = [], []
    pos = 0
    need_tactile = policy.tactile_encoder is not None
    for rec in records:
        T = len(rec)
        starts.append(pos)
        lens.append(T)
        pos += T
        rgb.append(rec.rgb)
        text.append(np.repeat(encode_text(rec.instruction, cfg)[None], T, axis=0))
        for t in range(T):
            chunk = [rec.action[min(t + h, T - 1)] for h in range(cfg.chunk)]
            toks.append(np.concatenate([tokenize_action(a, stats, cfg) for a in chunk]))
            if need_tactile:
                tac.append(rec.tactile_input(t, cfg.tactile.image_size))
    data = BCData(
        np.concatenate(rgb), np.concatenate(text), np.array(toks, dtype=np.int64), np.array(starts), np.array(lens),
        np.array(tac, dtype=cfg.np_dtype) if need_tactile else None,
    )
    if need_tactile and not policy.tactile_encoder.trainable():
        data.tactile_features = encode_frozen(policy.tactile_encoder, data.tactile)
    return data


def encode_frozen(encoder: TactileEncoder, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            out.append(encoder(images[i: i + chunk]).patch_features.data)
    return np.concatenate(out) if out else np.zeros((0,))


@dataclass
class TrainResult:
    policy: Policy
    losses: list[float] = field(default_factory=list)
    log: list[tuple[int, float]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _snapshot(policy: Policy) -> dict[str, np.ndarray]:
    return {n: p.data.copy() for n, p in policy.named_parameters()}


def fit(policy: Policy, data: BCData, cfg: TrainConfig, out_dir=None, tag: str = "policy") -> TrainResult:
    """Adam on teacher-forced action cross-entropy over the policy's trainable tensors."""
    g = rngmod.stream(cfg.seed, "train", tag)
    state = ad.AdamState(lr=cfg.lr)
    params = policy.trainable()
    res = TrainResult(policy)
    out_dir = Path(out_dir) if out_dir is not None else None
    last_good = _snapshot(policy)
    dtype = policy.config.np_dtype
    for step in range(cfg.steps):
        idx = np.sort(data.sample(g, cfg.batch_size))
        policy.zero_grad()
        try:
            loss = action_loss(policy, data.inputs(idx, dtype), data.tokens[idx])
            value = float(loss.data)
            if not math.isfinite(value):
                raise ad.NonFiniteError(f"loss = {value}")
            loss.backward()
        except ad.NonFiniteError as e:
            path = None
            if out_dir is not None:
                for n, p in policy.named_parameters():
                    p.data = last_good[n]
                path = save_policy(policy, out_dir / f"{tag}_last_good.ckpt", {"step": step})
            raise TrainingDiverged(step, path, str(e)) from e
        ad.adam_step(params, state, cfg.lr_at(step))
        res.losses.append(value)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            res.log.append((step, value))
            log.info("%s step %d loss %.4f", tag, step, value)
            last_good = _snapshot(policy)
        if out_dir is not None and cfg.ckpt_every and step and step % cfg.ckpt_every == 0:
            res.checkpoints.append(save_policy(policy, out_dir / f"{tag}_step{step}.ckpt", {"step": step}))
    if out_dir is not None:
        res.checkpoints.append(save_policy(policy, out_dir / f"{tag}.ckpt", {"step": cfg.steps, "train_log": res.log}))
    return res


def train(demos, cfg: TrainConfig, encoder: TactileEncoder | None = None, out_dir=None, variant=None, tag=None) -> TrainResult:
    """Behaviour cloning from scratch.  Tactile variants need a (frozen) pretrained encoder."""
    records = load_records(demos)
    pcfg = cfg.policy_config(variant)
    policy = build_policy(pcfg, cfg.seed)
    if policy.tactile_encoder is not None:
        if encoder is None:
            raise ConfigError(f"{pcfg.variant.value} needs a pretrained tactile encoder")
        attach_encoder(policy, encoder)
    policy.norm_stats = compute_norm_stats(records)
    data = build_bc_data(records, policy, policy.norm_stats)
    return fit(policy, data, cfg, out_dir, tag or f"policy_{pcfg.variant.value}")


def attach_encoder(policy: Policy, encoder: TactileEncoder) -> None:
    enc = copy.deepcopy(encoder)
    enc.freeze()
    if enc.config != policy.config.tactile:
        raise ConfigError("tactile encoder shape does not match the policy config")
    for p in enc.parameters():
        p.data = p.data.astype(policy.config.np_dtype)
    policy.tactile_encoder = enc


def finetune_init(base: Policy, variant, encoder: TactileEncoder, r: int = 8, alpha: float = 16.0, depth_variant=None) -> tuple[Policy, int]:
    """Tactile variant that starts as an exact copy of ``base`` with LoRA on its linears."""
    variant = Variant.parse(variant)
    if variant is Variant.VISION_ONLY:
        raise ConfigError("finetuning to VisionOnly adds nothing to fuse")
    cfg = base.config
    new_cfg = type(cfg).from_dict({**cfg.to_dict(), "variant": variant.value, "depth_variant": (depth_variant or cfg.depth_variant)})
    policy = build_policy(new_cfg, base.seed)
    src = dict(base.base_parameters())
    for name, p in policy.base_parameters():
        if name == "lm_pos" and p.shape[0] > src[name].shape[0]:
            # concat tokens lengthen the sequence; positions past the base's keep their fresh init
            p.data[: src[name].shape[0]] = src[name].data
        else:
            p.data = src[name].data.copy()
    policy.norm_stats = base.norm_stats
    attach_encoder(policy, encoder)
    n = lora_wrap(policy, r=r, alpha=alpha)
    return policy, n


def finetune(base: Policy, demos, cfg: TrainConfig, encoder: TactileEncoder, variant=None, out_dir=None, tag=None) -> TrainResult:
    variant = Variant.parse(variant or cfg.variant)
    policy, n = finetune_init(base, variant, encoder, cfg.lora_r, cfg.lora_alpha, cfg.depth_variant)
    log.info("finetune %s: %d adapter parameters", variant.value, n)
    records = load_records(demos)
    data = build_bc_data(records, policy, policy.norm_stats)
    return fit(policy, data, cfg, out_dir, tag or f"finetune_{variant.value}")
