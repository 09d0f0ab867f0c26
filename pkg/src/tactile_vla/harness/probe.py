"""Tactile encoder pretraining on the probe tasks, and linear-probe style evaluation."""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np

from .. import autodiff as ad
from .. import rng as rngmod
from ..dataset import ProbeSet, ProbeTask, make_probe_dataset
from ..encoders import TACTILE_VIT, TactileEncoder, ViTConfig
from ..layers import MLP, Module
from .evaluate import write_csv

log = logging.getLogger(__name__)

PROBE_TASKS = (ProbeTask.CONTACT, ProbeTask.ROTATION_HIGH, ProbeTask.ROTATION_LOW)


class PretrainDiverged(FloatingPointError):
    pass


def make_probe_sets(n: int = 2000, seed: int = 0) -> dict[ProbeTask, ProbeSet]:
    return {t: make_probe_dataset(t, n, seed) for t in PROBE_TASKS}


class _MultiHead(Module):
    def __init__(self, encoder: TactileEncoder, tasks, rng, dtype):
        self.encoder = encoder
        d = encoder.dim
        self.heads = {t.value: MLP(d, d, 2, rng, dtype) for t in tasks}


def pretrain_tactile(probe_sets: dict, config: ViTConfig = TACTILE_VIT, steps: int = 600, batch: int = 32,
                     lr: float = 1e-3, seed: int = 0, dtype=np.float32) -> tuple[TactileEncoder, list[float]]:
    """Multi-task training of the tactile ViT on the 80% pretraining splits.

    Each step sums the cross-entropy of one batch per probe task through a
    shared encoder and per-task heads.  The heads are dropped afterwards and the
    returned encoder is frozen.
    """
    encoder = TactileEncoder(config, rngmod.stream(seed, "init", "tactile"), dtype)
    model = _MultiHead(encoder, probe_sets, rngmod.stream(seed, "init", "probe_heads"), dtype)
    data = {}
    for t, ps in probe_sets.items():
        train, _ = ps.split(0.8)
        data[t] = (train.inputs(config.image_size).astype(dtype), train.labels)
    g = rngmod.stream(seed, "pretrain", "batches")
    state = ad.AdamState(lr=lr)
    params = model.trainable()
    losses = []
    for step in range(steps):
        model.zero_grad()
        total = None
        for t, (x, y) in data.items():
            idx = g.integers(len(y), size=batch)
            logits = model.heads[t.value](encoder(x[idx]).pooled)
            ce = ad.softmax_cross_entropy(logits, y[idx])
            total = ce if total is None else ad.add(total, ce)
        value = float(total.data)
        if not math.isfinite(value):
            raise PretrainDiverged(f"tactile pretraining loss {value} at step {step}; last finite loss {losses[-1] if losses else 'n/a'}")
        total.backward()
        ad.adam_step(params, state)
        losses.append(value)
        if step % 100 == 0:
            log.info("pretrain step %d loss %.4f", step, value)
    encoder.freeze()
    return encoder, losses


def random_encoder(config: ViTConfig = TACTILE_VIT, seed: int = 0, dtype=np.float32) -> TactileEncoder:
    enc = TactileEncoder(config, rngmod.stream(seed, "init", "tactile"), dtype)
    enc.freeze()
    return enc


def pooled_embeddings(encoder: TactileEncoder, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = []
    dt = encoder.vit.pos.dtype
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            out.append(encoder(images[i: i + chunk].astype(dt)).pooled.data.astype(np.float64))
    return np.concatenate(out)


def probe_accuracy(encoder: TactileEncoder, ps: ProbeSet, seed: int = 0, steps: int = 400, hidden: int = 64, lr: float = 3e-3) -> float:
    """Fresh two-layer MLP on frozen pooled embeddings; held-out (last 20%) accuracy."""
    train, test = ps.split(0.8)
    size = encoder.config.image_size
    ztr = pooled_embeddings(encoder, train.inputs(size))
    zte = pooled_embeddings(encoder, test.inputs(size))
    mu, sd = ztr.mean(0), ztr.std(0) + 1e-6
    ztr, zte = (ztr - mu) / sd, (zte - mu) / sd
    head = MLP(ztr.shape[1], hidden, 2, rngmod.stream(seed, "probe_head", ps.probe_task.value))
    state = ad.AdamState(lr=lr)
    x = ad.Tensor(ztr)
    for _ in range(steps):
        head.zero_grad()
        loss = ad.softmax_cross_entropy(head(x), train.labels)
        loss.backward()
        ad.adam_step(head.parameters(), state)
    with ad.no_grad():
        pred = np.argmax(head(ad.Tensor(zte)).data, axis=-1)
    return float(np.mean(pred == test.labels))


def probe_eval(encoders: dict[str, TactileEncoder], probe_sets: dict, seed: int = 0, steps: int = 400) -> dict[str, dict[str, float]]:
    """Accuracy table ``{probe task: {encoder name: accuracy}}``."""
    return {t.value: {name: probe_accuracy(enc, ps, seed, steps) for name, enc in encoders.items()} for t, ps in probe_sets.items()}


def write_probe_table(table: dict, path) -> Path:
    names = list(next(iter(table.values())).keys()) if table else []
    rows = [{"probe_task": t, **{n: f"{100 * acc:.2f}" for n, acc in accs.items()}} for t, accs in table.items()]
    return write_csv(rows, path, ["probe_task", *names])
