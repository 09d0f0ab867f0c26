"""Checkpoint files: a JSON manifest followed by raw little-endian float64 tensors.

Layout::

    magic    8 bytes  b"TVLACKPT"
    version  u8
    mlen     u32      then ``mlen`` bytes of UTF-8 JSON manifest
    payload  tensors in manifest order, each ``prod(shape)`` float64 values

The manifest lists every tensor's name, shape, sha256 of its payload bytes and
frozen flag, plus the model config, seed and normalisation stats.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .dataset import NormStats
from .encoders import TactileEncoder, ViTConfig
from .layers import Linear, LoRA, Module
from .policy import Policy, PolicyConfig

MAGIC = b"TVLACKPT"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int | None = None, tensor: str | None = None):
        bits = [message]
        if tensor is not None:
            bits.append(f"tensor {tensor!r}")
        if offset is not None:
            bits.append(f"byte {offset}")
        super().__init__(", ".join(bits))
        self.offset = offset
        self.tensor = tensor


def tensor_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def checksum(a: np.ndarray) -> str:
    return hashlib.sha256(tensor_bytes(a)).hexdigest()


def module_checksums(module: Module) -> dict[str, str]:
    return {name: checksum(p.data) for name, p in module.named_parameters()}


def _encode(manifest: dict, arrays: list[np.ndarray]) -> bytes:
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<BI", VERSION, len(text)) + text + b"".join(tensor_bytes(a) for a in arrays)


def _lora_manifest(module: Module) -> dict | None:
    wrapped = {n: m.lora for n, m in module.named_modules() if isinstance(m, Linear) and m.lora is not None}
    if not wrapped:
        return None
    first = next(iter(wrapped.values()))
    return {"targets": sorted(wrapped), "r": first.r, "alpha": first.alpha}


def encode_module(module: Module, kind: str, config: dict, seed: int, extra: dict | None = None) -> bytes:
    named = list(module.named_parameters())
    manifest = {
        "kind": kind,
        "config": config,
        "seed": seed,
        "lora": _lora_manifest(module),
        "tensors": [{"name": n, "shape": list(p.shape), "sha256": checksum(p.data), "frozen": p.frozen} for n, p in named],
    }
    manifest.update(extra or {})
    return _encode(manifest, [p.data for _, p in named])


def decode(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint; returns the manifest and tensors by name."""
    if len(data) < len(MAGIC) + 5:
        raise CheckpointError(f"file too short ({len(data)} bytes)", 0)
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {data[:len(MAGIC)]!r}", 0)
    version, mlen = struct.unpack_from("<BI", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", len(MAGIC))
    pos = len(MAGIC) + 5
    if pos + mlen > len(data):
        raise CheckpointError(f"manifest declares {mlen} bytes, {len(data) - pos} available", pos)
    try:
        manifest = json.loads(data[pos: pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable manifest: {e}", pos) from e
    pos += mlen
    tensors = {}
    for entry in manifest["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + n > len(data):
            raise CheckpointError(f"payload truncated: need {n} bytes, {len(data) - pos} left", pos, name)
        raw = data[pos: pos + n]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointError("checksum mismatch", pos, name)
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        pos += n
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes", pos)
    return manifest, tensors


def load_into(module: Module, manifest: dict, tensors: dict[str, np.ndarray]) -> None:
    named = dict(module.named_parameters())
    frozen = {e["name"]: e["frozen"] for e in manifest["tensors"]}
    missing = sorted(set(named) - set(tensors))
    if missing:
        raise CheckpointError("missing from checkpoint", tensor=missing[0])
    unexpected = sorted(set(tensors) - set(named))
    if unexpected:
        raise CheckpointError("not part of the model", tensor=unexpected[0])
    for name, p in named.items():
        if tuple(p.shape) != tensors[name].shape:
            raise CheckpointError(f"shape {tensors[name].shape} does not match model {p.shape}", tensor=name)
        p.data = tensors[name].astype(p.dtype)
        p.frozen = frozen[name]


def _attach_lora(module: Module, spec: dict | None) -> None:
    if not spec:
        return
    mods = dict(module.named_modules())
    for name in spec["targets"]:
        lin = mods.get(name)
        if not isinstance(lin, Linear):
            raise CheckpointError("LoRA target is not a linear layer", tensor=name)
        # values are overwritten by the payload; shapes are all that matter here
        lin.lora = LoRA(lin.d_in, lin.d_out, spec["r"], spec["alpha"], np.random.default_rng(0), lin.weight.dtype)


# -- policies ------------------------------------------------------------------


def save_policy(policy: Policy, path, extra: dict | None = None) -> Path:
    meta = {"norm_stats": policy.norm_stats.to_list() if policy.norm_stats is not None else None}
    meta.update(extra or {})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_module(policy, "policy", policy.config.to_dict(), policy.seed, meta))
    return path


def policy_from_bytes(data: bytes, dtype: str | None = None) -> tuple[Policy, dict]:
    manifest, tensors = decode(data)
    if manifest.get("kind") != "policy":
        raise CheckpointError(f"expected a policy checkpoint, found {manifest.get('kind')!r}")
    cfg = PolicyConfig.from_dict(manifest["config"])
    if dtype is not None:
        cfg = PolicyConfig.from_dict({**cfg.to_dict(), "dtype": dtype})
    policy = Policy(cfg, manifest["seed"])
    _attach_lora(policy, manifest.get("lora"))
    load_into(policy, manifest, tensors)
    if manifest.get("norm_stats") is not None:
        policy.norm_stats = NormStats.from_list(manifest["norm_stats"])
    return policy, manifest


def load_policy(path, dtype: str | None = None) -> Policy:
    return policy_from_bytes(Path(path).read_bytes(), dtype)[0]


def read_manifest(path) -> dict:
    return decode(Path(path).read_bytes())[0]


# -- tactile encoders ------------------------------------------------------------


def save_encoder(encoder: TactileEncoder, path, seed: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = encoder.config.__dict__.copy()
    path.write_bytes(encode_module(encoder, "tactile_encoder", cfg, seed, extra))
    return path


def load_encoder(path, dtype=np.float64) -> TactileEncoder:
    manifest, tensors = decode(Path(path).read_bytes())
    if manifest.get("kind") != "tactile_encoder":
        raise CheckpointError(f"expected a tactile encoder checkpoint, found {manifest.get('kind')!r}")
    enc = TactileEncoder(ViTConfig(**manifest["config"]), np.random.default_rng(0), dtype)
    load_into(enc, manifest, tensors)
    return enc
