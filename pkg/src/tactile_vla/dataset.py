"""Demonstration collection, episode/probe files, normalisation stats and probe sets.

File layout (all integers little-endian)::

    magic   8 bytes  b"TVLAEPIS" (episodes) or b"TVLAPROB" (probes)
    version u8
    hlen    u32      then ``hlen`` bytes of UTF-8 ``key=value`` lines
    blocks  per record: u64 length, then the record body

Images are stored as uint8 (value = round(255 * x)); scalars as float64.
"""

from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from . import sim
from .errors import ConfigError
from .encoders import area_resize, tactile_preprocess
from .rollout import ExpertController, dequantize, quantize, run_episodes

VERSION = 1
EPISODE_MAGIC = b"TVLAEPIS"
PROBE_MAGIC = b"TVLAPROB"


class FormatError(ValueError):
    """Malformed file; carries the byte offset and, when known, the record index."""

    def __init__(self, message: str, offset: int, index: int | None = None):
        where = f"at byte {offset}" + (f" (episode {index})" if index is not None else "")
        super().__init__(f"{message} {where}")
        self.offset = offset
        self.index = index


# -- records -----------------------------------------------------------------


@dataclass
class EpisodeRecord:
    task: str
    instruction: str
    rgb: np.ndarray  # uint8 [T, 48, 48, 3]
    tactile: np.ndarray  # uint8 [T, 32, 32, 3]
    proprio: np.ndarray  # float64 [T, 3]
    action: np.ndarray  # float64 [T, 3]
    force: np.ndarray  # float64 [T], contact force seen before acting
    seed: int = 0
    success: bool = True
    direct: bool = False
    max_force: float = 0.0

    def __post_init__(self):
        n = len(self.rgb)
        for name in ("tactile", "proprio", "action", "force"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} steps, rgb has {n}")

    def __len__(self) -> int:
        return len(self.rgb)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EpisodeRecord):
            return NotImplemented
        scalars = ("task", "instruction", "seed", "success", "direct", "max_force")
        arrays = ("rgb", "tactile", "proprio", "action", "force")
        return all(getattr(self, k) == getattr(other, k) for k in scalars) and all(
            getattr(self, k).dtype == getattr(other, k).dtype and np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays
        )

    def tactile_input(self, t: int, size: int = 32) -> np.ndarray:
        """Preprocessed tactile pair at step ``t`` (background = first frame)."""
        lo = max(0, t - 5)
        hist = [dequantize(f) for f in self.tactile[lo: t + 1]]
        return tactile_preprocess(hist, t - lo, dequantize(self.tactile[0]), size)


class ProbeTask(str, enum.Enum):
    CONTACT = "Contact"
    ROTATION_HIGH = "RotationHigh"
    ROTATION_LOW = "RotationLow"

    @classmethod
    def parse(cls, value) -> "ProbeTask":
        if isinstance(value, cls):
            return value
        for p in cls:
            if p.value.lower() == str(value).lower():
                return p
        raise ValueError(f"unknown probe task {value!r}")


@dataclass
class ProbeExample:
    pair: np.ndarray  # uint8 [32, 32, 6]; the two raw frames, older first
    label: int
    probe_task: ProbeTask

    def preprocessed(self, size: int = 32) -> np.ndarray:
        old, new = dequantize(self.pair[..., :3]), dequantize(self.pair[..., 3:])
        return tactile_preprocess([old, new], 1, old, size)


@dataclass
class ProbeSet:
    probe_task: ProbeTask
    pairs: np.ndarray  # uint8 [N, 32, 32, 6]
    labels: np.ndarray  # int64 [N]
    seed: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i) -> ProbeExample:
        return ProbeExample(self.pairs[i], int(self.labels[i]), self.probe_task)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProbeSet):
            return NotImplemented
        return (
            self.probe_task == other.probe_task
            and self.seed == other.seed
            and np.array_equal(self.pairs, other.pairs)
            and np.array_equal(self.labels, other.labels)
        )

    def inputs(self, size: int = 32) -> np.ndarray:
        """Background-subtracted inputs for the tactile encoder, ``[N, size, size, 6]``.

        The stored older frame is the background, as the first frame is in an episode.
        """
        x = dequantize(self.pairs)
        bg = x[..., :3]
        x = np.clip(x - np.concatenate([bg, bg], axis=-1), 0.0, 1.0)
        return area_resize(x, size)

    def split(self, frac: float = 0.8) -> tuple["ProbeSet", "ProbeSet"]:
        """Split by example index; generation already shuffled the order."""
        k = int(round(frac * len(self)))
        return (
            ProbeSet(self.probe_task, self.pairs[:k], self.labels[:k], self.seed),
            ProbeSet(self.probe_task, self.pairs[k:], self.labels[k:], self.seed),
        )


# -- container ---------------------------------------------------------------


def _header_bytes(magic: bytes, meta: dict) -> bytes:
    text = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    return magic + struct.pack("<BI", VERSION, len(text)) + text


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.index = None

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated {what}: need {n} bytes, {len(self.data) - self.pos} left", self.pos, self.index)
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype, shape, what: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        n = int(np.prod(shape)) * dt.itemsize
        return np.frombuffer(self.take(n, what), dtype=dt).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<I", what + " length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(f"{what} is not UTF-8", self.pos - n, self.index) from e


def _read_header(r: _Reader, magic: bytes) -> dict:
    got = r.take(len(magic), "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}", 0)
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise FormatError(f"unsupported format version {version} (expected {VERSION})", len(magic))
    (hlen,) = r.unpack("<I", "header length")
    start = r.pos
    text = r.take(hlen, "header").decode("utf-8", errors="strict")
    meta = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"header line without '=': {line!r}", start)
        k, v = line.split("=", 1)
        meta[k] = v
    return meta


def _put_str(buf: io.BytesIO, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def _episode_body(rec: EpisodeRecord) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(rec)))
    _put_str(buf, rec.task)
    _put_str(buf, rec.instruction)
    buf.write(struct.pack("<qBBd", rec.seed, rec.success, rec.direct, rec.max_force))
    buf.write(np.ascontiguousarray(rec.rgb, dtype=np.uint8).tobytes())
    buf.write(np.ascontiguousarray(rec.tactile, dtype=np.uint8).tobytes())
    for a in (rec.proprio, rec.action, rec.force):
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def encode_episodes(records: list[EpisodeRecord]) -> bytes:
    tasks = sorted({r.task for r in records})
    meta = {
        "kind": "episodes",
        "rgb": f"{sim.RGB_SIZE}x{sim.RGB_SIZE}x3",
        "tactile": f"{sim.TACTILE_SIZE}x{sim.TACTILE_SIZE}x3",
        "proprio_dim": 3,
        "action_dim": 3,
        "hz": round(1 / sim.DT),
        "count": len(records),
        "steps": sum(len(r) for r in records),
        "tasks": ",".join(tasks),
    }
    for name in tasks:
        t = sim.get_task(name) if name in sim.TASKS else None
        if t is not None:
            meta[f"task.{name}"] = f"{t.peg_shape.value};clearance={t.clearance};depth={t.insertion_depth_required}"
    out = io.BytesIO()
    out.write(_header_bytes(EPISODE_MAGIC, meta))
    for rec in records:
        body = _episode_body(rec)
        out.write(struct.pack("<Q", len(body)))
        out.write(body)
    return out.getvalue()


def _dims(meta: dict, key: str) -> tuple[int, ...]:
    return tuple(int(v) for v in meta[key].split("x"))


def decode_episodes(data: bytes) -> tuple[dict, list[EpisodeRecord]]:
    r = _Reader(data)
    meta = _read_header(r, EPISODE_MAGIC)
    try:
        count = int(meta["count"])
        rgb_shape, tac_shape = _dims(meta, "rgb"), _dims(meta, "tactile")
        pd, ad_ = int(meta["proprio_dim"]), int(meta["action_dim"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"incomplete header: {e}", 0) from e
    records = []
    for i in range(count):
        r.index = i
        (blen,) = r.unpack("<Q", "block length")
        start = r.pos
        if start + blen > len(data):
            raise FormatError(f"block declares {blen} bytes but only {len(data) - start} remain", start, i)
        T = r.unpack("<I", "step count")[0]
        task = r.string("task")
        instr = r.string("instruction")
        seed, success, direct, max_force = r.unpack("<qBBd", "outcome")
        rgb = r.array(np.uint8, (T, *rgb_shape), "rgb frames")
        tac = r.array(np.uint8, (T, *tac_shape), "tactile frames")
        prop = r.array(np.float64, (T, pd), "proprio")
        act = r.array(np.float64, (T, ad_), "actions")
        force = r.array(np.float64, (T,), "forces")
        if r.pos - start != blen:
            raise FormatError(f"block length {blen} disagrees with contents ({r.pos - start})", start, i)
        records.append(EpisodeRecord(task, instr, rgb, tac, prop, act, force, seed, bool(success), bool(direct), max_force))
    r.index = None
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after {count} episodes", r.pos)
    return meta, records


def write_episodes(records: list[EpisodeRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_episodes(records))
    return path


def read_episodes(path) -> list[EpisodeRecord]:
    return decode_episodes(Path(path).read_bytes())[1]


def read_episode_header(path) -> dict:
    return _read_header(_Reader(Path(path).read_bytes()), EPISODE_MAGIC)


def encode_probes(ps: ProbeSet) -> bytes:
    n, h, w, c = ps.pairs.shape if len(ps) else (0, sim.TACTILE_SIZE, sim.TACTILE_SIZE, 6)
    meta = {"kind": "probe", "probe_task": ps.probe_task.value, "pair": f"{h}x{w}x{c}", "count": n, "seed": ps.seed}
    out = io.BytesIO()
    out.write(_header_bytes(PROBE_MAGIC, meta))
    for i in range(n):
        body = struct.pack("<B", int(ps.labels[i])) + np.ascontiguousarray(ps.pairs[i], dtype=np.uint8).tobytes()
        out.write(struct.pack("<Q", len(body)))
        out.write(body)
    return out.getvalue()


def decode_probes(data: bytes) -> ProbeSet:
    r = _Reader(data)
    meta = _read_header(r, PROBE_MAGIC)
    try:
        count, shape = int(meta["count"]), _dims(meta, "pair")
        task, seed = ProbeTask.parse(meta["probe_task"]), int(meta["seed"])
    except (KeyError, ValueError) as e:
        raise FormatError(f"incomplete header: {e}", 0) from e
    pairs = np.zeros((count, *shape), dtype=np.uint8)
    labels = np.zeros(count, dtype=np.int64)
    for i in range(count):
        r.index = i
        (blen,) = r.unpack("<Q", "block length")
        start = r.pos
        (labels[i],) = r.unpack("<B", "label")
        pairs[i] = r.array(np.uint8, shape, "tactile pair")
        if r.pos - start != blen:
            raise FormatError(f"block length {blen} disagrees with contents ({r.pos - start})", start, i)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after {count} examples", r.pos)
    return ProbeSet(task, pairs, labels, seed)


def write_probes(ps: ProbeSet, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_probes(ps))
    return path


def read_probes(path) -> ProbeSet:
    return decode_probes(Path(path).read_bytes())


# -- demo collection ---------------------------------------------------------

DEFAULT_NOISE = 0.3
SUCCESS_WINDOW = 20


def trace_to_record(trace, task: sim.TaskSpec) -> EpisodeRecord:
    """Per-step rows pair the observation before action ``t`` with that action."""
    T = len(trace.actions)
    states = trace.states[:T]
    force = np.array([0.0] + [i.contact_force for i in trace.infos[: T - 1]])
    out = trace.outcome
    return EpisodeRecord(
        task=task.name,
        instruction=task.instruction,
        rgb=np.stack(trace.rgb),
        tactile=np.stack(trace.tactile),
        proprio=np.array([s.pose for s in states]),
        action=np.stack(trace.actions),
        force=force,
        seed=trace.seed,
        success=out.success,
        direct=out.direct,
        max_force=out.max_force,
    )


def demo_seeds(seed: int, task: str, count: int) -> np.ndarray:
    """Episode seeds for collection; drawn from the ``demo`` stream, far above the eval range."""
    return rngmod.stream(seed, "demo", task).integers(1 << 20, 1 << 31, size=count)


def collect_demos(task, n_demos: int = 80, noise_scale: float = DEFAULT_NOISE, seed: int = 0, path=None, window: int = SUCCESS_WINDOW):
    """Roll the scripted expert until ``n_demos`` successes; failures are dropped.

    Returns the records (and writes them when ``path`` is given).  Raises
    ``ConfigError`` if a window of attempts succeeds less than half the time.
    """
    task = sim.get_task(task) if isinstance(task, str) else task
    records: list[EpisodeRecord] = []
    attempts = 0
    seeds = demo_seeds(seed, task.name, 64 * max(n_demos, 1) + window)
    while len(records) < n_demos:
        batch = seeds[attempts: attempts + window]
        if len(batch) == 0:
            raise ConfigError(f"ran out of seeds after {attempts} attempts on {task.name}")
        traces = run_episodes(task, batch, ExpertController(noise_scale))
        attempts += len(batch)
        ok = [t for t in traces if t.outcome.success]
        if len(ok) < 0.5 * len(batch):
            raise ConfigError(f"expert succeeded on {len(ok)}/{len(batch)} episodes of {task.name}; environment too hard")
        for t in ok:
            if len(records) < n_demos:
                records.append(trace_to_record(t, task))
    if path is not None:
        write_episodes(records, path)
    return records


# -- normalisation -----------------------------------------------------------


class DegenerateStatsError(ValueError):
    pass


@dataclass
class NormStats:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        bad = np.nonzero(~(self.lo < self.hi))[0]
        if len(bad):
            d = int(bad[0])
            raise DegenerateStatsError(f"action dim {d} has lo={self.lo[d]} >= hi={self.hi[d]}")

    def to_list(self) -> list:
        return [self.lo.tolist(), self.hi.tolist()]

    @classmethod
    def from_list(cls, v) -> "NormStats":
        return cls(np.array(v[0]), np.array(v[1]))


def nearest_rank(sorted_values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * N)``-th smallest value (1-based)."""
    n = len(sorted_values)
    rank = max(1, math.ceil(p / 100.0 * n))
    return float(sorted_values[min(rank, n) - 1])


def action_percentiles(actions: np.ndarray, lo_p: float = 1.0, hi_p: float = 99.0) -> tuple[np.ndarray, np.ndarray]:
    a = np.sort(np.asarray(actions, dtype=np.float64), axis=0)
    lo = np.array([nearest_rank(a[:, d], lo_p) for d in range(a.shape[1])])
    hi = np.array([nearest_rank(a[:, d], hi_p) for d in range(a.shape[1])])
    return lo, hi


def compute_norm_stats(source, widen: float | None = None) -> NormStats:
    """Per-dim 1st/99th percentile of all recorded actions.

    ``source`` is a demo file path or a list of records.  A dimension with
    ``lo == hi`` is rejected unless ``widen`` is given, in which case it becomes
    ``[lo - widen, hi + widen]`` (the relaxed mode used in tests, ``widen=1e-6``).
    """
    records = read_episodes(source) if isinstance(source, (str, Path)) else list(source)
    if not records or sum(len(r) for r in records) == 0:
        raise ValueError("cannot compute normalisation stats from an empty demo set")
    lo, hi = action_percentiles(np.concatenate([r.action for r in records]))
    if widen is not None:
        flat = lo >= hi
        lo = np.where(flat, lo - widen, lo)
        hi = np.where(flat, hi + widen, hi)
    return NormStats(lo, hi)


# -- probe datasets ----------------------------------------------------------


def _probe_frame(shape: sim.PegShape, force: float, theta: float, shear: float, contact_point: float) -> np.ndarray:
    if force <= 0.0:
        return sim.TACTILE_REFERENCE.copy()
    blob = sim.tactile_blob(shape, force, contact_point, shear, theta)
    return np.clip(sim.TACTILE_REFERENCE + blob[..., None] * sim._TINT, 0.0, 1.0)


def make_probe_dataset(probe_task, n: int = 2000, seed: int = 0) -> ProbeSet:
    """Balanced binary tactile probe set rendered with the simulator's gel model.

    Each example is an (older, current) frame pair.  The older frame is the
    no-contact reference, as when a grasped peg first touches down.
    """
    task = ProbeTask.parse(probe_task)
    g = rngmod.stream(seed, "probe", task.value)
    labels = np.zeros(n, dtype=np.int64)
    labels[: n // 2] = 1
    g.shuffle(labels)
    shapes = list(sim.PegShape)
    pairs = np.zeros((n, sim.TACTILE_SIZE, sim.TACTILE_SIZE, 6), dtype=np.uint8)
    ref = quantize(sim.TACTILE_REFERENCE)
    for i, y in enumerate(labels):
        shape = shapes[g.integers(len(shapes))]
        cp = g.uniform(-6.0, 6.0)
        sign = 1.0 if g.random() < 0.5 else -1.0
        if task is ProbeTask.CONTACT:
            force = g.uniform(2.0, 15.0) if y else 0.0
            theta = g.uniform(-0.15, 0.15)
            shear = g.uniform(-0.6, 0.6)
        else:
            force = g.uniform(2.0, 15.0)
            lo, hi = (0.10, 0.15) if task is ProbeTask.ROTATION_HIGH else (0.03, 0.06)
            theta = sign * (g.uniform(lo, hi) if y else g.uniform(0.0, 0.01))
            shear = 0.0
        frame = _probe_frame(shape, force, theta, shear, cp)
        pairs[i, ..., :3] = ref
        pairs[i, ..., 3:] = quantize(frame)
    return ProbeSet(task, pairs, labels, seed)
