"""Seeded rollout evaluation, per-episode CSVs and aggregate metrics.

Per-episode CSV columns: ``method, task, camera, seed, outcome, success, direct,
max_force, time_s, steps, retreats, contact_steps``.  Every aggregate is a pure
function of these rows.  Force series CSV columns: ``method, task, camera, seed,
step, force`` with one row per contact step.

``max_force`` is 0 for an episode that never touched anything, and the
summary average includes such episodes.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import sim
from ..policy import Policy, PolicyInput, encode_text, predict_action
from ..rollout import ExpertController, dequantize, run_episodes

EPISODE_COLUMNS = ["method", "task", "camera", "seed", "outcome", "success", "direct", "max_force", "time_s", "steps", "retreats", "contact_steps"]
SERIES_COLUMNS = ["method", "task", "camera", "seed", "step", "force"]
BASE_SEED = 1000


def eval_seeds(n: int, base_seed: int = BASE_SEED) -> list[int]:
    return list(range(base_seed, base_seed + n))


class PolicyController:
    """Greedy policy over a batch of live episodes."""

    def __init__(self, policy: Policy):
        self.policy = policy

    def inputs(self, contexts) -> PolicyInput:
        cfg = self.policy.config
        dt = cfg.np_dtype
        rgb = np.stack([dequantize(c.rgb) for c in contexts]).astype(dt)
        text = np.stack([encode_text(c.task.instruction, cfg) for c in contexts])
        tac = None
        if self.policy.tactile_encoder is not None:
            tac = np.stack([c.tactile_pair(cfg.tactile.image_size) for c in contexts]).astype(dt)
        return PolicyInput(rgb, text, tac)

    def act(self, contexts) -> np.ndarray:
        return predict_action(self.policy, self.inputs(contexts))


@dataclass
class RolloutMetrics:
    n_episodes: int
    success_rate: float
    direct_rate: float
    avg_max_force: float
    std_max_force: float
    avg_time: float
    std_time: float

    @classmethod
    def from_rows(cls, rows: list[dict]) -> "RolloutMetrics":
        n = len(rows)
        if n == 0:
            return cls(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
        succ = np.array([int(r["success"]) for r in rows])
        direct = np.array([int(r["direct"]) for r in rows])
        force = np.array([float(r["max_force"]) for r in rows])
        time = np.array([float(r["time_s"]) for r in rows])
        return cls(n, 100.0 * succ.mean(), 100.0 * direct.mean(), force.mean(), force.std(), time.mean(), time.std())

    def as_row(self) -> dict:
        return {
            "n_episodes": self.n_episodes,
            "success_rate": round(self.success_rate, 4),
            "direct_rate": round(self.direct_rate, 4),
            "avg_max_force": round(self.avg_max_force, 6),
            "std_max_force": round(self.std_max_force, 6),
            "avg_time": round(self.avg_time, 6),
            "std_time": round(self.std_time, 6),
        }


@dataclass
class EvalResult:
    metrics: RolloutMetrics
    rows: list[dict]
    series: list[dict]
    traces: list


def trace_rows(traces, method: str, camera: str) -> tuple[list[dict], list[dict]]:
    rows, series = [], []
    for tr in traces:
        o = tr.outcome
        rows.append({
            "method": method, "task": tr.task, "camera": camera, "seed": tr.seed, "outcome": o.label,
            "success": int(o.success), "direct": int(o.direct), "max_force": repr(float(o.max_force)),
            "time_s": repr(round(o.steps * sim.DT, 10)), "steps": o.steps, "retreats": o.retreats, "contact_steps": o.contact_steps,
        })
        for i, info in enumerate(tr.infos[: o.steps]):
            if info.contact_force > 0:
                series.append({"method": method, "task": tr.task, "camera": camera, "seed": tr.seed, "step": i + 1, "force": repr(float(info.contact_force))})
    return rows, series


def evaluate(policy: Policy | None, task, n_episodes: int = 30, camera_mode="Clean", seed: int = BASE_SEED,
             method: str | None = None, expert_noise: float | None = None, seeds=None, max_steps: int = sim.MAX_STEPS) -> EvalResult:
    """Run ``n_episodes`` greedy rollouts on seeds ``seed, seed + 1, ...``.

    With ``policy=None`` the scripted expert drives instead (bypass mode, noise
    ``expert_noise``); episode seeding is identical to demo collection.
    """
    task = sim.get_task(task) if isinstance(task, str) else task
    mode = sim.CameraMode.parse(camera_mode)
    if policy is None:
        controller = ExpertController(0.3 if expert_noise is None else expert_noise)
        method = method or "Expert"
    else:
        controller = PolicyController(policy)
        method = method or policy.config.variant.value
    seeds = list(seeds) if seeds is not None else eval_seeds(n_episodes, seed)
    traces = run_episodes(task, seeds, controller, mode, max_steps, keep_frames=False)
    rows, series = trace_rows(traces, method, mode.value)
    return EvalResult(RolloutMetrics.from_rows(rows), rows, series, traces)


def write_csv(rows: list[dict], path, columns) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r[c] for c in columns})
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))
