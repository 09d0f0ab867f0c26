"""Ablation sweeps: FiLM depth placement and camera degradation."""

from __future__ import annotations

from pathlib import Path
from typing import Callable

from ..fusion import DepthVariant
from ..policy import Policy
from .evaluate import EPISODE_COLUMNS, RolloutMetrics, eval_seeds, evaluate, write_csv

DEPTH_TASKS = ("circle3", "pentagon3")  # one in-distribution, one out-of-distribution
CAMERA_CONDITIONS = ("Dim80", "Freeze50")
CAMERA_METHODS = ("VisionOnly", "TactileConcat", "TacFiLM")
ABLATION_COLUMNS = ["suite", "method", "task", "camera", "seeds", "n_episodes", "success_rate", "direct_rate",
                    "avg_max_force", "std_max_force", "avg_time", "std_time"]


def seed_label(seeds: list[int]) -> str:
    """Compact, auditable seed set: ``a-b`` for a contiguous run, else a ``;`` list."""
    if seeds and seeds == list(range(seeds[0], seeds[0] + len(seeds))):
        return f"{seeds[0]}-{seeds[-1]}"
    return ";".join(map(str, seeds))


def _row(suite: str, method: str, task: str, camera: str, seeds, metrics: RolloutMetrics) -> dict:
    return {"suite": suite, "method": method, "task": task, "camera": camera, "seeds": seed_label(list(seeds)), **metrics.as_row()}


def depth_suite(make_policy: Callable[[DepthVariant], Policy], tasks=DEPTH_TASKS, n_episodes: int = 30, base_seed: int = 1000, **eval_kw):
    """``make_policy(depth_variant)`` returns a trained TacFiLM policy for that placement."""
    rows, episodes = [], []
    seeds = eval_seeds(n_episodes, base_seed)
    for dv in DepthVariant:
        policy = make_policy(dv)
        for task in tasks:
            res = evaluate(policy, task, seeds=seeds, method=f"{dv.value}FiLM", **eval_kw)
            rows.append(_row("depth", f"{dv.value}FiLM", task, "Clean", seeds, res.metrics))
            episodes.extend(res.rows)
    return rows, episodes


def camera_suite(policies: dict[str, Policy], task: str = "circle3", conditions=CAMERA_CONDITIONS, n_episodes: int = 30, base_seed: int = 1000, **eval_kw):
    rows, episodes = [], []
    seeds = eval_seeds(n_episodes, base_seed)
    for method, policy in policies.items():
        for cam in conditions:
            res = evaluate(policy, task, camera_mode=cam, seeds=seeds, method=method, **eval_kw)
            rows.append(_row("camera", method, task, cam, seeds, res.metrics))
            episodes.extend(res.rows)
    return rows, episodes


def write_ablation(rows, episodes, out_dir, suite: str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    return {
        "summary": write_csv(rows, out_dir / f"ablation_{suite}.csv", ABLATION_COLUMNS),
        "episodes": write_csv(episodes, out_dir / f"ablation_{suite}_episodes.csv", EPISODE_COLUMNS),
    }
