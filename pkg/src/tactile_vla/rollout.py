"""Lock-step episode runner shared by demo collection and evaluation.

Per episode seed ``s``: the environment resets from ``s``, the expert's action
noise comes from stream ``(s, "expert")`` and camera degradation from
``(s, "camera")``.  Running the expert through here therefore reproduces
collection outcomes seed for seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from . import sim
from .encoders import tactile_preprocess


def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def dequantize(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) / 255.0


@dataclass
class EpisodeContext:
    """Everything a controller may look at for one running episode."""

    task: sim.TaskSpec
    seed: int
    state: sim.SimState
    info: sim.StepInfo | None
    rgb: np.ndarray  # frame delivered by the (possibly degraded) camera, uint8
    tactile: list[np.ndarray] = field(default_factory=list)  # uint8 frames, one per step
    t: int = 0

    def tactile_pair(self, size: int = 32) -> np.ndarray:
        hist = [dequantize(f) for f in self.tactile[max(0, self.t - 5): self.t + 1]]
        offset = max(0, self.t - 5)
        return tactile_preprocess(hist, self.t - offset, dequantize(self.tactile[0]), size)


@dataclass
class EpisodeTrace:
    task: str
    seed: int
    states: list = field(default_factory=list)
    infos: list = field(default_factory=list)
    rgb: list = field(default_factory=list)
    tactile: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    outcome: sim.EpisodeOutcome | None = None


class ExpertController:
    """Scripted expert with per-episode memory and noise stream."""

    def __init__(self, noise_scale: float = 0.3):
        self.noise_scale = noise_scale
        self._mem: dict[int, sim.ExpertMemory] = {}
        self._rng: dict[int, np.random.Generator] = {}

    def act(self, contexts: list[EpisodeContext]) -> np.ndarray:
        out = []
        for ctx in contexts:
            if ctx.seed not in self._mem:
                self._mem[ctx.seed] = sim.ExpertMemory()
                self._rng[ctx.seed] = rngmod.stream(ctx.seed, "expert")
            out.append(sim.scripted_expert(ctx.state, ctx.task, self.noise_scale, self._rng[ctx.seed], self._mem[ctx.seed], ctx.info))
        return np.array(out)


def run_episodes(
    task: sim.TaskSpec,
    seeds,
    controller,
    camera_mode: sim.CameraMode | str = sim.CameraMode.CLEAN,
    max_steps: int = sim.MAX_STEPS,
    keep_frames: bool = True,
) -> list[EpisodeTrace]:
    """Run one episode per seed in lock step; ``controller.act`` sees all live episodes at once."""
    mode = sim.CameraMode.parse(camera_mode)
    traces, contexts, cams, delivered = [], [], [], []
    for s in seeds:
        s = int(s)
        state, obs = sim.reset(task, s)
        cam_rng = rngmod.stream(s, "camera")
        frame = sim.degrade_camera(obs.rgb, mode, cam_rng, None)
        tr = EpisodeTrace(task.name, s, states=[state])
        ctx = EpisodeContext(task, s, state, None, quantize(frame), [quantize(obs.tactile)])
        traces.append(tr)
        contexts.append(ctx)
        cams.append(cam_rng)
        delivered.append(frame)
    live = list(range(len(traces)))
    while live:
        actions = controller.act([contexts[i] for i in live])
        still = []
        for a, i in zip(actions, live):
            ctx, tr = contexts[i], traces[i]
            if keep_frames:
                tr.rgb.append(ctx.rgb)
                tr.tactile.append(ctx.tactile[-1])
            tr.actions.append(np.asarray(a, dtype=np.float64))
            state, obs, info = sim.step(ctx.state, a, max_steps)
            tr.states.append(state)
            tr.infos.append(info)
            frame = sim.degrade_camera(obs.rgb, mode, cams[i], delivered[i])
            delivered[i] = frame
            ctx.state, ctx.info, ctx.rgb = state, info, quantize(frame)
            ctx.tactile.append(quantize(obs.tactile))
            ctx.t += 1
            if state.done:
                tr.outcome = sim.episode_outcome(tr.states, tr.infos, task.insertion_depth_required, max_steps)
            else:
                still.append(i)
        live = still
    return traces
