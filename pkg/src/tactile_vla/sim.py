"""Deterministic planar peg-in-hole environment.

The peg is held by an impedance-controlled gripper: actions move a setpoint, and
the actual pose is the setpoint projected out of the base geometry.  When the
projection is active the stretch between setpoint and pose is the penetration
that produces the contact force ``k * stretch + c * |v|``.

Units: millimetres, radians, steps of 0.1 s.  ``x`` is the lateral position of
the peg's bottom centre, ``z`` its height above the top of the base (negative
means inside the hole) and ``theta`` its tilt.  A positive tilt leans the top
toward -x, so the lower section protrudes on the -x side.

The camera looks at the front face of the base, so the aperture itself is never
visible; a painted fiducial marks the nominal hole position, and the real hole
sits a few millimetres away from it (``placement_jitter``).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod

DT = 0.1
STIFFNESS = 500.0  # N/m
DAMPING = 5.0  # N s/m
FRICTION = 0.3
F_SAT = 20.0  # N, tactile intensity saturation
ACTION_LIMIT = np.array([2.0, 2.0, 0.05])
PROJECTION_CAP = 2.0  # mm of extra pose change the collision projection may add per step
MAX_STRETCH = 40.0  # mm; the controller's force limit (20 N)
PEG_LENGTH = 40.0
TILT_LEVER = 10.0  # mm of the peg's lower section that must clear the aperture
HOLE_DEPTH = 20.0
START_HEIGHT = 28.0
MAX_STEPS = 300
RETREAT_RISE = 0.5

RGB_SIZE = 48
TACTILE_SIZE = 32
MM_PER_PX = 2.0
VIEW_X = 48.0
VIEW_TOP = 66.0


class SimError(RuntimeError):
    pass


class PegShape(str, enum.Enum):
    CIRCLE = "Circle"
    SQUARE = "Square"
    PENTAGON = "Pentagon"
    CONNECTOR_A = "ConnectorA"
    CONNECTOR_B = "ConnectorB"


class Contact(str, enum.Enum):
    NONE = "None"
    RIM_LEFT = "RimLeft"
    RIM_RIGHT = "RimRight"
    SEATED = "Seated"


# width mm, rgb colour, tactile blob (major, minor) sigma px
_SHAPES = {
    PegShape.CIRCLE: (12.0, (0.85, 0.15, 0.1), (3.5, 1.6)),
    PegShape.SQUARE: (12.0, (0.1, 0.65, 0.2), (4.5, 1.4)),
    PegShape.PENTAGON: (12.0, (0.15, 0.3, 0.85), (4.0, 2.0)),
    PegShape.CONNECTOR_A: (8.0, (0.9, 0.75, 0.1), (4.0, 1.2)),
    PegShape.CONNECTOR_B: (14.0, (0.6, 0.2, 0.7), (5.0, 1.2)),
}

_INSTRUCTIONS = {
    PegShape.CIRCLE: "insert the circle peg into the base",
    PegShape.SQUARE: "insert the square peg into the base",
    PegShape.PENTAGON: "insert the pentagon peg into the base",
    PegShape.CONNECTOR_A: "plug the usb connector into the port",
    PegShape.CONNECTOR_B: "plug the hdmi connector into the port",
}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    peg_shape: PegShape
    clearance: float
    hole_x: float = 0.0
    insertion_depth_required: float = 10.0
    placement_jitter: float = 4.0
    # keyed connectors: (left, right) clearance; defaults to symmetric ``clearance``
    aperture_split: tuple[float, float] | None = None

    def __post_init__(self):
        if self.clearance <= 0:
            raise ValueError("clearance must be positive")

    @property
    def peg_width(self) -> float:
        return _SHAPES[self.peg_shape][0]

    @property
    def clearances(self) -> tuple[float, float]:
        return self.aperture_split or (self.clearance, self.clearance)

    @property
    def aperture(self) -> float:
        cl, cr = self.clearances
        return self.peg_width + cl + cr

    @property
    def instruction(self) -> str:
        return _INSTRUCTIONS[self.peg_shape]


TASKS = {
    "circle3": TaskSpec("circle3", PegShape.CIRCLE, 3.0),
    "circle2": TaskSpec("circle2", PegShape.CIRCLE, 2.0),
    "square3": TaskSpec("square3", PegShape.SQUARE, 3.0),
    "square2": TaskSpec("square2", PegShape.SQUARE, 2.0),
    "pentagon3": TaskSpec("pentagon3", PegShape.PENTAGON, 3.0),
    "pentagon2": TaskSpec("pentagon2", PegShape.PENTAGON, 2.0),
    "usb": TaskSpec("usb", PegShape.CONNECTOR_A, 1.0, aperture_split=(0.6, 1.4)),
    "hdmi": TaskSpec("hdmi", PegShape.CONNECTOR_B, 1.0, aperture_split=(1.4, 0.6)),
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; known: {', '.join(TASKS)}") from None


@dataclass(frozen=True)
class SimState:
    task: TaskSpec
    hole_x: float  # true aperture centre (hidden from the camera)
    x: float
    z: float
    theta: float
    sx: float
    sz: float
    stheta: float
    vx: float = 0.0
    vz: float = 0.0
    contact: Contact = Contact.NONE
    time: int = 0
    done: bool = False

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.z, self.theta])

    @property
    def inserted_depth(self) -> float:
        return max(0.0, -self.z)


@dataclass(frozen=True)
class StepInfo:
    contact_force: float = 0.0
    contact_flag: bool = False
    inserted_depth: float = 0.0
    contact: Contact = Contact.NONE
    contact_point: float = 0.0  # mm across the peg, peg frame
    normal_stretch: float = 0.0
    lateral_stretch: float = 0.0


@dataclass
class Observation:
    rgb: np.ndarray
    tactile: np.ndarray
    proprio: np.ndarray


# -- geometry ----------------------------------------------------------------


def footprint(task: TaskSpec, x: float, theta: float) -> tuple[float, float]:
    """Horizontal extent of the peg's lower section at the given pose."""
    half = 0.5 * task.peg_width * math.cos(theta)
    lean = TILT_LEVER * math.sin(theta)
    return x - half - max(0.0, lean), x + half + max(0.0, -lean)


def aperture_bounds(task: TaskSpec, hole_x: float) -> tuple[float, float]:
    cl, cr = task.clearances
    return hole_x - 0.5 * task.peg_width - cl, hole_x + 0.5 * task.peg_width + cr


def fits(task: TaskSpec, hole_x: float, x: float, theta: float) -> bool:
    lo, hi = aperture_bounds(task, hole_x)
    left, right = footprint(task, x, theta)
    return left >= lo - 1e-12 and right <= hi + 1e-12


def _toward(target: float, current: float, limit: float) -> float:
    return current + float(np.clip(target - current, -limit, limit))


# -- reset / step -----------------------------------------------------------------


def _observe(state: SimState, info: StepInfo) -> Observation:
    return Observation(render_rgb(state), render_tactile(state, info), state.pose)


def reset(task: TaskSpec, seed: int) -> tuple[SimState, Observation]:
    g = rngmod.stream(seed, "sim", "reset")
    offset = g.uniform(-8.0, 8.0)
    tilt = g.uniform(-0.15, 0.15)
    jitter = g.uniform(-task.placement_jitter, task.placement_jitter) if task.placement_jitter > 0 else 0.0
    x = task.hole_x + offset
    state = SimState(task, task.hole_x + jitter, x, START_HEIGHT, tilt, x, START_HEIGHT, tilt)
    return state, _observe(state, StepInfo())


def initial_state(task: TaskSpec, x: float, z: float = START_HEIGHT, theta: float = 0.0, hole_x: float | None = None) -> SimState:
    """A state at an explicit pose (for scripted experiments and tests)."""
    return SimState(task, task.hole_x if hole_x is None else hole_x, x, z, theta, x, z, theta)


def clamp_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64).reshape(3)
    return np.clip(a, -ACTION_LIMIT, ACTION_LIMIT)


def step(state: SimState, action, max_steps: int = MAX_STEPS) -> tuple[SimState, Observation, StepInfo]:
    """Advance one 0.1 s step.  Raises ``SimError`` once the episode has terminated."""
    if state.done:
        raise SimError("step() called on a terminated episode")
    task = state.task
    dx, dz, dth = clamp_action(action)
    sx, sz, sth = state.sx + dx, state.sz + dz, state.stheta + dth
    lin_cap = ACTION_LIMIT[0] + PROJECTION_CAP
    lo, hi = aperture_bounds(task, state.hole_x)
    inside = state.z < 0.0

    theta = _toward(sth, state.theta, ACTION_LIMIT[2])
    normal = lateral = 0.0
    contact = Contact.NONE
    contact_point = 0.0

    if inside:
        # the walls bound both tilt and lateral position
        room = hi - lo - task.peg_width * math.cos(theta)
        lean = TILT_LEVER * abs(math.sin(theta))
        if lean > room:
            theta = math.copysign(math.asin(min(1.0, max(room, 0.0) / TILT_LEVER)), theta)
        sth = theta
        left, right = footprint(task, 0.0, theta)
        x_min, x_max = lo - left, hi - right
        x_free = _toward(sx, state.x, lin_cap)
        x = min(max(x_free, x_min), x_max)
        if x != x_free:
            lateral = abs(sx - x)
            contact_point = math.copysign(0.5 * task.peg_width, sx - x)
        z = _toward(sz, state.z, lin_cap)
        if z < -HOLE_DEPTH:
            z = -HOLE_DEPTH
        if sz < -HOLE_DEPTH:
            normal = -HOLE_DEPTH - sz
        if z >= 0.0 and not fits(task, state.hole_x, x, theta):
            z = 0.0
        if normal > 0 or lateral > 0:
            contact = Contact.SEATED
    else:
        resting = state.z <= 0.0 and state.sz < 0.0
        if resting and not fits(task, state.hole_x, state.x, state.theta):
            grip = FRICTION * min(-state.sz, MAX_STRETCH)
            pull = sx - state.x
            if abs(pull) <= grip:
                x = state.x
            else:
                x = _toward(sx - math.copysign(grip, pull), state.x, lin_cap)
        else:
            x = _toward(sx, state.x, lin_cap)
        z = _toward(sz, state.z, lin_cap)
        if z < 0.0:
            if fits(task, state.hole_x, x, theta):
                z = max(z, -HOLE_DEPTH)
            else:
                z = 0.0
                normal = -sz
                left, right = footprint(task, x, theta)
                over_left, over_right = lo - left, right - hi
                if over_left >= over_right:
                    contact = Contact.RIM_LEFT
                    contact_point = 0.5 * (left + min(lo, right)) - x
                else:
                    contact = Contact.RIM_RIGHT
                    contact_point = 0.5 * (max(hi, left) + right) - x
                lateral = abs(sx - x)
        if normal <= 0.0:
            normal = 0.0
            lateral = 0.0
            contact = Contact.NONE
            contact_point = 0.0

    # the controller never lets the setpoint run further than its force limit
    if normal > MAX_STRETCH:
        sz += normal - MAX_STRETCH
        normal = MAX_STRETCH
    if lateral > MAX_STRETCH:
        sx = x + math.copysign(MAX_STRETCH, sx - x)
        lateral = MAX_STRETCH
    vx = (x - state.x) / DT
    vz = (z - state.z) / DT
    force = 0.0
    if contact is not Contact.NONE:
        stretch_m = math.hypot(normal, lateral) * 1e-3
        speed_m = math.hypot(vx, vz) * 1e-3
        force = STIFFNESS * stretch_m + DAMPING * speed_m

    time = state.time + 1
    new = replace(
        state, x=x, z=z, theta=theta, sx=sx, sz=sz, stheta=sth, vx=vx, vz=vz, contact=contact, time=time
    )
    done = new.inserted_depth >= task.insertion_depth_required or time >= max_steps
    new = replace(new, done=done)
    info = StepInfo(force, force > 0.0, new.inserted_depth, contact, contact_point, normal, lateral)
    return new, _observe(new, info), info


# -- rendering -------------------------------------------------------------

_PX = (np.arange(RGB_SIZE) + 0.5) * MM_PER_PX - VIEW_X
_PZ = VIEW_TOP - (np.arange(RGB_SIZE) + 0.5) * MM_PER_PX
_GX, _GZ = np.meshgrid(_PX, _PZ)


def render_rgb(state: SimState) -> np.ndarray:
    """48x48x3 orthographic side view, no anti-aliasing."""
    task = state.task
    img = np.empty((RGB_SIZE, RGB_SIZE, 3))
    img[:] = (0.82, 0.87, 0.93)
    gx = _GX - task.hole_x
    c, s = math.cos(state.theta), math.sin(state.theta)
    dx = _GX - state.x
    dz = _GZ - state.z
    u = dx * c + dz * s
    v = -dx * s + dz * c
    width = task.peg_width
    peg = (np.abs(u) <= 0.5 * width) & (v >= 0.0) & (v <= PEG_LENGTH)
    grip = (np.abs(u) <= 0.5 * width + 4.0) & (v >= PEG_LENGTH - 10.0) & (v <= PEG_LENGTH + 2.0)
    img[peg] = _SHAPES[task.peg_shape][1]
    img[grip & ~peg] = (0.2, 0.2, 0.22)
    img[grip & peg & (v >= PEG_LENGTH - 4.0)] = (0.2, 0.2, 0.22)
    base = _GZ < 0.0
    img[base] = (0.45, 0.45, 0.5)
    img[base & (_GZ >= -2.0)] = (0.35, 0.35, 0.4)
    img[base & (np.abs(gx) <= 1.0) & (_GZ >= -12.0)] = (1.0, 0.9, 0.1)
    return img


def _tactile_reference() -> np.ndarray:
    """Fixed gel background: vertical shading plus a symmetric marker-dot grid."""
    n = TACTILE_SIZE
    rows = np.linspace(0.0, 1.0, n)[:, None]
    shade = 0.30 + 0.10 * rows + np.zeros((1, n))
    ref = np.stack([shade * 0.9, shade, shade * 1.1], axis=-1)
    cols = np.arange(n)
    dots = ((cols[None, :] % 6 == 2) | (cols[None, :] % 6 == 3)) & ((cols[:, None] % 6 == 2) | (cols[:, None] % 6 == 3))
    dots = dots & dots[:, ::-1]
    ref[dots] *= 0.5
    return ref


TACTILE_REFERENCE = _tactile_reference()
TACTILE_REFERENCE.setflags(write=False)
_TINT = np.array([1.0, 0.85, 0.65])
_TY, _TX = np.mgrid[0:TACTILE_SIZE, 0:TACTILE_SIZE].astype(np.float64)


def tactile_blob(shape: PegShape, force: float, contact_point: float, shear_angle: float, theta: float, row: float = 22.0) -> np.ndarray:
    """Gaussian imprint with peak ``min(force / F_SAT, 1)``.

    ``shear_angle`` is the shear direction measured from the gel's vertical axis;
    the ellipse's major axis follows it and is then rotated by the tilt.
    """
    peak = min(force / F_SAT, 1.0)
    if peak <= 0.0:
        return np.zeros((TACTILE_SIZE, TACTILE_SIZE))
    major, minor = _SHAPES[shape][2]
    cx = (TACTILE_SIZE - 1) / 2.0 + 2.0 * contact_point
    cx = min(max(cx, 1.0), TACTILE_SIZE - 2.0)
    ang = shear_angle + theta
    du, dv = _TX - cx, _TY - row
    # coordinates along (a) and across (b) the major axis
    a = du * math.sin(ang) + dv * math.cos(ang)
    b = du * math.cos(ang) - dv * math.sin(ang)
    return peak * np.exp(-0.5 * ((a / major) ** 2 + (b / minor) ** 2))


def render_tactile(state: SimState, info: StepInfo) -> np.ndarray:
    """32x32x3 gel image in [0, 1]; exactly the reference pattern without contact."""
    if info.contact_force <= 0.0:
        return TACTILE_REFERENCE.copy()
    shear = math.atan2(info.lateral_stretch, info.normal_stretch) if info.contact_point >= 0 else -math.atan2(info.lateral_stretch, info.normal_stretch)
    row = 22.0 if info.contact is not Contact.SEATED or info.normal_stretch > 0 else 18.0
    blob = tactile_blob(state.task.peg_shape, info.contact_force, info.contact_point, shear, state.theta, row)
    return np.clip(TACTILE_REFERENCE + blob[..., None] * _TINT, 0.0, 1.0)


# -- camera degradation -----------------------------------------------------


class CameraMode(str, enum.Enum):
    CLEAN = "Clean"
    DIM80 = "Dim80"
    FREEZE50 = "Freeze50"

    @classmethod
    def parse(cls, value) -> "CameraMode":
        if isinstance(value, cls):
            return value
        for m in cls:
            if m.value.lower() == str(value).lower():
                return m
        raise ValueError(f"unknown camera mode {value!r}")


def degrade_camera(frame: np.ndarray, mode, rng, last_delivered: np.ndarray | None) -> np.ndarray:
    """Dim80 scales pixels by 0.2; Freeze50 repeats the last delivered frame half the time."""
    mode = CameraMode.parse(mode)
    if mode is CameraMode.CLEAN:
        return frame
    if mode is CameraMode.DIM80:
        return frame * 0.2
    if last_delivered is None:
        return frame
    return frame if rng.random() < 0.5 else last_delivered


# -- scripted expert ---------------------------------------------------------------


class Phase(str, enum.Enum):
    APPROACH = "approach"
    DESCEND = "descend"
    PRESS = "press"
    RECOVER = "recover"
    SHIFT = "shift"
    INSERT = "insert"


HOVER_HEIGHT = 6.0
PROBE_FORCE = 5.0
SHIFT_STEPS = 3
SHIFT_STEP = 0.8


@dataclass
class ExpertMemory:
    phase: Phase = Phase.APPROACH
    direction: float = 0.0
    shift_left: int = 0
    last_force: float = 0.0
    last_contact: Contact = Contact.NONE


def scripted_expert(state: SimState, task: TaskSpec, noise_scale: float, rng=None, memory: ExpertMemory | None = None, info: StepInfo | None = None) -> np.ndarray:
    """Finite-state demonstrator.

    Aligns with the fiducial, descends, and on rim contact presses until the
    force reaches ``PROBE_FORCE``.  It then lifts clear while straightening the
    peg, shifts away from the contacted rim and descends again.  The contact
    side it reacts to is exactly what the tactile image shows.
    """
    mem = memory if memory is not None else ExpertMemory()
    force = info.contact_force if info is not None else 0.0
    contact = info.contact if info is not None else state.contact
    dx = dz = dth = 0.0

    if state.z < 0.0:
        mem.phase = Phase.INSERT
    elif mem.phase is Phase.INSERT:
        mem.phase = Phase.DESCEND

    if mem.phase in (Phase.DESCEND, Phase.PRESS) and contact in (Contact.RIM_LEFT, Contact.RIM_RIGHT):
        if mem.phase is Phase.DESCEND:
            mem.phase = Phase.PRESS
        if force >= PROBE_FORCE:
            mem.phase = Phase.RECOVER
            mem.direction = 1.0 if contact is Contact.RIM_LEFT else -1.0
    if mem.phase is Phase.RECOVER and contact is Contact.NONE and state.z >= 1.0:
        mem.phase = Phase.SHIFT
        mem.shift_left = SHIFT_STEPS
    if mem.phase is Phase.SHIFT and mem.shift_left == 0:
        mem.phase = Phase.DESCEND

    if mem.phase is Phase.APPROACH:
        err = task.hole_x - state.x
        dx = float(np.clip(0.5 * err, -1.5, 1.5))
        dz = -1.0 if state.z > HOVER_HEIGHT else 0.0
        if abs(err) < 0.5 and state.z <= HOVER_HEIGHT:
            mem.phase = Phase.DESCEND
    if mem.phase is Phase.DESCEND:
        dz = -0.5
    elif mem.phase is Phase.PRESS:
        dz = -1.0
    elif mem.phase is Phase.RECOVER:
        dz = 2.0
        dth = -float(np.clip(state.theta, -0.05, 0.05))
    elif mem.phase is Phase.SHIFT:
        dx = SHIFT_STEP * mem.direction
        dth = -float(np.clip(state.theta, -0.05, 0.05))
        mem.shift_left -= 1
    elif mem.phase is Phase.INSERT:
        dz = -0.5
        dth = -float(np.clip(state.theta, -0.02, 0.02))
        if contact is Contact.SEATED and state.sx != state.x:
            dx = float(np.clip(state.x - state.sx, -0.5, 0.5))

    if noise_scale > 0.0 and rng is not None:
        # one draw pair per step keeps the noise stream aligned across phases
        nx, nz = rng.normal(0.0, noise_scale, size=2)
        if mem.phase in (Phase.APPROACH, Phase.DESCEND, Phase.INSERT):
            dx += nx
        if dz < 0.0 and mem.phase is not Phase.PRESS:
            dz += nz
    mem.last_force = force
    mem.last_contact = contact
    return clamp_action([dx, dz, dth])


# -- outcome classification ---------------------------------------------------------


@dataclass
class EpisodeOutcome:
    success: bool
    direct: bool
    max_force: float
    steps: int
    retreats: int = 0
    contact_steps: int = 0

    @property
    def time_s(self) -> float:
        return self.steps * DT

    @property
    def label(self) -> str:
        if not self.success:
            return "Failure"
        return "Direct" if self.direct else "Recovered"


def episode_outcome(states, infos, depth_required: float, max_steps: int = MAX_STEPS) -> EpisodeOutcome:
    """Classify a trace.  ``states[0]`` is the reset state; ``infos[i]`` follows step ``i + 1``."""
    success_step = None
    first_contact = None
    retreats = 0
    max_force = 0.0
    contact_steps = 0
    limit = min(len(infos), max_steps)
    for i in range(limit):
        info = infos[i]
        if info.contact_force > 0:
            contact_steps += 1
            max_force = max(max_force, info.contact_force)
            if first_contact is None:
                first_contact = i
        if first_contact is not None and states[i + 1].z - states[i].z > RETREAT_RISE:
            retreats += 1
        if info.inserted_depth >= depth_required:
            success_step = i + 1
            break
    success = success_step is not None
    steps = success_step if success else limit
    return EpisodeOutcome(success, success and retreats == 0, max_force, steps, retreats, contact_steps)
