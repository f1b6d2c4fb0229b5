"""Kinematic table-top manipulation environment.

A point gripper with a finger-width degree of freedom moves one object in a
bounded workspace. There is no rigid-body physics: grasping, pushing, and
falling follow explicit kinematic rules so that the task structure (reach,
grasp, transport, release) is preserved while every step stays deterministic.

Units are SI meters internally. The per-step end-effector displacement is
action * 0.05 m and the finger-width change is action * 0.10 m, both clamped
to [-1, 1] first. An episode lasts ``horizon`` steps (50 by default).

Grasp rule: the object attaches to the gripper when, after the current move,
(a) the object center is within 2 cm horizontally and 3 cm vertically of the
gripper point, (b) the finger width lies in [object width - 1 cm,
object width + 0.5 cm], and (c) the fingers closed this step. It detaches
when the width exceeds object width + 1 cm. While grasped the object tracks
the gripper exactly; on release it drops straight to its resting height.

Push rule: when the (3 cm radius) gripper sphere overlaps the ungrasped
object's footprint, the object is translated horizontally by the minimal
vector restoring separation. Spheres keep 0.95-damped horizontal velocity
between steps; cubes stop immediately. Exception: a gripper whose fingers
are open wide enough to fit around the object (width >= object width - 1 cm)
and whose point is within the grasp capture radius straddles the object
instead of pushing it; without this exemption the push rule would keep the
gripper 5.5 cm away and the grasp precondition could never be met by a
plain descend-then-close motion.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

# Action scaling
EE_STEP = 0.05
FINGER_STEP = 0.10
MAX_FINGER_WIDTH = 0.10

# Object and grasp geometry
OBJECT_WIDTH = 0.05
OBJECT_HALF = 0.025
GRASP_HORIZONTAL = 0.02
GRASP_VERTICAL = 0.03
GRASP_WIDTH_LO = OBJECT_WIDTH - 0.01
GRASP_WIDTH_HI = OBJECT_WIDTH + 0.005
RELEASE_WIDTH = OBJECT_WIDTH + 0.01
PUSH_RADIUS = 0.03
OBJECT_RADIUS = 0.025
SPHERE_DAMPING = 0.95

D_THRESHOLD = 0.05
HORIZON = 50
HOME_EE = (0.0, 0.0, 0.15)
HOME_FINGER_WIDTH = 0.08

VIEWS = ("privileged", "positions_only", "positions_and_goal")
VARIANTS = ("pretrain", "larger", "in_air", "push", "sphere", "wall", "box")

_MAX_SAMPLE_TRIES = 10_000


class EnvError(RuntimeError):
    pass


class ConfigurationError(EnvError):
    """Task geometry made start/goal sampling impossible."""


@dataclass(frozen=True)
class Box:
    """Axis-aligned solid region, used for obstacles and sampling regions."""

    lo: tuple[float, float, float]
    hi: tuple[float, float, float]

    def contains(self, p, margin: float = 0.0) -> bool:
        return all(self.lo[i] - margin < p[i] < self.hi[i] + margin for i in range(3))

    def contains_xy(self, p, margin: float = 0.0) -> bool:
        return all(self.lo[i] - margin < p[i] < self.hi[i] + margin for i in range(2))


@dataclass(frozen=True)
class Workspace:
    """Bounded volume; x and y are centered on the table origin."""

    extents: tuple[float, float, float] = (0.35, 0.35, 0.35)
    table_height: float = 0.0
    d_threshold: float = D_THRESHOLD

    @property
    def lo(self) -> np.ndarray:
        ex, ey, _ = self.extents
        return np.array([-ex / 2.0, -ey / 2.0, self.table_height])

    @property
    def hi(self) -> np.ndarray:
        ex, ey, ez = self.extents
        return np.array([ex / 2.0, ey / 2.0, self.table_height + ez])

    def clamp(self, p: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(p, self.lo), self.hi)

    def contains(self, p) -> bool:
        lo, hi = self.lo, self.hi
        return bool(np.all(p >= lo - 1e-12) and np.all(p <= hi + 1e-12))


@dataclass(frozen=True)
class TaskSpec:
    """One task variant: workspace, goal sampling, object kind, obstacles.

    ``reward_mode`` is ``first_success`` during pretraining (reward once,
    then the episode ends) and ``every_step`` downstream. ``reach_only``
    replaces the success rule with gripper-to-target distance; it exists for
    learner sanity checks and is not one of the named variants.
    """

    variant: str = "pretrain"
    p_air: float = 0.7
    workspace: Workspace = field(default_factory=Workspace)
    object_kind: str = "cube"  # cube | sphere
    obstacles: tuple[Box, ...] = ()
    start_region: Box | None = None
    goal_region: Box | None = None
    reward_mode: str = "every_step"  # every_step | first_success
    reach_only: bool = False
    horizon: int = HORIZON

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if not 0.0 <= self.p_air <= 1.0:
            raise ConfigurationError(f"p_air must be in [0, 1], got {self.p_air}")
        for box in self.obstacles:
            if not (self.workspace.contains(box.lo) and self.workspace.contains(box.hi)):
                raise ConfigurationError("obstacle region extends outside the workspace")

    @property
    def rest_height(self) -> float:
        return self.workspace.table_height + OBJECT_HALF


# Per-variant p_air values fixed by the task definitions.
VARIANT_P_AIR = {
    "pretrain": 0.7,
    "larger": 0.7,
    "in_air": 1.0,
    "push": 0.0,
    "sphere": 0.7,
    "wall": 0.7,
    "box": 0.0,
}

WALL_THICKNESS = 0.01
WALL_HEIGHT = 0.10
BOX_SIZE = 0.10
BOX_WALL_HEIGHT = 0.05
BOX_WALL_THICKNESS = 0.01


def make_task(variant: str, reward_mode: str | None = None, reach_only: bool = False) -> TaskSpec:
    """Build the canonical TaskSpec for a named variant."""
    variant = variant.lower().replace("-", "_").replace(" ", "_")
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    if reward_mode is None:
        reward_mode = "first_success" if variant == "pretrain" else "every_step"
    ws = Workspace()
    kw: dict = {
        "variant": variant,
        "p_air": VARIANT_P_AIR[variant],
        "reward_mode": reward_mode,
        "reach_only": reach_only,
    }
    if variant == "larger":
        ws = Workspace(extents=(0.45, 0.45, 0.40))
    elif variant == "sphere":
        kw["object_kind"] = "sphere"
    elif variant == "wall":
        th = ws.table_height
        kw["obstacles"] = (
            Box(
                (-WALL_THICKNESS / 2, -0.175, th),
                (WALL_THICKNESS / 2, 0.175, th + WALL_HEIGHT),
            ),
        )
        kw["start_region"] = Box((-0.175, -0.175, th), (-0.025, 0.175, th))
        kw["goal_region"] = Box((0.025, -0.175, th), (0.175, 0.175, th))
    kw["workspace"] = ws
    return TaskSpec(**kw)


def task_from_config(cfg: dict) -> TaskSpec:
    """Task from a flat config mapping; unknown keys are rejected."""
    allowed = {"variant", "p_air", "extents", "reward_mode", "horizon", "reach_only"}
    unknown = set(cfg) - allowed
    if unknown:
        raise ConfigurationError(f"unknown task config keys: {sorted(unknown)}")
    task = make_task(
        cfg.get("variant", "pretrain"),
        reward_mode=cfg.get("reward_mode"),
        reach_only=bool(cfg.get("reach_only", False)),
    )
    updates = {}
    if "p_air" in cfg:
        updates["p_air"] = float(cfg["p_air"])
    if "extents" in cfg:
        ex = [float(v) for v in str(cfg["extents"]).split("x")]
        updates["workspace"] = Workspace(extents=(ex[0], ex[1], ex[2]))
    if "horizon" in cfg:
        updates["horizon"] = int(cfg["horizon"])
    return replace(task, **updates) if updates else task


@dataclass
class EnvState:
    """Full simulator state. ``obj_rel_pos`` is always obj_pos - ee_pos."""

    ee_pos: np.ndarray
    ee_vel: np.ndarray
    finger_width: float
    finger_vel: float
    obj_pos: np.ndarray
    obj_vel: np.ndarray
    contact: tuple[int, int]
    step_idx: int
    grasped: bool

    @property
    def obj_rel_pos(self) -> np.ndarray:
        return self.obj_pos - self.ee_pos

    def copy(self) -> "EnvState":
        return EnvState(
            self.ee_pos.copy(),
            self.ee_vel.copy(),
            self.finger_width,
            self.finger_vel,
            self.obj_pos.copy(),
            self.obj_vel.copy(),
            self.contact,
            self.step_idx,
            self.grasped,
        )


@dataclass(frozen=True)
class Action:
    """Normalized action; components are clamped to [-1, 1] before scaling."""

    ee_delta: tuple[float, float, float]
    finger_delta: float

    @classmethod
    def from_array(cls, a) -> "Action":
        a = np.asarray(a, dtype=np.float64).ravel()
        if a.shape != (4,):
            raise EnvError(f"action must have 4 components, got shape {a.shape}")
        return cls((float(a[0]), float(a[1]), float(a[2])), float(a[3]))


@dataclass(frozen=True)
class Goal:
    target_pos: np.ndarray


def success(state: EnvState, goal: Goal, d_threshold: float = D_THRESHOLD) -> bool:
    """Object within d_threshold of the target (inclusive boundary)."""
    return bool(np.linalg.norm(state.obj_pos - goal.target_pos) <= d_threshold)


def _reach_success(state: EnvState, goal: Goal, d_threshold: float) -> bool:
    return bool(np.linalg.norm(state.ee_pos - goal.target_pos) <= d_threshold)


def observe(state: EnvState, goal: Goal | None, view: str) -> np.ndarray:
    """Flatten the state for one observer.

    privileged:        ee(3), ee_vel(3), finger_width, finger_vel, obj(3),
                       obj_vel(3), obj_rel(3), contact(2), step_idx  -> 20
    positions_only:    ee(3), finger_width, obj(3), obj_rel(3)       -> 10
    positions_and_goal: positions_only ++ target(3)                  -> 13
    """
    if view == "privileged":
        return np.concatenate(
            [
                state.ee_pos,
                state.ee_vel,
                [state.finger_width, state.finger_vel],
                state.obj_pos,
                state.obj_vel,
                state.obj_rel_pos,
                state.contact,
                [float(state.step_idx)],
            ]
        )
    if view == "positions_only":
        return np.concatenate(
            [state.ee_pos, [state.finger_width], state.obj_pos, state.obj_rel_pos]
        )
    if view == "positions_and_goal":
        if goal is None:
            raise EnvError("positions_and_goal view requires a goal")
        return np.concatenate(
            [
                state.ee_pos,
                [state.finger_width],
                state.obj_pos,
                state.obj_rel_pos,
                goal.target_pos,
            ]
        )
    raise EnvError(f"unknown view {view!r}")


OBS_DIM = {"privileged": 20, "positions_only": 10, "positions_and_goal": 13}


def view_scale(view: str, horizon: int = HORIZON) -> np.ndarray:
    """Constant per-component input scaling applied inside policies.

    Only the privileged view needs it: the raw step counter would saturate a
    tanh layer, so it is scaled to [0, 1] at the network boundary.
    """
    scale = np.ones(OBS_DIM[view])
    if view == "privileged":
        scale[-1] = 1.0 / float(horizon)
    return scale


def _move_point(p: np.ndarray, delta: np.ndarray, obstacles, ws: Workspace, axes=(0, 1, 2)):
    """Move a point one axis at a time with swept obstacle clamping.

    Sequential per-axis motion cannot tunnel through a thin box: each axis
    move is clamped at the first obstacle face it would cross while the
    other two coordinates lie strictly inside that box's span.
    """
    p = p.copy()
    lo_ws, hi_ws = ws.lo, ws.hi
    for ax in axes:
        d = delta[ax]
        if d == 0.0:
            continue
        target = min(max(p[ax] + d, lo_ws[ax]), hi_ws[ax])
        for box in obstacles:
            others = [i for i in range(3) if i != ax]
            if not all(box.lo[i] < p[i] < box.hi[i] for i in others):
                continue
            if d > 0.0 and p[ax] <= box.lo[ax] < target:
                target = box.lo[ax]
            elif d < 0.0 and p[ax] >= box.hi[ax] > target:
                target = box.hi[ax]
        p[ax] = target
    return p


def advance(state: EnvState, action: Action, task: TaskSpec, obstacles=None) -> EnvState:
    """Pure kinematic step: returns the next state (no reward logic).

    ``obstacles`` defaults to the task's static obstacles; the Box variant
    passes its per-episode walls explicitly.
    """
    obstacles = task.obstacles if obstacles is None else obstacles
    raw_ee = np.asarray(action.ee_delta, dtype=np.float64)
    if not (np.isfinite(raw_ee).all() and math.isfinite(action.finger_delta)):
        raise EnvError("non-finite action")
    ee_delta = np.clip(raw_ee, -1.0, 1.0) * EE_STEP
    finger_delta = float(np.clip(action.finger_delta, -1.0, 1.0)) * FINGER_STEP
    if task.variant == "push":
        finger_delta = 0.0  # gripper locked closed

    ws = task.workspace
    new_ee = _move_point(state.ee_pos, ee_delta, obstacles, ws)
    new_fw = min(max(state.finger_width + finger_delta, 0.0), MAX_FINGER_WIDTH)
    finger_vel = new_fw - state.finger_width

    grasped = state.grasped
    obj = state.obj_pos.copy()
    obj_vel_in = state.obj_vel
    touching = False

    if grasped:
        if new_fw > RELEASE_WIDTH:
            grasped = False
        else:
            obj = new_ee + state.obj_rel_pos  # exact tracking, offset frozen

    if not grasped:
        # Grasp attempt against the post-move gripper position.
        dh = math.hypot(obj[0] - new_ee[0], obj[1] - new_ee[1])
        dv = abs(obj[2] - new_ee[2])
        if (
            dh <= GRASP_HORIZONTAL
            and dv <= GRASP_VERTICAL
            and GRASP_WIDTH_LO <= new_fw <= GRASP_WIDTH_HI
            and finger_vel < 0.0
        ):
            grasped = True
            touching = True
        else:
            # Sphere momentum from earlier pushes, damped per step.
            if task.object_kind == "sphere" and not state.grasped:
                carry = obj_vel_in[:2] * SPHERE_DAMPING
                if abs(carry[0]) > 1e-9 or abs(carry[1]) > 1e-9:
                    obj = _move_point(obj, np.array([carry[0], carry[1], 0.0]), obstacles, ws, axes=(0, 1))
            # Push resolution: restore horizontal separation when overlapping.
            # A wide-open gripper within the capture radius straddles the
            # object (fingers around it) and does not push.
            sep = PUSH_RADIUS + OBJECT_RADIUS
            if abs(obj[2] - new_ee[2]) < PUSH_RADIUS + OBJECT_HALF:
                dx, dy = obj[0] - new_ee[0], obj[1] - new_ee[1]
                dh2 = math.hypot(dx, dy)
                straddle = dh2 <= GRASP_HORIZONTAL and new_fw >= GRASP_WIDTH_LO
                if straddle:
                    touching = True
                if dh2 < sep and not straddle:
                    touching = True
                    if dh2 < 1e-12:
                        ux, uy = 1.0, 0.0  # deterministic tie-break
                    else:
                        ux, uy = dx / dh2, dy / dh2
                    push = (sep - dh2)
                    obj = _move_point(
                        obj, np.array([ux * push, uy * push, 0.0]), obstacles, ws, axes=(0, 1)
                    )
            # Gravity: an ungrasped object rests on the table.
            obj[2] = task.rest_height

    new_obj_vel = obj - state.obj_pos
    if task.object_kind != "sphere" and not grasped and not touching:
        new_obj_vel = np.zeros(3)  # cubes stop instantly

    contact = (1, 1) if (grasped or touching) else (0, 0)
    return EnvState(
        ee_pos=new_ee,
        ee_vel=new_ee - state.ee_pos,
        finger_width=new_fw,
        finger_vel=finger_vel,
        obj_pos=obj,
        obj_vel=new_obj_vel,
        contact=contact,
        step_idx=state.step_idx + 1,
        grasped=grasped,
    )


def _home_state(task: TaskSpec, obj_pos: np.ndarray) -> EnvState:
    fw = 0.0 if task.variant == "push" else HOME_FINGER_WIDTH
    ws = task.workspace
    home = np.array(HOME_EE)
    home[2] = ws.table_height + 0.15
    return EnvState(
        ee_pos=home,
        ee_vel=np.zeros(3),
        finger_width=fw,
        finger_vel=0.0,
        obj_pos=np.asarray(obj_pos, dtype=np.float64).copy(),
        obj_vel=np.zeros(3),
        contact=(0, 0),
        step_idx=0,
        grasped=False,
    )


class TabletopEnv:
    """Stateful episode wrapper over the pure kinematics.

    Instances are independent value objects; many can be stepped in
    parallel, but a single instance must not be shared across writers.
    """

    def __init__(self, task: TaskSpec, rng: np.random.Generator | int):
        self.task = task
        self.rng = np.random.default_rng(rng) if isinstance(rng, int) else rng
        self.state: EnvState | None = None
        self.goal: Goal | None = None
        self.obstacles: tuple[Box, ...] = task.obstacles
        self._rewarded = False

    # -- sampling helpers ------------------------------------------------

    def _sample_on_table(self, region: Box | None, clear: tuple[Box, ...]) -> np.ndarray:
        ws = self.task.workspace
        lo = ws.lo if region is None else np.asarray(region.lo)
        hi = ws.hi if region is None else np.asarray(region.hi)
        for _ in range(_MAX_SAMPLE_TRIES):
            x = self.rng.uniform(lo[0], hi[0])
            y = self.rng.uniform(lo[1], hi[1])
            p = np.array([x, y, self.task.rest_height])
            if any(b.contains_xy(p, margin=OBJECT_RADIUS) for b in clear):
                continue
            return p
        raise ConfigurationError(
            f"could not sample an on-table position after {_MAX_SAMPLE_TRIES} draws"
        )

    def _sample_goal(self) -> Goal:
        task = self.task
        ws = task.workspace
        if task.variant == "box":
            bx, by = self._box_center
            half = BOX_SIZE / 2.0 - BOX_WALL_THICKNESS - OBJECT_RADIUS
            x = self.rng.uniform(bx - half, bx + half)
            y = self.rng.uniform(by - half, by + half)
            return Goal(np.array([x, y, task.rest_height]))
        region = task.goal_region
        lo = ws.lo if region is None else np.asarray(region.lo)
        hi = ws.hi if region is None else np.asarray(region.hi)
        x = self.rng.uniform(lo[0], hi[0])
        y = self.rng.uniform(lo[1], hi[1])
        if self.rng.uniform() < task.p_air:
            z = self.rng.uniform(ws.lo[2], ws.hi[2])
        else:
            z = task.rest_height
        return Goal(np.array([x, y, z]))

    def _build_box_walls(self) -> tuple[Box, ...]:
        ws = self.task.workspace
        half = BOX_SIZE / 2.0
        margin = half + 0.01
        bx = self.rng.uniform(ws.lo[0] + margin, ws.hi[0] - margin)
        by = self.rng.uniform(ws.lo[1] + margin, ws.hi[1] - margin)
        self._box_center = (bx, by)
        t, h, z0 = BOX_WALL_THICKNESS, BOX_WALL_HEIGHT, ws.table_height
        return (
            Box((bx - half, by - half, z0), (bx - half + t, by + half, z0 + h)),
            Box((bx + half - t, by - half, z0), (bx + half, by + half, z0 + h)),
            Box((bx - half, by - half, z0), (bx + half, by - half + t, z0 + h)),
            Box((bx - half, by + half - t, z0), (bx + half, by + half, z0 + h)),
        )

    # -- episode API -----------------------------------------------------

    def reset(self) -> tuple[EnvState, Goal]:
        task = self.task
        clear = task.obstacles
        if task.variant == "box":
            self.obstacles = self._build_box_walls()
            # The object starts outside the whole box footprint, not merely
            # outside its four walls.
            bx, by = self._box_center
            half = BOX_SIZE / 2.0
            ws = task.workspace
            footprint = Box(
                (bx - half, by - half, ws.table_height),
                (bx + half, by + half, ws.table_height + BOX_WALL_HEIGHT),
            )
            clear = self.obstacles + (footprint,)
        else:
            self.obstacles = task.obstacles
        obj = self._sample_on_table(task.start_region, clear)
        self.goal = self._sample_goal()
        self.state = _home_state(task, obj)
        self._rewarded = False
        return self.state, self.goal

    def reset_to(self, obj_pos, goal: Goal) -> EnvState:
        """Deterministic reset to a known object position and goal."""
        obj_pos = np.asarray(obj_pos, dtype=np.float64)
        ws = self.task.workspace
        if not ws.contains(obj_pos):
            raise EnvError(f"reset_to: object position {obj_pos} outside workspace")
        if self.task.variant != "box":
            self.obstacles = self.task.obstacles
        self.goal = Goal(np.asarray(goal.target_pos, dtype=np.float64).copy())
        self.state = _home_state(self.task, obj_pos)
        self._rewarded = False
        return self.state

    def step(self, action) -> tuple[EnvState, float, bool]:
        if self.state is None:
            raise EnvError("step before reset")
        if not isinstance(action, Action):
            action = Action.from_array(action)
        nxt = advance(self.state, action, self.task, self.obstacles)
        if self.task.reach_only:
            hit = _reach_success(nxt, self.goal, self.task.workspace.d_threshold)
        else:
            hit = success(nxt, self.goal, self.task.workspace.d_threshold)
        reward, done = 0.0, False
        if self.task.reward_mode == "every_step":
            reward = 1.0 if hit else 0.0
        else:  # first_success: reward once, then the episode ends
            if hit and not self._rewarded:
                reward = 1.0
                self._rewarded = True
                done = True
        if nxt.step_idx >= self.task.horizon:
            done = True
        self.state = nxt
        return nxt, reward, done

    def observe(self, view: str) -> np.ndarray:
        return observe(self.state, self.goal, view)


TRAJECTORY_COLUMNS = (
    "step",
    "ee_x",
    "ee_y",
    "ee_z",
    "obj_x",
    "obj_y",
    "obj_z",
    "goal_x",
    "goal_y",
    "goal_z",
    "reward",
    "done",
)


def write_trajectory_csv(path, rows):
    """Dump one episode; rows are (step, ee xyz, obj xyz, goal xyz, reward, done)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRAJECTORY_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
