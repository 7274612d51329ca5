"""MiniCompo: a planar, factored manipulation task family.

A task is one element per axis (robot, object, obstacle, objective). The robot
is a velocity-controlled gripper point in the unit square; it must grasp the
object and move it to the task's goal, detouring around an axis-aligned wall
when one is present. State is factored into four blocks (18 dims total), the
reward is dense and staged in [0, 1], and success means reaching reward 1
within the horizon.

The dynamics are a pure function of (state, action, task, config): attachment
and grasp offset are re-inferred from the emitted state, so stored transitions
replay exactly. Inner loops run on plain Python floats for speed.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

AXES = ("robot", "object", "obstacle", "objective")

# factored state layout (18 dims)
ROBOT_BLOCK = slice(0, 5)       # px, py, vx, vy, grip
OBJECT_BLOCK = slice(5, 9)      # ox, oy, ox-px, oy-py
OBSTACLE_BLOCK = slice(9, 14)   # cx, cy, hx, hy, present
OBJECTIVE_BLOCK = slice(14, 18)  # gx, gy, gx-ox, gy-oy
STATE_DIM = 18
ACTION_DIM = 3

# flattened transition layout: [s, a, r, s', d]
TRANSITION_DIM = 2 * STATE_DIM + ACTION_DIM + 2
T_STATE = slice(0, STATE_DIM)
T_ACTION = slice(STATE_DIM, STATE_DIM + ACTION_DIM)
T_REWARD = STATE_DIM + ACTION_DIM
T_NEXT_STATE = slice(T_REWARD + 1, T_REWARD + 1 + STATE_DIM)
T_TERMINAL = TRANSITION_DIM - 1

TaskId = tuple[int, int, int, int]


class ConfigurationError(ValueError):
    """Element parameters that do not admit an expert solution, or bad task/axis setup."""


@dataclass(frozen=True)
class RobotParams:
    name: str
    gain: float      # acceleration gain g_r
    damping: float   # velocity damping beta_r


@dataclass(frozen=True)
class ObjectParams:
    name: str
    mass: float          # m_o, divides acceleration while carrying
    grasp_radius: float  # rho_o, attachment distance


@dataclass(frozen=True)
class ObstacleParams:
    name: str
    present: bool
    # axis-aligned rectangle: center +/- half extents; zeros when absent
    cx: float = 0.0
    cy: float = 0.0
    hx: float = 0.0
    hy: float = 0.0


@dataclass(frozen=True)
class ObjectiveParams:
    name: str
    requires_release: bool
    # goal sampling box (low/high corners); push_line pins gy to the object row
    gx_lo: float = 0.0
    gx_hi: float = 0.0
    gy_lo: float = 0.0
    gy_hi: float = 0.0
    goal_on_object_row: bool = False


@dataclass(frozen=True)
class AxisSpec:
    name: str
    elements: tuple[str, ...]

    @property
    def cardinality(self) -> int:
        return len(self.elements)


# Default element tables. Geometry keeps every rectangle and goal region inside
# the unit square, with a free corridor past each wall wide enough for a robot
# carrying an object at maximal grasp offset (0.12 < corridor clearance).
ROBOT_TABLE = (
    RobotParams("standard", gain=1.0, damping=0.10),
    RobotParams("damped", gain=0.8, damping=0.15),
    RobotParams("agile", gain=1.2, damping=0.05),
    RobotParams("sluggish", gain=0.6, damping=0.20),
)
OBJECT_TABLE = (
    ObjectParams("cube", mass=1.0, grasp_radius=0.10),
    ObjectParams("weight", mass=2.0, grasp_radius=0.08),
    ObjectParams("puck", mass=0.5, grasp_radius=0.12),
    ObjectParams("block", mass=1.5, grasp_radius=0.06),
)
OBSTACLE_TABLE = (
    ObstacleParams("none", present=False),
    # horizontal bar over the object region; free passage on the right (x > 0.50)
    ObstacleParams("object_wall", present=True, cx=0.28, cy=0.53, hx=0.22, hy=0.03),
    # wall next to the object region, openings at floor and ceiling
    ObstacleParams("doorway", present=True, cx=0.49, cy=0.46, hx=0.03, hy=0.22),
    # wall in front of the goal region, openings at floor and ceiling
    ObstacleParams("goal_wall", present=True, cx=0.73, cy=0.50, hx=0.03, hy=0.26),
)
# every goal band keeps a gap > the largest grasp offset (0.06) from every
# wall band, so the hand pose that places the object is always in free space
OBJECTIVE_TABLE = (
    ObjectiveParams("corner", requires_release=False,
                    gx_lo=0.84, gx_hi=0.90, gy_lo=0.82, gy_hi=0.88),
    ObjectiveParams("push_line", requires_release=False,
                    gx_lo=0.84, gx_hi=0.92, goal_on_object_row=True),
    ObjectiveParams("shelf", requires_release=True,
                    gx_lo=0.585, gx_hi=0.635, gy_lo=0.87, gy_hi=0.93),
    ObjectiveParams("trash", requires_release=True,
                    gx_lo=0.84, gx_hi=0.92, gy_lo=0.06, gy_hi=0.14),
)

# object spawn box: under the bar, left of both vertical walls, clear of goals
OBJECT_SPAWN = (0.12, 0.40, 0.14, 0.38)
# robot spawn box: same region, so the approach leg never needs a detour
ROBOT_SPAWN = (0.04, 0.44, 0.04, 0.44)


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 0.1
    horizon: int = 100
    v_max: float = 1.0
    grasp_tol: float = 0.10   # expert approach tolerance; attachment uses rho_o
    goal_tol: float = 0.05
    margin: float = 0.02      # failure when object exits workspace by more


@dataclass(frozen=True)
class TaskSpace:
    """The task grid: element parameter tables, one per axis."""
    robots: tuple[RobotParams, ...] = ROBOT_TABLE
    objects: tuple[ObjectParams, ...] = OBJECT_TABLE
    obstacles: tuple[ObstacleParams, ...] = OBSTACLE_TABLE
    objectives: tuple[ObjectiveParams, ...] = OBJECTIVE_TABLE

    @property
    def axes(self) -> tuple[AxisSpec, ...]:
        return (
            AxisSpec("robot", tuple(p.name for p in self.robots)),
            AxisSpec("object", tuple(p.name for p in self.objects)),
            AxisSpec("obstacle", tuple(p.name for p in self.obstacles)),
            AxisSpec("objective", tuple(p.name for p in self.objectives)),
        )

    @property
    def cardinalities(self) -> tuple[int, int, int, int]:
        return (len(self.robots), len(self.objects),
                len(self.obstacles), len(self.objectives))

    @property
    def indicator_dim(self) -> int:
        return sum(self.cardinalities)

    def tasks(self) -> list[TaskId]:
        return [t for t in itertools.product(*(range(c) for c in self.cardinalities))]

    def validate_task(self, task: TaskId) -> None:
        cards = self.cardinalities
        if len(task) != 4 or any(not (0 <= task[i] < cards[i]) for i in range(4)):
            raise ConfigurationError(f"task {task!r} outside grid {cards}")

    def params(self, task: TaskId):
        self.validate_task(task)
        return (self.robots[task[0]], self.objects[task[1]],
                self.obstacles[task[2]], self.objectives[task[3]])


def desk_space() -> TaskSpace:
    """The 2x2x2x2 grid used by the desk-scale experiments."""
    return TaskSpace(ROBOT_TABLE[:2], OBJECT_TABLE[:2],
                     OBSTACLE_TABLE[:2], OBJECTIVE_TABLE[:2])


def full_space() -> TaskSpace:
    return TaskSpace()


def task_indicator(space: TaskSpace, task: TaskId) -> np.ndarray:
    """Concatenated per-axis one-hot segments, axis order robot/object/obstacle/objective."""
    space.validate_task(task)
    out = np.zeros(space.indicator_dim, dtype=np.float32)
    offset = 0
    for idx, card in zip(task, space.cardinalities):
        out[offset + idx] = 1.0
        offset += card
    return out


def split_tasks(space: TaskSpace, n_train: int, seed: int,
                fixed_axes: dict[str, int] | None = None) -> tuple[list[TaskId], list[TaskId]]:
    """Deterministic shuffle-split of the task grid; first n_train are training tasks.

    fixed_axes restricts the grid before splitting, e.g. {"robot": 0} for the
    robot-fixed regime.
    """
    tasks = space.tasks()
    if fixed_axes:
        for name, idx in fixed_axes.items():
            if name not in AXES:
                raise ConfigurationError(f"unknown axis {name!r}")
            pos = AXES.index(name)
            tasks = [t for t in tasks if t[pos] == idx]
    if n_train >= len(tasks):
        raise ValueError(f"n_train={n_train} must be < total task count {len(tasks)}")
    order = np.random.default_rng(seed).permutation(len(tasks))
    shuffled = [tasks[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


def _strictly_inside(x: float, y: float, obst: ObstacleParams) -> bool:
    if not obst.present:
        return False
    return abs(x - obst.cx) < obst.hx and abs(y - obst.cy) < obst.hy


_D0 = math.sqrt(2.0)  # workspace diagonal


def _grasped(state, obj_params: ObjectParams) -> bool:
    # attachment is inferable from the emitted state: grip closed and within radius
    if state[4] <= 0.5:
        return False
    dx = float(state[7])
    dy = float(state[8])
    return math.hypot(dx, dy) <= obj_params.grasp_radius


def staged_reward(state: np.ndarray, task: TaskId, space: TaskSpace,
                  cfg: EnvConfig = EnvConfig()) -> float:
    """Dense staged reward in [0, 1]; exactly 1.0 iff placed.

    Stages saturate once passed: approach and grasp count as complete while the
    object is held or placed, transport counts as complete once placed. This
    keeps r = 1 attainable exactly and monotone under the scripted expert.
    """
    _, obj_p, _, goal_p = space.params(task)
    d_reach = math.hypot(float(state[7]), float(state[8]))
    d_goal = math.hypot(float(state[16]), float(state[17]))
    held = _grasped(state, obj_p)
    placed = d_goal <= cfg.goal_tol and (not goal_p.requires_release or not held)
    hold = held or placed
    approach = 1.0 if hold else min(max(1.0 - d_reach / _D0, 0.0), 1.0)
    grasp = 1.0 if hold else 0.0
    if not hold:
        transport = 0.0
    elif placed:
        transport = 1.0
    else:
        transport = min(max(1.0 - d_goal / _D0, 0.0), 1.0)
    return 0.25 * (approach + grasp + transport + (1.0 if placed else 0.0))


def reset(task: TaskId, seed: int, space: TaskSpace,
          cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Deterministic initial state for (task, seed)."""
    _, obj_p, obst, goal_p = space.params(task)
    rng = np.random.default_rng((0x5EED, seed) + tuple(task))

    x0, x1, y0, y1 = OBJECT_SPAWN
    for _ in range(1000):
        ox = x0 + (x1 - x0) * rng.random()
        oy = y0 + (y1 - y0) * rng.random()
        if not _strictly_inside(ox, oy, obst):
            break
    else:  # pragma: no cover - spawn box is disjoint from every wall band
        raise ConfigurationError("could not place object outside obstacle")

    if goal_p.goal_on_object_row:
        gx = goal_p.gx_lo + (goal_p.gx_hi - goal_p.gx_lo) * rng.random()
        gy = oy
    else:
        gx = goal_p.gx_lo + (goal_p.gx_hi - goal_p.gx_lo) * rng.random()
        gy = goal_p.gy_lo + (goal_p.gy_hi - goal_p.gy_lo) * rng.random()
    if _strictly_inside(gx, gy, obst):  # pragma: no cover - tables keep these disjoint
        raise ConfigurationError("goal region intersects obstacle")
    if math.hypot(gx - ox, gy - oy) <= cfg.goal_tol:  # pragma: no cover
        raise ConfigurationError("goal region intersects object spawn")

    rx0, rx1, ry0, ry1 = ROBOT_SPAWN
    for _ in range(1000):
        px = rx0 + (rx1 - rx0) * rng.random()
        py = ry0 + (ry1 - ry0) * rng.random()
        if not _strictly_inside(px, py, obst):
            break
    else:  # pragma: no cover
        raise ConfigurationError("could not place robot outside obstacle")

    s = np.empty(STATE_DIM, dtype=np.float32)
    s[0] = px
    s[1] = py
    s[2] = 0.0
    s[3] = 0.0
    s[4] = 0.0
    s[5] = ox
    s[6] = oy
    s[7] = np.float32(ox) - np.float32(px)
    s[8] = np.float32(oy) - np.float32(py)
    s[9] = obst.cx
    s[10] = obst.cy
    s[11] = obst.hx
    s[12] = obst.hy
    s[13] = 1.0 if obst.present else 0.0
    s[14] = gx
    s[15] = gy
    s[16] = np.float32(gx) - np.float32(ox)
    s[17] = np.float32(gy) - np.float32(oy)
    return s


def step_transition(state: np.ndarray, action, task: TaskId, space: TaskSpace,
                    cfg: EnvConfig = EnvConfig()) -> tuple[np.ndarray, float, float]:
    """One dynamics step; pure in (state, action, task, cfg). Returns (next, reward, terminal)."""
    a0 = float(action[0])
    a1 = float(action[1])
    a2 = float(action[2])
    if not (math.isfinite(a0) and math.isfinite(a1) and math.isfinite(a2)):
        raise ValueError(f"non-finite action {action!r}")
    a0 = -1.0 if a0 < -1.0 else (1.0 if a0 > 1.0 else a0)
    a1 = -1.0 if a1 < -1.0 else (1.0 if a1 > 1.0 else a1)

    robot, obj_p, obst, goal_p = space.params(task)
    px = float(state[0]); py = float(state[1])
    vx = float(state[2]); vy = float(state[3])
    ox = float(state[5]); oy = float(state[6])
    gx = float(state[14]); gy = float(state[15])

    held = _grasped(state, obj_p)
    off_x = ox - px
    off_y = oy - py

    scale = robot.gain / obj_p.mass if held else robot.gain
    nvx = (1.0 - robot.damping) * vx + scale * cfg.dt * a0
    nvy = (1.0 - robot.damping) * vy + scale * cfg.dt * a1
    speed = math.hypot(nvx, nvy)
    if speed > cfg.v_max:
        k = cfg.v_max / speed
        nvx *= k
        nvy *= k

    # per-component motion with obstacle rejection; carried object blocks too
    cx = px + cfg.dt * nvx
    cx = 0.0 if cx < 0.0 else (1.0 if cx > 1.0 else cx)
    if _strictly_inside(cx, py, obst) or (held and _strictly_inside(cx + off_x, py + off_y, obst)):
        cx = px
    cy = py + cfg.dt * nvy
    cy = 0.0 if cy < 0.0 else (1.0 if cy > 1.0 else cy)
    if _strictly_inside(cx, cy, obst) or (held and _strictly_inside(cx + off_x, cy + off_y, obst)):
        cy = py

    grip = 1.0 if a2 > 0.0 else 0.0
    if grip == 1.0 and held:
        attached = True          # keeps the original offset
    elif grip == 1.0:
        attached = math.hypot(ox - cx, oy - cy) <= obj_p.grasp_radius
        # attaching does not move the object; offset recorded implicitly
    else:
        attached = False

    if held and attached:
        raw_ox = cx + off_x
        raw_oy = cy + off_y
    else:
        raw_ox = ox
        raw_oy = oy

    terminal = 1.0 if (raw_ox < -cfg.margin or raw_ox > 1.0 + cfg.margin
                       or raw_oy < -cfg.margin or raw_oy > 1.0 + cfg.margin) else 0.0
    nox = 0.0 if raw_ox < 0.0 else (1.0 if raw_ox > 1.0 else raw_ox)
    noy = 0.0 if raw_oy < 0.0 else (1.0 if raw_oy > 1.0 else raw_oy)

    nxt = np.empty(STATE_DIM, dtype=np.float32)
    nxt[0] = cx
    nxt[1] = cy
    nxt[2] = nvx
    nxt[3] = nvy
    nxt[4] = grip
    nxt[5] = nox
    nxt[6] = noy
    nxt[7] = np.float32(nox) - np.float32(cx)
    nxt[8] = np.float32(noy) - np.float32(cy)
    nxt[9:14] = state[9:14]
    nxt[14] = gx
    nxt[15] = gy
    nxt[16] = np.float32(gx) - np.float32(nox)
    nxt[17] = np.float32(gy) - np.float32(noy)

    reward = staged_reward(nxt, task, space, cfg)
    return nxt, reward, terminal


class Episode:
    """Stateful episode wrapper enforcing the absorbing failure semantics.

    After terminal=1 the episode stays in its final state and every further
    step returns reward 0 and terminal 1, however long the caller continues.
    """

    def __init__(self, task: TaskId, seed: int, space: TaskSpace,
                 cfg: EnvConfig = EnvConfig()):
        self.task = task
        self.space = space
        self.cfg = cfg
        self.state = reset(task, seed, space, cfg)
        self.done = False
        self.t = 0

    def step(self, action) -> tuple[np.ndarray, float, float]:
        if self.done:
            return self.state, 0.0, 1.0
        nxt, reward, terminal = step_transition(self.state, action, self.task,
                                                self.space, self.cfg)
        self.state = nxt
        self.t += 1
        self.done = terminal == 1.0
        return nxt, reward, terminal


def rollout(policy, task: TaskId, seed: int, space: TaskSpace,
            cfg: EnvConfig = EnvConfig(), stop_on_success: bool = False,
            record: list | None = None) -> tuple[float, bool]:
    """Run one episode. Returns (max reward, success). Optionally records transitions.

    After a failure termination the episode is absorbing and non-rewarding;
    recording stops there (failure rows end with terminal=1).
    """
    state = reset(task, seed, space, cfg)
    best = 0.0
    for _ in range(cfg.horizon):
        action = policy(state)
        nxt, reward, terminal = step_transition(state, action, task, space, cfg)
        if record is not None:
            row = np.empty(TRANSITION_DIM, dtype=np.float32)
            row[T_STATE] = state
            row[T_ACTION] = np.clip(np.asarray(action, dtype=np.float32), -1.0, 1.0)
            row[T_REWARD] = reward
            row[T_NEXT_STATE] = nxt
            row[T_TERMINAL] = terminal
            record.append(row)
        if reward > best:
            best = reward
        state = nxt
        if terminal == 1.0:
            break
        if stop_on_success and best == 1.0:
            break
    return best, best == 1.0


def evaluate_success(policy, task: TaskId, n_episodes: int, seed: int,
                     space: TaskSpace, cfg: EnvConfig = EnvConfig()) -> float:
    """Fraction of episodes reaching reward exactly 1.0 within the horizon."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    wins = 0
    for ep in range(n_episodes):
        _, ok = rollout(policy, task, seed * 100003 + ep, space, cfg, stop_on_success=True)
        wins += int(ok)
    return wins / n_episodes
