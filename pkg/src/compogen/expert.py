"""Scripted controller that solves every task in the factored task grid.

The controller is a waypoint PD scheme: pick the point the gripper has to
reach (the object before the grasp, the goal afterwards), route around the
wall with at most one corridor detour, and drive the hand with a damped
proportional rule.  It is deliberately stateless: the action depends only on
the current observation, so recorded trajectories replay exactly.
"""

from __future__ import annotations

import math

import numpy as np

from .env import (
    ConfigurationError,
    EnvConfig,
    ObstacleParams,
    TaskId,
    TaskSpace,
    evaluate_success,
)

# lateral clearance for corridor waypoints and the skin added to the wall
# band when testing whether a straight leg is safe
CLEARANCE = 0.05
BEYOND = 0.03
SKIN = 0.005
# fraction of the available acceleration assumed when planning braking
BRAKE = 0.9


def _segment_hits_box(px: float, py: float, tx: float, ty: float,
                      lo_x: float, hi_x: float, lo_y: float, hi_y: float) -> bool:
    """Does the segment p->t intersect the axis-aligned box? (slab test)"""
    dx = tx - px
    dy = ty - py
    t0, t1 = 0.0, 1.0
    for d, p, lo, hi in ((dx, px, lo_x, hi_x), (dy, py, lo_y, hi_y)):
        if d == 0.0:
            if p < lo or p > hi:
                return False
        else:
            a = (lo - p) / d
            b = (hi - p) / d
            if a > b:
                a, b = b, a
            t0 = max(t0, a)
            t1 = min(t1, b)
            if t0 > t1:
                return False
    return True


def _navigation_target(px: float, py: float, tx: float, ty: float,
                       obst: ObstacleParams,
                       rel_x: float = 0.0, rel_y: float = 0.0) -> tuple[float, float]:
    """Waypoint toward (tx, ty), detouring through the wall corridor when the
    straight segment would clip the wall band.

    (rel_x, rel_y) is the carried object's offset from the hand (zero when
    nothing is held).  The band is expanded so that both the hand point and
    the hand point plus the offset stay outside the wall.
    """
    if not obst.present:
        return tx, ty
    lo_x = obst.cx - obst.hx - max(rel_x, 0.0) - SKIN
    hi_x = obst.cx + obst.hx - min(rel_x, 0.0) + SKIN
    lo_y = obst.cy - obst.hy - max(rel_y, 0.0) - SKIN
    hi_y = obst.cy + obst.hy - min(rel_y, 0.0) + SKIN
    if not _segment_hits_box(px, py, tx, ty, lo_x, hi_x, lo_y, hi_y):
        return tx, ty
    # u is the crossing axis (thin side of the band), w runs along the band
    if obst.hy >= obst.hx:
        u_p, w_p, u_t, w_t = px, py, tx, ty
        rel_u = rel_x
        lo_u, hi_u, lo_w, hi_w = lo_x, hi_x, lo_y, hi_y
        swap = False
    else:
        u_p, w_p, u_t, w_t = py, px, ty, tx
        rel_u = rel_y
        lo_u, hi_u, lo_w, hi_w = lo_y, hi_y, lo_x, hi_x
        swap = True
    margin = CLEARANCE + BEYOND
    if lo_u < u_p < hi_u and lo_w < w_p < hi_w:
        # wedged in the expanded band after an overshoot: back straight out
        # through the nearest face
        s = u_p - (lo_u + hi_u) / 2.0
        if s == 0.0:
            s = rel_u if rel_u != 0.0 else 1.0
        u_go = (hi_u + margin) if s >= 0.0 else (lo_u - margin)
        return (w_p, u_go) if swap else (u_go, w_p)
    lanes = []
    if lo_w - margin >= 0.03:
        lanes.append(lo_w - margin)
    if hi_w + margin <= 0.97:
        lanes.append(hi_w + margin)
    if not lanes:  # band spans the workspace; no corridor to offer
        return tx, ty
    # anchored to the target so the choice cannot flip mid-flight
    lane = min(lanes, key=lambda l: abs(l - w_t))
    side = 1.0 if u_t >= (lo_u + hi_u) / 2.0 else -1.0
    beyond = (hi_u + margin) if side > 0.0 else (lo_u - margin)
    if (u_p - beyond) * side >= 0.0:
        return tx, ty
    if abs(w_p - lane) > 0.08:
        # diagonal leg to the corridor mouth on this side of the band
        u_go = (lo_u - margin) if side > 0.0 else (hi_u + margin)
        w_go = lane
    else:
        u_go, w_go = beyond, lane
    return (w_go, u_go) if swap else (u_go, w_go)


def make_expert(task: TaskId, space: TaskSpace, cfg: EnvConfig = EnvConfig()):
    """Build the scripted policy for one task. Returns act(state) -> action."""
    robot_p, obj_p, obst, goal_p = space.params(task)
    grab_tol = min(0.055, obj_p.grasp_radius - 0.005)
    settle_tol = 0.5 * cfg.goal_tol
    gain = robot_p.gain
    keep = 1.0 - robot_p.damping

    def act(state: np.ndarray) -> np.ndarray:
        px, py, vx, vy = float(state[0]), float(state[1]), float(state[2]), float(state[3])
        grip = float(state[4])
        ox, oy = float(state[5]), float(state[6])
        rel_x, rel_y = float(state[7]), float(state[8])
        gx, gy = float(state[14]), float(state[15])
        d_obj = math.hypot(rel_x, rel_y)
        d_goal = math.hypot(gx - ox, gy - oy)
        held = grip > 0.5 and d_obj <= obj_p.grasp_radius
        placed = d_goal <= cfg.goal_tol and (not goal_p.requires_release or not held)
        accel = gain / obj_p.mass if held else gain

        if placed and goal_p.requires_release:
            # object rests in the goal zone; stop and stay clear
            vdx, vdy = 0.0, 0.0
            a2 = -1.0
        elif held:
            # steer the carried object's target point, offset back to the
            # hand; once placed this keeps the object pinned at the goal
            wx, wy = gx - rel_x, gy - rel_y
            nx, ny = _navigation_target(px, py, wx, wy, obst, rel_x, rel_y)
            release = goal_p.requires_release and d_goal <= settle_tol
            a2 = -1.0 if release else 1.0
            vdx, vdy = _braked_velocity(nx - px, ny - py, accel, cfg.v_max)
        else:
            u = math.hypot(gx - ox, gy - oy)
            ux = (gx - ox) / u if u > 1e-9 else 1.0
            uy = (gy - oy) / u if u > 1e-9 else 0.0
            # aim a hair past the object on the goal side, so arrival speed
            # already points where the carry is about to go
            nx, ny = _navigation_target(px, py, ox + 0.04 * ux, oy + 0.04 * uy, obst)
            # close the grip only while moving toward the goal (standstill
            # counts), so the object never gets dragged backwards in the
            # instant after it attaches
            goalward = (vx * (gx - ox) + vy * (gy - oy) >= 0.0
                        or math.hypot(vx, vy) <= 3e-7)
            if d_obj <= grab_tol:
                a2 = 1.0 if goalward else -1.0
                if goalward:
                    # attach is imminent; move with the goal, not the waypoint
                    vdx, vdy = _braked_velocity(gx - ox, gy - oy, accel, cfg.v_max)
                else:
                    # halt in place, then leave goalward from rest
                    vdx, vdy = 0.0, 0.0
            else:
                a2 = -1.0
                vdx, vdy = _braked_velocity(nx - px, ny - py, accel, cfg.v_max)

        # deadbeat velocity tracking: pick the action that lands on the
        # desired velocity, saturating to full throttle when out of reach
        ax = (vdx - keep * vx) / (accel * cfg.dt)
        ay = (vdy - keep * vy) / (accel * cfg.dt)
        return np.array([max(-1.0, min(1.0, ax)),
                         max(-1.0, min(1.0, ay)), a2], dtype=np.float32)

    return act


def _braked_velocity(dx: float, dy: float, accel: float,
                     v_max: float) -> tuple[float, float]:
    """Velocity toward (dx, dy) capped by the stopping envelope sqrt(2aD)."""
    dist = math.hypot(dx, dy)
    if dist <= 1e-9:
        return 0.0, 0.0
    speed = min(v_max, math.sqrt(2.0 * BRAKE * accel * dist))
    return dx / dist * speed, dy / dist * speed


def expert_self_check(task: TaskId, space: TaskSpace,
                      cfg: EnvConfig = EnvConfig(), episodes: int = 2) -> None:
    """Raise unless the scripted controller solves the task."""
    policy = make_expert(task, space, cfg)
    rate = evaluate_success(policy, task, episodes, 7919, space, cfg)
    if rate < 1.0:
        raise ConfigurationError(
            f"scripted controller failed task {task}: success {rate:.2f}")


def collect_expert_data(task: TaskId, n_transitions: int, noise_scale: float,
                        seed: int, space: TaskSpace,
                        cfg: EnvConfig = EnvConfig()) -> np.ndarray:
    """Roll the scripted controller with exploration noise until at least
    n_transitions rows exist, then truncate. Rows are the flat transition
    layout [state, action, reward, next_state, terminal]."""
    from .env import rollout

    if n_transitions < 1:
        raise ValueError("n_transitions must be positive")
    expert_self_check(task, space, cfg)
    policy = make_expert(task, space, cfg)
    rng = np.random.default_rng((0xDA7A, seed) + tuple(task))

    def noisy(state: np.ndarray) -> np.ndarray:
        action = policy(state)
        if noise_scale > 0.0:
            action = action + rng.normal(0.0, noise_scale, size=3)
        return np.clip(action, -1.0, 1.0).astype(np.float32)

    rows: list[np.ndarray] = []
    stalls = 0
    while len(rows) < n_transitions:
        before = len(rows)
        rollout(noisy, task, int(rng.integers(1 << 31)), space, cfg, record=rows)
        if len(rows) == before:
            stalls += 1
            if stalls > 10:  # pragma: no cover - episodes always emit rows
                raise ConfigurationError("episode produced no transitions")
    return np.stack(rows[:n_transitions], axis=0)
