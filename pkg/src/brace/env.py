"""2D cursor workspace: procedural scene generation and blended-control stepping.

Coordinates are in workspace units with the origin at the top-left corner.
One step corresponds to one control tick; speeds are units per step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

Vec = tuple[float, float]


@dataclass(frozen=True)
class EnvConfig:
    width: float = 800.0
    height: float = 600.0
    margin: float = 50.0
    v_max: float = 10.0
    max_steps: int = 300
    success_radius: float = 20.0
    obstacle_radius_min: float = 25.0
    obstacle_radius_max: float = 45.0
    min_goal_separation: float = 100.0
    d_safe: float = 120.0
    start: Vec = (100.0, 300.0)
    goal_distance_min: float = 300.0
    goal_distance_max: float = 650.0
    # Collisions flag the step without blocking motion; set True to end the
    # episode on first contact (the evaluation suites use that stricter mode).
    collision_terminal: bool = False

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)


DEFAULT_ENV = EnvConfig()


@dataclass(frozen=True)
class Goal:
    id: int
    position: Vec
    radius: float


@dataclass(frozen=True)
class Obstacle:
    position: Vec
    radius: float


@dataclass(frozen=True)
class EnvState:
    cursor: Vec
    cursor_velocity: Vec
    goals: tuple[Goal, ...]
    obstacles: tuple[Obstacle, ...]
    true_goal_id: int
    step_index: int
    stage: int = 0

    @property
    def true_goal(self) -> Goal:
        return self.goals[self.true_goal_id]


@dataclass(frozen=True)
class StepOutcome:
    collision: bool
    reached_goal_id: int | None
    progress: float  # decrease in distance to the true goal this step
    terminal: bool


@dataclass(frozen=True)
class ContextFeatures:
    goal_distances: tuple[float, ...]
    nearest_obstacle_distance: float  # edge distance; workspace diagonal if none
    constraint_severity: float  # 1 near contact, 0 when clear of d_safe
    normalized_step: float


class GenerationError(RuntimeError):
    """Scene generation could not satisfy a placement constraint."""

    def __init__(self, constraint: str, seed: int, stage: int):
        super().__init__(f"generation infeasible: {constraint} (seed={seed}, stage={stage})")
        self.constraint = constraint


def _norm(v: Vec) -> float:
    return math.hypot(v[0], v[1])


def _dist(a: Vec, b: Vec) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def clip_to_speed(action: Vec, v_max: float) -> Vec:
    """Scale an action down to the speed limit, preserving direction."""
    mag = _norm(action)
    if mag <= v_max or mag == 0.0:
        return action
    scale = v_max / mag
    return (action[0] * scale, action[1] * scale)


def nearest_obstacle_edge(point: Vec, obstacles: tuple[Obstacle, ...], config: EnvConfig) -> float:
    """Distance from point to the closest obstacle boundary, clamped at 0.

    With no obstacles present returns the workspace diagonal so downstream
    features saturate instead of special-casing.
    """
    if not obstacles:
        return config.diagonal
    best = min(_dist(point, ob.position) - ob.radius for ob in obstacles)
    return max(0.0, best)


STAGE_RECIPES = {
    1: {"goals": 1, "obstacles": 0},
    2: {"goals": 1, "obstacles": 2},
    3: {"goals": 2, "obstacles": 4},
    4: {"goals": 3, "obstacles": 3, "clustered": True},
    5: {"goals": 3, "obstacles": 5, "passage": True},
}

# Narrow-passage clearance between the flanking obstacle edges, in multiples
# of the per-step speed limit.
PASSAGE_GAP_FACTOR = 2.2


def _sample_goal(rng: np.random.Generator, config: EnvConfig,
                 existing: list[Vec]) -> Vec | None:
    sx, sy = config.start
    lo, hi = config.margin, None
    for _ in range(80):
        theta = rng.uniform(-1.4, 1.4)  # rightward fan from the start point
        dist = rng.uniform(config.goal_distance_min, config.goal_distance_max)
        pos = (sx + dist * math.cos(theta), sy + dist * math.sin(theta))
        if not (config.margin <= pos[0] <= config.width - config.margin):
            continue
        if not (config.margin <= pos[1] <= config.height - config.margin):
            continue
        if any(_dist(pos, other) < config.min_goal_separation for other in existing):
            continue
        return pos
    return None


def _sample_clustered_goals(rng: np.random.Generator, config: EnvConfig) -> list[Vec] | None:
    """Three goals inside a narrow angular sector, radially staggered.

    The sector span is drawn per scene so that downstream uncertainty
    varies from trivially-separable to genuinely ambiguous layouts.
    """
    sx, sy = config.start
    span = math.radians(rng.uniform(10.0, 45.0))
    theta0 = rng.uniform(-0.5, 0.5)
    angles = [theta0 - span / 2.0,
              theta0 + span * rng.uniform(-0.25, 0.25),
              theta0 + span / 2.0]
    bands = [(310.0, 430.0), (440.0, 520.0), (550.0, 650.0)]
    order = rng.permutation(3)
    positions: list[Vec] = []
    for k in range(3):
        lo, hi = bands[order[k]]
        dist = rng.uniform(lo, hi)
        pos = (sx + dist * math.cos(angles[k]), sy + dist * math.sin(angles[k]))
        if not (config.margin <= pos[0] <= config.width - config.margin):
            return None
        if not (config.margin <= pos[1] <= config.height - config.margin):
            return None
        positions.append(pos)
    for i in range(3):
        for j in range(i + 1, 3):
            if _dist(positions[i], positions[j]) < config.min_goal_separation:
                return None
    return positions


def _obstacle_ok(center: Vec, radius: float, goals: list[Vec],
                 placed: list[Obstacle], config: EnvConfig) -> bool:
    if not (radius <= center[0] <= config.width - radius):
        return False
    if not (radius <= center[1] <= config.height - radius):
        return False
    if _dist(center, config.start) < radius + 40.0:
        return False
    for gpos in goals:
        if _dist(center, gpos) < radius + config.success_radius + 15.0:
            return False
    for other in placed:
        if _dist(center, other.position) < radius + other.radius + 8.0:
            return False
    return True


def _sample_segment_obstacle(rng: np.random.Generator, config: EnvConfig,
                             goals: list[Vec], placed: list[Obstacle]) -> Obstacle | None:
    sx, sy = config.start
    for _ in range(60):
        gpos = goals[int(rng.integers(len(goals)))]
        t = rng.uniform(0.35, 0.75)
        radius = rng.uniform(config.obstacle_radius_min, config.obstacle_radius_max)
        base = (sx + t * (gpos[0] - sx), sy + t * (gpos[1] - sy))
        seg = (gpos[0] - sx, gpos[1] - sy)
        seg_len = _norm(seg)
        if seg_len == 0.0:
            return None
        normal = (-seg[1] / seg_len, seg[0] / seg_len)
        offset = rng.uniform(-1.2, 1.2) * radius
        center = (base[0] + offset * normal[0], base[1] + offset * normal[1])
        if _obstacle_ok(center, radius, goals, placed, config):
            return Obstacle(position=center, radius=radius)
    return None


def _sample_passage_pair(rng: np.random.Generator, config: EnvConfig, goals: list[Vec],
                         true_pos: Vec, placed: list[Obstacle]) -> list[Obstacle] | None:
    """Two obstacles flanking the start-to-true-goal line, leaving a tight gap."""
    sx, sy = config.start
    gap = PASSAGE_GAP_FACTOR * config.v_max
    seg = (true_pos[0] - sx, true_pos[1] - sy)
    seg_len = _norm(seg)
    if seg_len == 0.0:
        return None
    normal = (-seg[1] / seg_len, seg[0] / seg_len)
    for _ in range(60):
        t = rng.uniform(0.4, 0.6)
        mid = (sx + t * seg[0], sy + t * seg[1])
        r1 = rng.uniform(config.obstacle_radius_min, config.obstacle_radius_max)
        r2 = rng.uniform(config.obstacle_radius_min, config.obstacle_radius_max)
        c1 = (mid[0] + (gap / 2.0 + r1) * normal[0], mid[1] + (gap / 2.0 + r1) * normal[1])
        c2 = (mid[0] - (gap / 2.0 + r2) * normal[0], mid[1] - (gap / 2.0 + r2) * normal[1])
        first = Obstacle(position=c1, radius=r1)
        if not _obstacle_ok(c1, r1, goals, placed, config):
            continue
        if not _obstacle_ok(c2, r2, goals, placed + [first], config):
            continue
        return [first, Obstacle(position=c2, radius=r2)]
    return None


def generate_environment(seed: int, stage: int, config: EnvConfig = DEFAULT_ENV) -> EnvState:
    """Build a scene for the given curriculum stage, deterministically in seed.

    Raises GenerationError naming the first unsatisfiable constraint after
    bounded retries; callers should treat that as a skipped seed, not a bug.
    """
    if stage not in STAGE_RECIPES:
        raise ValueError(f"unknown stage: {stage}")
    recipe = STAGE_RECIPES[stage]
    rng = np.random.default_rng([seed, stage])
    failure = "goal placement"
    for _ in range(200):
        if recipe.get("clustered"):
            positions = _sample_clustered_goals(rng, config)
        else:
            positions = []
            for _ in range(recipe["goals"]):
                pos = _sample_goal(rng, config, positions)
                if pos is None:
                    positions = None
                    break
                positions.append(pos)
        if not positions:
            failure = "goal placement"
            continue

        true_goal_id = int(rng.integers(len(positions)))
        obstacles: list[Obstacle] = []
        want = recipe["obstacles"]
        if recipe.get("passage"):
            pair = _sample_passage_pair(rng, config, positions,
                                        positions[true_goal_id], obstacles)
            if pair is None:
                failure = "narrow passage placement"
                continue
            obstacles.extend(pair)
        ok = True
        while len(obstacles) < want:
            ob = _sample_segment_obstacle(rng, config, positions, obstacles)
            if ob is None:
                ok = False
                failure = "obstacle placement"
                break
            obstacles.append(ob)
        if not ok:
            continue

        goals = tuple(Goal(id=i, position=pos, radius=config.success_radius)
                      for i, pos in enumerate(positions))
        return EnvState(cursor=config.start, cursor_velocity=(0.0, 0.0),
                        goals=goals, obstacles=tuple(obstacles),
                        true_goal_id=true_goal_id, step_index=0, stage=stage)
    raise GenerationError(failure, seed=seed, stage=stage)


def _validate_action(name: str, action: Vec) -> None:
    if len(action) != 2 or not all(math.isfinite(c) for c in action):
        raise ValueError(f"invalid {name} action: {action!r}")


def step(state: EnvState, human_action: Vec, expert_action: Vec, gamma: float,
         config: EnvConfig = DEFAULT_ENV) -> tuple[EnvState, StepOutcome]:
    """Advance one tick with the blend (1-gamma)*human + gamma*expert.

    Both component actions are speed-clipped before blending, so the
    executed motion never exceeds v_max. A step whose endpoint lands inside
    an obstacle is a collision: the contact is flagged (and ends the
    episode in strict mode) but the cursor is not blocked, since a cursor
    can hover a forbidden region. When the endpoint would simultaneously
    touch the goal, the collision outcome wins.
    """
    _validate_action("human", human_action)
    _validate_action("expert", expert_action)
    if not (math.isfinite(gamma) and 0.0 <= gamma <= 1.0):
        raise ValueError(f"invalid gamma: {gamma!r}")

    h = clip_to_speed(human_action, config.v_max)
    w = clip_to_speed(expert_action, config.v_max)
    executed = ((1.0 - gamma) * h[0] + gamma * w[0],
                (1.0 - gamma) * h[1] + gamma * w[1])
    new_cursor = (min(max(state.cursor[0] + executed[0], 0.0), config.width),
                  min(max(state.cursor[1] + executed[1], 0.0), config.height))

    collision = any(_dist(new_cursor, ob.position) < ob.radius for ob in state.obstacles)
    realized = (new_cursor[0] - state.cursor[0], new_cursor[1] - state.cursor[1])

    true_pos = state.true_goal.position
    d_prev = _dist(state.cursor, true_pos)
    d_new = _dist(new_cursor, true_pos)
    reached: int | None = None
    if not collision and d_new <= state.true_goal.radius:
        reached = state.true_goal_id

    terminal = reached is not None
    if collision and config.collision_terminal:
        terminal = True
    next_state = replace(state, cursor=new_cursor, cursor_velocity=realized,
                         step_index=state.step_index + 1)
    if next_state.step_index >= config.max_steps:
        terminal = True
    return next_state, StepOutcome(collision=collision, reached_goal_id=reached,
                                   progress=d_prev - d_new, terminal=terminal)


def path_efficiency(points: Sequence[Vec]) -> float:
    """Straight-line endpoint distance over realized arc length, in (0, 1]
    by the triangle inequality; a path that never moves scores 1.0."""
    if len(points) < 2:
        return 1.0
    arc = sum(_dist(points[i], points[i + 1]) for i in range(len(points) - 1))
    if arc <= 1e-12:
        return 1.0
    return min(1.0, _dist(points[0], points[-1]) / arc)


def context_features(state: EnvState, config: EnvConfig = DEFAULT_ENV) -> ContextFeatures:
    dists = tuple(_dist(state.cursor, g.position) for g in state.goals)
    edge = nearest_obstacle_edge(state.cursor, state.obstacles, config)
    severity = 1.0 - min(1.0, edge / config.d_safe)
    return ContextFeatures(goal_distances=dists,
                           nearest_obstacle_distance=edge,
                           constraint_severity=severity,
                           normalized_step=state.step_index / config.max_steps)


def observation_vector(state: EnvState, human_action: Vec,
                       config: EnvConfig = DEFAULT_ENV) -> np.ndarray:
    """Fixed 10-dim scaled observation; requires exactly three goals.

    Layout: cursor x/y in [-1,1], human action / v_max, three goal
    distances / diagonal, nearest obstacle edge distance / diagonal,
    constraint severity, normalized step index.
    """
    if len(state.goals) != 3:
        raise ValueError(f"observation layout mismatch: need 3 goals, got {len(state.goals)}")
    ctx = context_features(state, config)
    diag = config.diagonal
    return np.array([
        state.cursor[0] / (config.width / 2.0) - 1.0,
        state.cursor[1] / (config.height / 2.0) - 1.0,
        human_action[0] / config.v_max,
        human_action[1] / config.v_max,
        ctx.goal_distances[0] / diag,
        ctx.goal_distances[1] / diag,
        ctx.goal_distances[2] / diag,
        ctx.nearest_obstacle_distance / diag,
        ctx.constraint_severity,
        ctx.normalized_step,
    ], dtype=np.float64)
