"""Scripted teleoperator: via-point routing, bell-paced speed, filtered noise.

The pilot heads for the true goal along a planned polyline, paces itself
with a minimum-jerk style bell over each segment, and corrupts the command
with first-order autoregressive noise so errors are temporally correlated
the way sloppy human input is.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .belief import CalibrationTrajectory
from .env import DEFAULT_ENV, EnvConfig, EnvState, Obstacle, clip_to_speed, generate_environment, step

Vec = tuple[float, float]

# Planner geometry: preferred clearance around obstacle edges, hard floor
# below which a candidate route is rejected outright, and the radius at
# which an intermediate waypoint counts as reached. The switch radius must
# stay below the preferred clearance or corner cuts can clip obstacles.
PLAN_CLEARANCE = 15.0
HARD_CLEARANCE = 1.0
SWITCH_RADIUS = 10.0

# Course correction: once the cursor has drifted this far away from its
# current waypoint beyond the closest approach on the leg, the operator
# notices and re-plans from where they actually are. Without this the
# pilot chases stale waypoints backward whenever something (noise streaks,
# an assistive blend) displaces the cursor off the original route.
REPLAN_DRIFT = 40.0

# Speed pacing: bell profile peak value (max of 30 p^2 (1-p)^2 on [0,1])
# and the linear taper distance near a waypoint.
BELL_PEAK = 1.875
D_TAPER = 100.0
SPEED_FLOOR_FRAC = 0.3

# Per-step normalization of the reach-level noise budget: the unit-RMS AR
# stream is scaled to noise_amplitude * straight_length * this constant
# per step. Pinned so the default amplitude reproduces the intended
# operator fallibility (see the frozen success-floor tests).
NOISE_STEP_NORM = 0.35


@dataclass(frozen=True)
class PilotConfig:
    noise_amplitude: float = 0.032  # mean fraction of straight-line distance, per-reach
    ar_coefficient: float = 0.5  # lag-1 autocorrelation of the injected noise
    via_point_gain: float = 1.3  # multiplier on the clearance offset at via points
    reaction_delay: int = 0  # ticks of perceptual lag on the deterministic component
    rng_seed: int = 0
    # Relative spread of per-reach amplitude draws (population skill spread;
    # SD/mean of the modeled operators). Zero makes every reach identical.
    amplitude_spread: float = 0.84

    def __post_init__(self):
        if not 0.0 <= self.noise_amplitude <= 0.1:
            raise ValueError("noise_amplitude must lie in [0, 0.1]")
        if not 0.0 <= self.ar_coefficient < 1.0:
            raise ValueError("ar_coefficient must lie in [0, 1)")
        if self.reaction_delay < 0:
            raise ValueError("reaction_delay must be non-negative")


def _dist(a: Vec, b: Vec) -> float:
    return math.hypot(a[0] - b[0], a[1] - b[1])


def _segment_clearance(p: Vec, q: Vec, obstacles: tuple[Obstacle, ...]) -> float:
    """Smallest edge distance between segment pq and any obstacle."""
    if not obstacles:
        return math.inf
    px, py = p
    dx, dy = q[0] - px, q[1] - py
    seg_len2 = dx * dx + dy * dy
    best = math.inf
    for ob in obstacles:
        ox, oy = ob.position
        if seg_len2 == 0.0:
            d = math.hypot(ox - px, oy - py)
        else:
            t = max(0.0, min(1.0, ((ox - px) * dx + (oy - py) * dy) / seg_len2))
            d = math.hypot(ox - (px + t * dx), oy - (py + t * dy))
        best = min(best, d - ob.radius)
    return best


def _segment_hits(p: Vec, q: Vec, ob: Obstacle, clearance: float) -> bool:
    return _segment_clearance(p, q, (ob,)) < clearance


def _in_bounds(pt: Vec, config: EnvConfig) -> bool:
    pad = 10.0
    return pad <= pt[0] <= config.width - pad and pad <= pt[1] <= config.height - pad


def _detour_candidates(p: Vec, q: Vec, ob: Obstacle, gain: float,
                       obstacles: tuple[Obstacle, ...],
                       config: EnvConfig) -> list[Vec]:
    """Offset points beside the blocking obstacle plus gate midpoints
    through any nearby obstacle pair, in deterministic preference order."""
    px, py = p
    dx, dy = q[0] - px, q[1] - py
    seg_len2 = dx * dx + dy * dy
    ox, oy = ob.position
    if seg_len2 > 0.0:
        t = max(0.05, min(0.95, ((ox - px) * dx + (oy - py) * dy) / seg_len2))
        foot = (px + t * dx, py + t * dy)
    else:
        foot = p
    away = (foot[0] - ox, foot[1] - oy)
    mag = math.hypot(*away)
    if mag < 1e-9:
        norm = math.hypot(dx, dy) or 1.0
        away = (-dy / norm, dx / norm)
        mag = 1.0
    unit = (away[0] / mag, away[1] / mag)

    out: list[Vec] = []
    for side in (1.0, -1.0):
        for mult in (1.0, 1.4, 1.9, 2.6, 3.4):
            offset = (ob.radius + PLAN_CLEARANCE) * gain * mult * side
            cand = (ox + unit[0] * offset, oy + unit[1] * offset)
            if _in_bounds(cand, config):
                out.append(cand)
    for other in obstacles:
        if other is ob:
            continue
        gap_vec = (other.position[0] - ox, other.position[1] - oy)
        centers = math.hypot(*gap_vec)
        gap = centers - ob.radius - other.radius
        if gap <= 2.0 * HARD_CLEARANCE or gap > 120.0:
            continue
        u = (gap_vec[0] / centers, gap_vec[1] / centers)
        along = ob.radius + gap / 2.0
        gate = (ox + u[0] * along, oy + u[1] * along)
        if _in_bounds(gate, config):
            out.append(gate)
    return out


def plan_via_points(start: Vec, goal: Vec, obstacles: tuple[Obstacle, ...],
                    config: EnvConfig = DEFAULT_ENV,
                    gain: float = 1.3) -> list[Vec]:
    """Waypoints (excluding start and goal) clearing obstacles on the route.

    Works down the path inserting one detour per blocking obstacle; routes
    that newly clip a different obstacle are repaired on later passes.
    Prefers fully-cleared detours by added length; in tight passages falls
    back to the best clearance-versus-length tradeoff, which selects the
    gate midpoint between paired obstacles. Deterministic: pure geometry.
    """
    path: list[Vec] = [start, goal]
    handled: set[int] = set()
    for _ in range(12):
        blocking = None
        seg_idx = 0
        for i in range(len(path) - 1):
            for k, ob in enumerate(obstacles):
                if k in handled:
                    continue
                if _segment_hits(path[i], path[i + 1], ob, PLAN_CLEARANCE):
                    blocking, seg_idx = (k, ob), i
                    break
            if blocking:
                break
        if not blocking:
            break
        k, ob = blocking
        handled.add(k)
        p, q = path[seg_idx], path[seg_idx + 1]
        base_len = _dist(p, q)
        # Settled obstacles will not be revisited, so a candidate may not
        # cross them; crossings of still-open obstacles get fixed later.
        settled = tuple(o for j, o in enumerate(obstacles) if j in handled)
        clean: list[tuple[float, Vec]] = []
        fallback: list[tuple[float, Vec]] = []
        for cand in _detour_candidates(p, q, ob, gain, obstacles, config):
            if any(_dist(cand, existing) < 1.0 for existing in path):
                continue
            c1 = _segment_clearance(p, cand, settled)
            c2 = _segment_clearance(cand, q, settled)
            if min(c1, c2) < HARD_CLEARANCE:
                continue
            all_clear = min(_segment_clearance(p, cand, obstacles),
                            _segment_clearance(cand, q, obstacles))
            added = _dist(p, cand) + _dist(cand, q) - base_len
            if all_clear >= PLAN_CLEARANCE - 1e-9:
                clean.append((added, cand))
            fallback.append((all_clear - 0.25 * added, cand))
        if clean:
            clean.sort(key=lambda it: it[0])
            via = clean[0][1]
        elif fallback:
            fallback.sort(key=lambda it: -it[0])
            via = fallback[0][1]
        else:
            continue  # no viable detour at all; accept the clipping route
        path.insert(seg_idx + 1, via)
    return path[1:-1]


@dataclass
class PilotState:
    targets: list[Vec]  # via points then the goal position
    target_index: int
    suffix_lengths: list[float]  # polyline length remaining after each target
    total_length: float
    noise_memory: np.ndarray
    noise_scale: float  # per-axis std of the injected noise
    rng: np.random.Generator
    cursor_history: deque  # stale views for reaction delay
    noise_stream: np.ndarray | None = None  # optional pre-drawn white samples
    noise_cursor: int = 0
    closest_leg_approach: float = math.inf  # min distance to target this leg
    replans: int = 0

    def remaining(self, cursor: Vec) -> float:
        return _dist(cursor, self.targets[self.target_index]) + \
            self.suffix_lengths[self.target_index]


def make_pilot(state: EnvState, cfg: PilotConfig = PilotConfig(),
               env_config: EnvConfig = DEFAULT_ENV,
               seed: int | None = None,
               noise_stream: np.ndarray | None = None) -> PilotState:
    """Plan a route to the true goal and size the noise for this reach.

    The AR filter output is normalized to unit per-step RMS and scaled to
    amplitude * straight_distance, split evenly across axes. At the default
    amplitude that puts the raw disturbance at or above the speed limit,
    matching low-bandwidth decoded input where the speed clip, not the
    noise draw, bounds each command. Each reach additionally scales the
    amplitude by a draw from the modeled skill spread, so a population
    mean of 3.2% covers both clean reaches and genuinely sloppy ones.
    """
    goal = state.true_goal.position
    vias = plan_via_points(state.cursor, goal, state.obstacles, env_config,
                           gain=cfg.via_point_gain)
    targets = vias + [goal]
    suffix = [0.0] * len(targets)
    for i in range(len(targets) - 2, -1, -1):
        suffix[i] = suffix[i + 1] + _dist(targets[i], targets[i + 1])
    total = _dist(state.cursor, targets[0]) + suffix[0]
    straight = _dist(state.cursor, goal)
    rng = np.random.default_rng([seed if seed is not None else cfg.rng_seed, 997])
    ratio = 1.0
    if cfg.amplitude_spread > 0.0:
        ratio = min(abs(float(rng.normal(1.0, cfg.amplitude_spread))), 3.0)
    vector_rms = cfg.noise_amplitude * ratio * straight * NOISE_STEP_NORM
    return PilotState(targets=targets, target_index=0,
                      suffix_lengths=suffix, total_length=max(total, 1e-9),
                      noise_memory=np.zeros(2),
                      noise_scale=vector_rms / math.sqrt(2.0),
                      rng=rng,
                      cursor_history=deque(maxlen=max(1, cfg.reaction_delay + 1)),
                      noise_stream=noise_stream)


def _bell(progress: float) -> float:
    return 30.0 * progress * progress * (1.0 - progress) * (1.0 - progress)


def _passed(cursor: Vec, target: Vec, nxt: Vec) -> bool:
    """True when the waypoint sits behind the cursor relative to the next
    leg, so heading back to it would mean retracing the route."""
    return ((cursor[0] - target[0]) * (nxt[0] - target[0])
            + (cursor[1] - target[1]) * (nxt[1] - target[1])) > 0.0


def _replan(pilot: PilotState, cursor: Vec, state: EnvState,
            cfg: PilotConfig, env_config: EnvConfig) -> None:
    """Re-route to the goal from the current position.

    The noise process is kept (tremor does not reset just because the
    operator re-aims) and so is bell progress: re-aiming mid-task must not
    drop the pace back to a gentle launch, or every correction strands the
    cursor at crawl speed wherever the disturbance pushed it."""
    progress = min(max(1.0 - pilot.remaining(cursor) / pilot.total_length, 0.0), 0.95)
    goal = state.true_goal.position
    vias = plan_via_points(cursor, goal, state.obstacles, env_config,
                           gain=cfg.via_point_gain)
    pilot.targets = vias + [goal]
    pilot.target_index = 0
    suffix = [0.0] * len(pilot.targets)
    for i in range(len(pilot.targets) - 2, -1, -1):
        suffix[i] = suffix[i + 1] + _dist(pilot.targets[i], pilot.targets[i + 1])
    pilot.suffix_lengths = suffix
    remaining = _dist(cursor, pilot.targets[0]) + suffix[0]
    pilot.total_length = max(remaining / (1.0 - progress), 1e-9)
    pilot.closest_leg_approach = math.inf
    pilot.replans += 1


def pilot_action(state: EnvState, pilot: PilotState,
                 cfg: PilotConfig = PilotConfig(),
                 env_config: EnvConfig = DEFAULT_ENV) -> Vec:
    """Next control command; mutates the pilot's waypoint and noise state.

    Speed follows a single bell over total route progress with a floor on
    the cruise portion and a linear taper over the last stretch, so reaches
    launch gently, cruise near v_max, and settle into the goal. A nonzero
    reaction delay steers from a stale cursor position instead of the
    current one.
    """
    pilot.cursor_history.append(state.cursor)
    cursor = pilot.cursor_history[0]  # oldest retained view
    while pilot.target_index < len(pilot.targets) - 1:
        tgt = pilot.targets[pilot.target_index]
        nxt = pilot.targets[pilot.target_index + 1]
        if _dist(cursor, tgt) < SWITCH_RADIUS:
            pilot.target_index += 1
            pilot.closest_leg_approach = math.inf
            continue
        if _passed(cursor, tgt, nxt):
            # skipping ahead is only sound if the direct line to the next
            # target stays off the obstacles; otherwise re-route from here
            if _segment_clearance(cursor, nxt, state.obstacles) >= 5.0 * HARD_CLEARANCE:
                pilot.target_index += 1
                pilot.closest_leg_approach = math.inf
                continue
            _replan(pilot, cursor, state, cfg, env_config)
        break

    target = pilot.targets[pilot.target_index]
    d = _dist(cursor, target)
    if d > pilot.closest_leg_approach + REPLAN_DRIFT:
        _replan(pilot, cursor, state, cfg, env_config)
        target = pilot.targets[pilot.target_index]
        d = _dist(cursor, target)
    pilot.closest_leg_approach = min(pilot.closest_leg_approach, d)
    remaining = pilot.remaining(cursor)
    progress = min(max(1.0 - remaining / pilot.total_length, 0.0), 1.0)
    frac = max(_bell(progress) / BELL_PEAK,
               min(SPEED_FLOOR_FRAC, remaining / D_TAPER))
    speed = min(env_config.v_max * frac, remaining)
    if d > 1e-12:
        det = ((target[0] - cursor[0]) / d * speed, (target[1] - cursor[1]) / d * speed)
    else:
        det = (0.0, 0.0)

    if cfg.noise_amplitude > 0.0:
        if pilot.noise_stream is not None:
            white = pilot.noise_stream[pilot.noise_cursor % len(pilot.noise_stream)]
            pilot.noise_cursor += 1
        else:
            white = pilot.rng.standard_normal(2)
        a = cfg.ar_coefficient
        pilot.noise_memory = a * pilot.noise_memory + (1.0 - a) * white
        stationary_std = math.sqrt((1.0 - a) / (1.0 + a))
        noise = pilot.noise_memory * (pilot.noise_scale / stationary_std)
        action = (det[0] + float(noise[0]), det[1] + float(noise[1]))
    else:
        action = det
    return clip_to_speed(action, env_config.v_max)


@dataclass(frozen=True)
class PilotRun:
    trajectory: CalibrationTrajectory
    success: bool
    steps: int
    collisions: int


def run_pilot_episode(env_state: EnvState, cfg: PilotConfig = PilotConfig(),
                      env_config: EnvConfig = DEFAULT_ENV, seed: int = 0,
                      noise_stream: np.ndarray | None = None) -> PilotRun:
    """Roll the pilot alone (no assistance) to termination and record it."""
    pilot = make_pilot(env_state, cfg, env_config, seed=seed, noise_stream=noise_stream)
    state = env_state
    cursors: list[Vec] = []
    actions: list[Vec] = []
    collisions = 0
    success = False
    while True:
        h = pilot_action(state, pilot, cfg, env_config)
        cursors.append(state.cursor)
        actions.append(h)
        state, outcome = step(state, h, (0.0, 0.0), 0.0, env_config)
        collisions += int(outcome.collision)
        if outcome.reached_goal_id is not None:
            success = True
        if outcome.terminal:
            break
    traj = CalibrationTrajectory(
        true_goal_id=env_state.true_goal_id,
        goal_positions=tuple(g.position for g in env_state.goals),
        obstacles=tuple((ob.position[0], ob.position[1], ob.radius)
                        for ob in env_state.obstacles),
        cursors=tuple(cursors), actions=tuple(actions))
    return PilotRun(trajectory=traj, success=success, steps=state.step_index,
                    collisions=collisions)


def generate_dataset(n_trajectories: int, cfg: PilotConfig = PilotConfig(),
                     env_config: EnvConfig = DEFAULT_ENV, seed: int = 0,
                     stages: tuple[int, ...] = (3, 4, 5)) -> tuple[list[CalibrationTrajectory], dict]:
    """Batch of labeled reaches cycling through the given stages.

    Infeasible scenes are skipped (counted in the stats) so dataset size
    is exact. Deterministic in seed.
    """
    out: list[CalibrationTrajectory] = []
    stats = {"successes": 0, "skipped_generation": 0, "episodes": 0}
    attempt = 0
    while len(out) < n_trajectories:
        stage = stages[len(out) % len(stages)]
        env_seed = seed * 1_000_003 + attempt
        attempt += 1
        try:
            env_state = generate_environment(env_seed, stage, env_config)
        except Exception:
            stats["skipped_generation"] += 1
            if stats["skipped_generation"] > 50 + n_trajectories:
                raise
            continue
        run = run_pilot_episode(env_state, cfg, env_config, seed=env_seed)
        out.append(run.trajectory)
        stats["episodes"] += 1
        stats["successes"] += int(run.success)
    stats["success_rate"] = stats["successes"] / max(1, stats["episodes"])
    return out, stats
