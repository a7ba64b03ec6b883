"""Recursive goal inference from directional control input.

A goal's evidence at each tick is a cost comparing the observed input
against the ideal approach: angular deviation from the straight-line
direction plus deviation from a distance-scaled ideal speed. Evidence
accumulates in log space; a temperature reshapes the normalized posterior
and an exponential moving average smooths it between ticks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

Vec = tuple[float, float]

# Floor on the ideal-speed profile so the speed-deviation term stays
# defined arbitrarily close to a goal.
EPS_MAG = 0.1
DEFAULT_V_MAX = 10.0


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class InferenceParams:
    beta: float = 10.0  # evidence sharpness (rationality)
    w_theta: float = 0.7  # weight on angular deviation
    w_d: float = 0.3  # weight on speed deviation
    ema_decay: float = 0.85  # smoothing on the posterior between ticks
    temperature: float = 1.0  # softmax temperature on accumulated evidence
    d_slow: float = 120.0  # distance below which the ideal speed tapers

    def __post_init__(self):
        if self.beta <= 0.0:
            raise ValueError("beta must be positive")
        if self.w_theta < 0.0 or self.w_d < 0.0 or self.w_theta + self.w_d <= 0.0:
            raise ValueError("cost weights must be non-negative and not both zero")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")

    def normalized(self) -> "InferenceParams":
        """Rescale the two cost weights to sum to one."""
        total = self.w_theta + self.w_d
        return replace(self, w_theta=self.w_theta / total, w_d=self.w_d / total)

    def as_vector(self) -> np.ndarray:
        return np.array([self.beta, self.w_theta, self.w_d, self.temperature])


@dataclass(frozen=True)
class BeliefState:
    probs: tuple[float, ...]
    log_scores: tuple[float, ...]  # accumulated log evidence, max-subtracted
    entropy: float  # nats
    p_max: float
    map_goal_id: int
    warning: bool = False  # set when an update was skipped on bad input


def _finalize(probs: np.ndarray, log_scores: np.ndarray, warning: bool = False) -> BeliefState:
    probs = probs / probs.sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0.0, probs * np.log(probs), 0.0)
    entropy = float(-terms.sum())
    map_id = int(np.argmax(probs))  # ties resolve to the lowest index
    return BeliefState(probs=tuple(float(p) for p in probs),
                       log_scores=tuple(float(s) for s in log_scores),
                       entropy=entropy, p_max=float(probs[map_id]),
                       map_goal_id=map_id, warning=warning)


def uniform_belief(n_goals: int) -> BeliefState:
    if n_goals < 1:
        raise ValueError("need at least one goal")
    probs = np.full(n_goals, 1.0 / n_goals)
    return _finalize(probs, np.zeros(n_goals))


def angular_deviation(action: Vec, origin: Vec, goal: Vec) -> float:
    """Unsigned angle between the action and the origin-to-goal direction.

    Raises ValueError when either vector has zero length, since no
    direction is defined there; callers substitute a neutral value.
    """
    ax, ay = action
    vx, vy = goal[0] - origin[0], goal[1] - origin[1]
    na = math.hypot(ax, ay)
    nv = math.hypot(vx, vy)
    if na == 0.0 or nv == 0.0:
        raise ValueError("angular deviation undefined for zero-length vector")
    cosine = (ax * vx + ay * vy) / (na * nv)
    return abs(math.acos(max(-1.0, min(1.0, cosine))))


def ideal_speed(distance: float, params: InferenceParams, v_max: float = DEFAULT_V_MAX) -> float:
    return v_max * max(EPS_MAG, min(1.0, distance / params.d_slow))


def distance_deviation(action: Vec, origin: Vec, goal: Vec, params: InferenceParams,
                       v_max: float = DEFAULT_V_MAX) -> float:
    speed = math.hypot(action[0], action[1])
    opt = ideal_speed(math.dist(origin, goal), params, v_max)
    return abs(1.0 - speed / opt)


def input_cost(action: Vec, origin: Vec, goal: Vec, params: InferenceParams,
               v_max: float = DEFAULT_V_MAX) -> float:
    """Weighted mismatch between an observed action and the ideal approach.

    A zero action or a cursor sitting exactly on the goal leaves the angle
    undefined; both use pi/2, which favors no goal over another.
    """
    try:
        theta = angular_deviation(action, origin, goal)
    except ValueError:
        theta = math.pi / 2.0
    return params.w_theta * theta + params.w_d * distance_deviation(action, origin, goal,
                                                                    params, v_max)


def update_belief(prev: BeliefState, cursor: Vec, goal_positions: Sequence[Vec],
                  action: Vec, params: InferenceParams,
                  v_max: float = DEFAULT_V_MAX) -> BeliefState:
    """One recursive evidence update.

    The raw posterior is prev.probs * exp(-beta * cost) computed in log
    space with a max shift (softmax-invariant, prevents underflow over
    long horizons); the temperature reshapes it at the final softmax, and
    the EMA then smooths between the previous and new distributions.
    Non-finite costs (malformed input) skip the update and set the warning
    flag rather than corrupting the running posterior.
    """
    if len(goal_positions) != len(prev.probs):
        raise ValueError("goal count changed between updates")
    costs = np.array([input_cost(action, cursor, g, params, v_max) for g in goal_positions])
    if not np.all(np.isfinite(costs)):
        return replace(prev, warning=True)
    scores = np.log(np.maximum(np.asarray(prev.probs), 1e-300)) - params.beta * costs
    scores -= scores.max()
    posterior = np.exp(scores / params.temperature)
    posterior /= posterior.sum()
    probs = params.ema_decay * np.asarray(prev.probs) + (1.0 - params.ema_decay) * posterior
    return _finalize(probs, scores)


# --- vectorized replay over recorded trajectories ---

@dataclass(frozen=True)
class CalibrationTrajectory:
    true_goal_id: int
    goal_positions: tuple[Vec, ...]
    obstacles: tuple[tuple[float, float, float], ...]  # (x, y, radius)
    cursors: tuple[Vec, ...]
    actions: tuple[Vec, ...]


def deviation_features(traj: CalibrationTrajectory,
                       params: InferenceParams | None = None,
                       v_max: float = DEFAULT_V_MAX) -> tuple[np.ndarray, np.ndarray]:
    """Per-step, per-goal angular and speed deviations as (T, G) arrays.

    The angular part does not depend on any inference parameter and the
    speed part only on d_slow, so fits over beta and the weights can reuse
    these arrays instead of replaying trigonometry.
    """
    params = params or InferenceParams()
    cur = np.asarray(traj.cursors, dtype=np.float64)
    act = np.asarray(traj.actions, dtype=np.float64)
    goals = np.asarray(traj.goal_positions, dtype=np.float64)
    to_goal = goals[None, :, :] - cur[:, None, :]  # (T, G, 2)
    dist = np.linalg.norm(to_goal, axis=2)
    speed = np.linalg.norm(act, axis=1)
    dot = (act[:, None, :] * to_goal).sum(axis=2)
    denom = speed[:, None] * dist
    with np.errstate(invalid="ignore", divide="ignore"):
        cosine = np.clip(np.where(denom > 0.0, dot / denom, 0.0), -1.0, 1.0)
    theta = np.abs(np.arccos(cosine))  # zero-length cases land on pi/2 via cos=0
    opt = v_max * np.clip(dist / params.d_slow, EPS_MAG, 1.0)
    ddev = np.abs(1.0 - speed[:, None] / opt)
    return theta, ddev


def replay_beliefs(theta: np.ndarray, ddev: np.ndarray,
                   params: InferenceParams) -> np.ndarray:
    """Posterior trajectory (T, G) from precomputed deviations.

    Matches a per-step update_belief loop exactly; a test pins that.
    """
    costs = params.w_theta * theta + params.w_d * ddev
    n_steps, n_goals = costs.shape
    probs = np.full(n_goals, 1.0 / n_goals)
    out = np.empty_like(costs)
    for t in range(n_steps):
        scores = np.log(np.maximum(probs, 1e-300)) - params.beta * costs[t]
        scores -= scores.max()
        posterior = np.exp(scores / params.temperature)
        posterior /= posterior.sum()
        probs = params.ema_decay * probs + (1.0 - params.ema_decay) * posterior
        probs /= probs.sum()
        out[t] = probs
    return out


def _true_goal_loglik(traj: CalibrationTrajectory, params: InferenceParams,
                      features: tuple[np.ndarray, np.ndarray],
                      floor: float = 1e-12) -> float:
    probs = replay_beliefs(*features, params)
    return float(np.mean(np.log(np.maximum(probs[:, traj.true_goal_id], floor))))


def accuracy_at_fractions(trajectories: Sequence[CalibrationTrajectory],
                          params: InferenceParams,
                          fractions: Sequence[float] = (0.25, 0.5, 0.75),
                          v_max: float = DEFAULT_V_MAX) -> dict[float, float]:
    """Fraction of trajectories whose MAP goal is correct once the cursor
    has covered the given share of its final path length."""
    hits = {f: 0 for f in fractions}
    for traj in trajectories:
        probs = replay_beliefs(*deviation_features(traj, params, v_max), params)
        cur = np.asarray(traj.cursors)
        seg = np.linalg.norm(np.diff(cur, axis=0), axis=1)
        covered = np.concatenate([[0.0], np.cumsum(seg)])
        total = covered[-1] if covered[-1] > 0.0 else 1.0
        for f in fractions:
            idx = int(np.searchsorted(covered, f * total))
            idx = min(idx, len(probs) - 1)
            if int(np.argmax(probs[idx])) == traj.true_goal_id:
                hits[f] += 1
    n = max(1, len(trajectories))
    return {f: hits[f] / n for f in fractions}


@dataclass(frozen=True)
class CalibrationResult:
    params: InferenceParams
    heldout_loglik: float
    accuracy_at: dict[float, float]
    n_fit: int
    n_heldout: int


def fit_params(trajectories: Sequence[CalibrationTrajectory],
               base: InferenceParams | None = None,
               v_max: float = DEFAULT_V_MAX,
               refine_rounds: int = 2) -> InferenceParams:
    """Grid fit of beta and the cost-weight split by true-goal log-likelihood.

    No size floor here; the public calibrate() wraps this with the dataset
    contract and a separate temperature fit.
    """
    base = (base or InferenceParams()).normalized()
    feats = [deviation_features(t, base, v_max) for t in trajectories]

    def score(p: InferenceParams) -> float:
        return float(np.mean([_true_goal_loglik(t, p, f)
                              for t, f in zip(trajectories, feats)]))

    betas = (1.0, 2.0, 5.0, 10.0, 20.0)
    weights = (0.5, 0.6, 0.7, 0.8)
    best, best_score = base, -math.inf
    for b in betas:
        for wt in weights:
            cand = replace(base, beta=float(b), w_theta=float(wt), w_d=float(1.0 - wt))
            s = score(cand)
            if s > best_score:
                best, best_score = cand, s
    for _ in range(refine_rounds):
        for factor in (0.8, 0.9, 1.1, 1.25):
            cand = replace(best, beta=float(np.clip(best.beta * factor, 0.5, 50.0)))
            s = score(cand)
            if s > best_score:
                best, best_score = cand, s
        for delta in (-0.04, -0.02, 0.02, 0.04):
            wt = float(np.clip(best.w_theta + delta, 0.05, 0.95))
            cand = replace(best, w_theta=wt, w_d=1.0 - wt)
            s = score(cand)
            if s > best_score:
                best, best_score = cand, s
    return best


def calibrate(trajectories: Sequence[CalibrationTrajectory],
              base: InferenceParams | None = None,
              v_max: float = DEFAULT_V_MAX) -> CalibrationResult:
    """Fit inference parameters on recorded reaches and report held-out skill.

    Splits deterministically by position: of every five trajectories, three
    fit beta and the weights, one fits the temperature, one is held out for
    the reported log-likelihood and accuracy numbers.
    """
    if len(trajectories) < 50:
        raise InsufficientDataError(
            f"insufficient calibration data: {len(trajectories)} trajectories, need 50")
    fit_split = [t for i, t in enumerate(trajectories) if i % 5 in (0, 1, 2)]
    tau_split = [t for i, t in enumerate(trajectories) if i % 5 == 3]
    heldout = [t for i, t in enumerate(trajectories) if i % 5 == 4]

    fitted = fit_params(fit_split, base, v_max)
    tau_feats = [deviation_features(t, fitted, v_max) for t in tau_split]
    best_tau, best_s = fitted.temperature, -math.inf
    for tau in (0.5, 0.75, 1.0, 1.5, 2.0):
        cand = replace(fitted, temperature=tau)
        s = float(np.mean([_true_goal_loglik(t, cand, f)
                           for t, f in zip(tau_split, tau_feats)]))
        if s > best_s:
            best_tau, best_s = tau, s
    fitted = replace(fitted, temperature=best_tau)

    held_feats = [deviation_features(t, fitted, v_max) for t in heldout]
    held_ll = float(np.mean([_true_goal_loglik(t, fitted, f)
                             for t, f in zip(heldout, held_feats)]))
    acc = accuracy_at_fractions(heldout, fitted, v_max=v_max)
    return CalibrationResult(params=fitted, heldout_loglik=held_ll, accuracy_at=acc,
                             n_fit=len(fit_split) + len(tau_split), n_heldout=len(heldout))


# --- dataset serialization (one trajectory per line) ---

def trajectory_to_record(traj: CalibrationTrajectory) -> dict:
    return {
        "true_goal_id": traj.true_goal_id,
        "goals": [[float(x), float(y)] for x, y in traj.goal_positions],
        "obstacles": [[float(x), float(y), float(r)] for x, y, r in traj.obstacles],
        "steps": [[float(cx), float(cy), float(hx), float(hy)]
                  for (cx, cy), (hx, hy) in zip(traj.cursors, traj.actions)],
    }


def trajectory_from_record(record: dict) -> CalibrationTrajectory:
    steps = record["steps"]
    return CalibrationTrajectory(
        true_goal_id=int(record["true_goal_id"]),
        goal_positions=tuple((float(g[0]), float(g[1])) for g in record["goals"]),
        obstacles=tuple((float(o[0]), float(o[1]), float(o[2]))
                        for o in record.get("obstacles", [])),
        cursors=tuple((s[0], s[1]) for s in steps),
        actions=tuple((s[2], s[3]) for s in steps),
    )


def save_calibration_dataset(path: str, trajectories: Iterable[CalibrationTrajectory]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            fh.write(json.dumps(trajectory_to_record(traj), separators=(",", ":")))
            fh.write("\n")


def load_calibration_dataset(path: str) -> list[CalibrationTrajectory]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(trajectory_from_record(json.loads(line)))
    return out
