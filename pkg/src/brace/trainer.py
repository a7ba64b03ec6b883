"""Joint training loop: PPO on the blending policy, score-function updates
on the goal-inference parameters, staged curriculum with advancement
criteria, and deterministic logging/checkpointing.

The per-step reward is assembled strictly as the sum of six logged
components so ablation tooling can re-weight them offline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import belief as bel
from .configio import dump_json_line
from .env import (DEFAULT_ENV, EnvConfig, EnvState, GenerationError,
                  context_features, generate_environment, observation_vector,
                  path_efficiency, step)
from .expert import ExpertConfig, candidate_actions, expert_action, make_memory
from .neural import (OptimState, PolicyNet, adam_init, gaussian_log_prob,
                     optimizer_step, optimizer_to_arrays, policy_backward_pretanh,
                     policy_forward, policy_init, policy_params, policy_to_arrays,
                     rng_state_json, sample_action, save_checkpoint)
from .pilot import PilotConfig, generate_dataset, make_pilot, pilot_action

# --- reward ------------------------------------------------------------------


@dataclass(frozen=True)
class RewardWeights:
    w_coll: float = 10.0
    w_prox: float = 2.5
    w_far: float = 1.5
    w_prog: float = 3.0
    w_auto: float = 1.5
    w_goal: float = 2.0
    near_threshold: float = 100.0  # distance-to-MAP below which proximity pays
    far_threshold: float = 250.0   # distance-to-MAP above which assistance is taxed
    p_floor: float = 1e-6

    def __post_init__(self):
        if self.near_threshold >= self.far_threshold:
            raise ValueError("near threshold must be below far threshold")


@dataclass(frozen=True)
class StepRewardContext:
    collision: bool
    gamma: float
    p_max: float
    p_true: float
    progress: float        # true-goal distance decrease, as a fraction of v_max
    dist_to_map: float     # cursor-to-MAP-goal distance before the step


def step_reward(ctx: StepRewardContext,
                weights: RewardWeights = RewardWeights()) -> tuple[float, dict]:
    """Returns (total, components); the total is computed as the exact sum
    of the six components."""
    near = ctx.dist_to_map < weights.near_threshold
    far = ctx.dist_to_map > weights.far_threshold
    components = {
        "collision": -weights.w_coll if ctx.collision else 0.0,
        "proximity": weights.w_prox * ctx.gamma * ctx.p_max if near else 0.0,
        "far": -weights.w_far * ctx.gamma if far else 0.0,
        "progress": weights.w_prog * ctx.p_max * ctx.progress,
        "autonomy": -weights.w_auto * ctx.gamma * ctx.gamma,
        "goal_id": weights.w_goal * math.log(max(ctx.p_true, weights.p_floor)),
    }
    return sum(components.values()), components


# --- advantage estimation -----------------------------------------------------


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                discount: float = 0.99, lam: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage recursion over one contiguous trajectory.

    A done step bootstraps zero (timeouts are treated as terminal; the
    episode cap is part of the task)."""
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    if n == 0:
        raise ValueError("empty trajectory")
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        next_value = 0.0 if dones[t] else (values[t + 1] if t + 1 < n else 0.0)
        not_done = 0.0 if dones[t] else 1.0
        delta = rewards[t] + discount * next_value - values[t]
        last = delta + discount * lam * not_done * last
        adv[t] = last
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    adv = np.asarray(adv, dtype=float)
    std = adv.std()
    if std < 1e-12:
        return adv - adv.mean()
    return (adv - adv.mean()) / (std + 1e-8)


# --- PPO ----------------------------------------------------------------------


@dataclass(frozen=True)
class PPOConfig:
    clip: float = 0.2
    gae_lambda: float = 0.95
    discount: float = 0.99
    batch: int = 1024
    epochs: int = 4
    minibatch: int = 256
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    # L2 on the pre-tanh actor mean. The per-step assistance taxes push the
    # blend weight down long before the localized benefits (collision
    # avoidance, endgame capture) are credited; without a bound on
    # saturation depth the policy freezes at gamma=0 and exploration never
    # recovers.
    mu_reg: float = 0.01
    lr: float = 3e-4
    # Loose spike guard only: adaptive moments already normalize per-param
    # steps, and early value errors would otherwise starve the actor under
    # a tight shared norm.
    grad_clip: float = 10.0

    def __post_init__(self):
        if not 0.0 < self.clip < 1.0:
            raise ValueError("clip must be in (0,1)")
        if not 0.0 < self.discount <= 1.0:
            raise ValueError("discount must be in (0,1]")


def ppo_update(batch: dict, net: PolicyNet, opt: OptimState, cfg: PPOConfig,
               shuffle_rng: np.random.Generator) -> dict:
    """Clipped-surrogate update: cfg.epochs passes over shuffled minibatches.

    Advantages must arrive already normalized. Returns mean diagnostics; on
    a non-finite loss the update aborts immediately and the diagnostics
    carry aborted=True for the caller to quarantine.
    """
    X = batch["observations"]
    z = batch["z"]
    logp_old = batch["log_probs"]
    adv = batch["advantages"]
    ret = batch["returns"]
    n = len(z)
    if n < 64:
        raise ValueError(f"PPO batch too small: {n} < 64")

    params = policy_params(net)
    stats: dict[str, list] = {k: [] for k in ("actor_loss", "value_loss", "entropy",
                                              "clip_fraction", "approx_kl")}
    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for lo in range(0, n, cfg.minibatch):
            idx = order[lo:lo + cfg.minibatch]
            xb, zb, lob, ab, rb = X[idx], z[idx], logp_old[idx], adv[idx], ret[idx]
            m = len(idx)

            _, value, cache = policy_forward(net, xb)
            mu = cache.actor_pre
            log_std = float(net.log_std[0])
            sigma = math.exp(log_std)
            logp = gaussian_log_prob(zb, mu, log_std)
            ratio = np.exp(logp - lob)
            surr1 = ratio * ab
            surr2 = np.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip) * ab
            actor_loss = -np.minimum(surr1, surr2).mean()
            value_loss = ((value - rb) ** 2).mean()
            # Entropy of the squashed blend weight, not of the raw Gaussian:
            # the tanh Jacobian term penalizes saturated means, without
            # which a transiently tax-driven push toward gamma=0 freezes
            # exploration permanently.
            tanh_z = np.tanh(zb)
            jac = np.log(np.maximum((1.0 - tanh_z ** 2) / 2.0, 1e-12))
            entropy = 0.5 * math.log(2.0 * math.pi * math.e * sigma * sigma) \
                + float(jac.mean())
            total = actor_loss + cfg.value_coef * value_loss \
                - cfg.entropy_coef * entropy + cfg.mu_reg * float(np.mean(mu ** 2))
            if not math.isfinite(total):
                return {"aborted": True, "loss": float(total),
                        "batch_size": n, **{k: float(np.mean(v)) if v else math.nan
                                            for k, v in stats.items()}}

            # d(min(surr1, surr2))/d(ratio): the clipped branch only passes
            # gradient while the ratio sits inside the trust region (where
            # the two branches coincide anyway).
            inside = (ratio > 1.0 - cfg.clip) & (ratio < 1.0 + cfg.clip)
            mask = (surr1 <= surr2) | inside
            d_logp = -(ab * ratio * mask) / m
            d_mu = d_logp * (zb - mu) / (sigma * sigma)
            # Jacobian-entropy path, reparameterized with the stored samples
            # treated as mu + sigma*eps_hat with eps_hat held fixed.
            d_mu = d_mu + cfg.entropy_coef * 2.0 * tanh_z / m
            d_mu = d_mu + cfg.mu_reg * 2.0 * mu / m
            d_value = cfg.value_coef * 2.0 * (value - rb) / m
            grads = policy_backward_pretanh(net, cache, d_mu, d_value)
            d_log_std = float(np.sum(d_logp * (((zb - mu) / sigma) ** 2 - 1.0)))
            d_log_std += cfg.entropy_coef * float(np.sum(2.0 * tanh_z * (zb - mu)) / m)
            grads["log_std"] = np.array([d_log_std - cfg.entropy_coef])
            optimizer_step(params, grads, opt)

            stats["actor_loss"].append(float(actor_loss))
            stats["value_loss"].append(float(value_loss))
            stats["entropy"].append(float(entropy))
            stats["clip_fraction"].append(float(np.mean(np.abs(ratio - 1.0) > cfg.clip)))
            stats["approx_kl"].append(float(np.mean(lob - logp)))
    out = {k: float(np.mean(v)) for k, v in stats.items()}
    out.update(aborted=False, batch_size=n)
    return out


# --- policy input --------------------------------------------------------------

BELIEF_SLOTS = 3  # frozen input layout: 10 obs + 3 belief + 1 entropy


def policy_input(state: EnvState, human_action, belief: bel.BeliefState,
                 config: EnvConfig = DEFAULT_ENV,
                 belief_mode: str = "full") -> np.ndarray:
    """14-dim network input. Environments with fewer than three goals pad
    the missing goal distances with the diagonal (reads as "very far") and
    the missing belief slots with zeros.

    belief_mode full passes the posterior; map passes a one-hot on the MAP
    goal with zero entropy (the single-goal conditioning scheme); uniform
    passes a flat vector.
    """
    n = len(state.goals)
    if n == BELIEF_SLOTS:
        obs = observation_vector(state, human_action, config)
    else:
        ctx = context_features(state, config)
        diag = config.diagonal
        dists = list(ctx.goal_distances) + [diag] * (BELIEF_SLOTS - n)
        obs = np.array([
            state.cursor[0] / (config.width / 2.0) - 1.0,
            state.cursor[1] / (config.height / 2.0) - 1.0,
            human_action[0] / config.v_max,
            human_action[1] / config.v_max,
            dists[0] / diag, dists[1] / diag, dists[2] / diag,
            ctx.nearest_obstacle_distance / diag,
            ctx.constraint_severity,
            ctx.normalized_step,
        ])

    probs = np.zeros(BELIEF_SLOTS)
    if belief_mode == "full":
        probs[:n] = belief.probs
        entropy = belief.entropy
    elif belief_mode == "map":
        probs[belief.map_goal_id] = 1.0
        entropy = 0.0
    elif belief_mode == "uniform":
        probs[:n] = 1.0 / n
        entropy = math.log(n)
    else:
        raise ValueError(f"unknown belief mode: {belief_mode}")
    return np.concatenate([obs, probs, [entropy]])


# --- belief REINFORCE -----------------------------------------------------------

PHI_EPS = np.array([0.05, 0.01, 0.01, 0.02])          # FD half-steps per parameter
PHI_STEP_SCALES = np.array([0.5, 0.05, 0.05, 0.1])    # per-parameter preconditioner
BETA_RANGE = (0.5, 50.0)
W_THETA_RANGE = (0.05, 0.95)


@dataclass
class EpisodeLikelihoodData:
    """Geometry of one episode, prepared so likelihood evaluations at
    perturbed inference parameters are pure arithmetic."""
    theta: np.ndarray        # (T, G) angular deviation of observed actions
    ddev: np.ndarray         # (T, G) speed deviation of observed actions
    grid_theta: np.ndarray   # (T, G, C) same, for the normalizing action grid
    grid_ddev: np.ndarray    # (T, G, C)
    true_goal_id: int
    advantages: np.ndarray   # (T,)


def episode_likelihood_data(cursors: np.ndarray, actions: np.ndarray,
                            goal_positions: np.ndarray, true_goal_id: int,
                            advantages: np.ndarray, params: bel.InferenceParams,
                            config: EnvConfig = DEFAULT_ENV) -> EpisodeLikelihoodData:
    traj = bel.CalibrationTrajectory(true_goal_id=true_goal_id,
                                     goal_positions=tuple(tuple(g) for g in goal_positions),
                                     obstacles=(),
                                     cursors=tuple(tuple(c) for c in cursors),
                                     actions=tuple(tuple(a) for a in actions))
    theta, ddev = bel.deviation_features(traj, params, config.v_max)

    grid = candidate_actions(config)
    grid_angles = np.arctan2(grid[:, 1], grid[:, 0])
    grid_mags = np.linalg.norm(grid, axis=1)
    diff = goal_positions[None, :, :] - cursors[:, None, :]      # (T, G, 2)
    dist = np.linalg.norm(diff, axis=2)                          # (T, G)
    goal_angle = np.arctan2(diff[:, :, 1], diff[:, :, 0])
    raw = grid_angles[None, None, :] - goal_angle[:, :, None]
    grid_theta = np.abs((raw + math.pi) % (2.0 * math.pi) - math.pi)
    # cursor exactly on a goal: direction undefined, neutral angle
    grid_theta[dist < 1e-12] = math.pi / 2.0
    ideal = config.v_max * np.clip(dist / params.d_slow, bel.EPS_MAG, 1.0)
    grid_ddev = np.abs(1.0 - grid_mags[None, None, :] / ideal[:, :, None])
    return EpisodeLikelihoodData(theta=theta, ddev=ddev, grid_theta=grid_theta,
                                 grid_ddev=grid_ddev, true_goal_id=true_goal_id,
                                 advantages=np.asarray(advantages, dtype=float))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=axis, keepdims=True))).squeeze(axis)


def _phi_objectives(data: list[EpisodeLikelihoodData],
                    params: bel.InferenceParams) -> tuple[float, float, float]:
    """(advantage-weighted predictive log-likelihood, supervised true-goal
    log-likelihood, mean MAP probability), all averaged per step."""
    rl_sum = 0.0
    sup_sum = 0.0
    pmax_sum = 0.0
    steps = 0
    for ep in data:
        beliefs = bel.replay_beliefs(ep.theta, ep.ddev, params)      # (T, G)
        n_goals = beliefs.shape[1]
        prev = np.vstack([np.full((1, n_goals), 1.0 / n_goals), beliefs[:-1]])
        cost_obs = params.w_theta * ep.theta + params.w_d * ep.ddev
        cost_grid = params.w_theta * ep.grid_theta + params.w_d * ep.grid_ddev
        log_p = -params.beta * cost_obs - _logsumexp(-params.beta * cost_grid, axis=2)
        ell = _logsumexp(np.log(np.maximum(prev, 1e-300)) + log_p, axis=1)  # (T,)
        rl_sum += float(np.sum(ep.advantages * ell))
        sup_sum += float(np.sum(np.log(np.maximum(beliefs[:, ep.true_goal_id], 1e-300))))
        pmax_sum += float(np.sum(beliefs.max(axis=1)))
        steps += len(ell)
    if steps == 0:
        raise ValueError("no likelihood data")
    return rl_sum / steps, sup_sum / steps, pmax_sum / steps


def _with_phi(params: bel.InferenceParams, vec: np.ndarray) -> bel.InferenceParams:
    return bel.InferenceParams(beta=float(vec[0]), w_theta=float(vec[1]),
                               w_d=float(vec[2]), temperature=float(vec[3]),
                               ema_decay=params.ema_decay, d_slow=params.d_slow)


def belief_reinforce_update(data: list[EpisodeLikelihoodData],
                            params: bel.InferenceParams, alpha: float,
                            tau_cap: float, c_confidence: float = 0.8,
                            c_clip: float = 1.0, lr_phi: float = 0.5,
                            tau_min: float = 1.0) -> tuple[bel.InferenceParams, dict]:
    """One mixed supervised/score-function ascent step on (β, w_θ, w_d, τ).

    Central finite differences per parameter; the mixture is
    alpha·L_RL + (1−alpha)·L_supervised; the applied step is confidence-
    scaled by min(1, p_max/c_confidence), then norm-clipped (clip runs
    last), then clamped into valid ranges with a warning counter. The
    temperature may never increase.
    """
    phi = np.array([params.beta, params.w_theta, params.w_d, params.temperature])
    g_rl = np.zeros(4)
    g_sup = np.zeros(4)
    for k in range(4):
        hi, lo = phi.copy(), phi.copy()
        hi[k] += PHI_EPS[k]
        lo[k] -= PHI_EPS[k]
        rl_hi, sup_hi, _ = _phi_objectives(data, _with_phi(params, hi))
        rl_lo, sup_lo, _ = _phi_objectives(data, _with_phi(params, lo))
        g_rl[k] = (rl_hi - rl_lo) / (2.0 * PHI_EPS[k])
        g_sup[k] = (sup_hi - sup_lo) / (2.0 * PHI_EPS[k])
    _, _, p_max = _phi_objectives(data, params)

    grad = (alpha * g_rl + (1.0 - alpha) * g_sup) * PHI_STEP_SCALES
    confidence = min(1.0, p_max / c_confidence)
    grad = grad * confidence
    norm = float(np.linalg.norm(grad))
    if norm > c_clip:
        grad = grad * (c_clip / norm)

    raw = phi + lr_phi * grad
    warnings = 0
    beta = min(max(raw[0], BETA_RANGE[0]), BETA_RANGE[1])
    if beta != raw[0]:
        warnings += 1
    w_sum = raw[1] + raw[2]
    w_theta = raw[1] / w_sum if w_sum > 1e-9 else 0.5
    if not (W_THETA_RANGE[0] <= w_theta <= W_THETA_RANGE[1]):
        warnings += 1
        w_theta = min(max(w_theta, W_THETA_RANGE[0]), W_THETA_RANGE[1])
    tau_hi = min(params.temperature, tau_cap)  # non-increasing over training
    tau = min(max(raw[3], tau_min), tau_hi)
    if tau != raw[3]:
        warnings += 1
    new = bel.InferenceParams(beta=float(beta), w_theta=float(w_theta),
                              w_d=float(1.0 - w_theta), temperature=float(tau),
                              ema_decay=params.ema_decay, d_slow=params.d_slow)
    info = {"g_rl": g_rl.tolist(), "g_sup": g_sup.tolist(),
            "confidence": confidence, "norm": norm, "warnings": warnings,
            "p_max": p_max}
    return new, info


# --- curriculum -----------------------------------------------------------------


@dataclass(frozen=True)
class CurriculumStage:
    stage_id: int
    min_episodes: int
    success_threshold: float | None
    collision_cap: float | None = None
    plateau_window: int | None = None


CURRICULUM = (
    CurriculumStage(1, 100, 0.80),
    CurriculumStage(2, 200, 0.75, collision_cap=0.15),
    CurriculumStage(3, 300, 0.70),
    CurriculumStage(4, 400, 0.65),
    CurriculumStage(5, 200, None, plateau_window=100),
)

STALL_MULTIPLIER = 5


class CurriculumStallError(RuntimeError):
    def __init__(self, stage_id: int, episodes: int, diagnostics_path: str):
        super().__init__(f"curriculum stall: stage {stage_id} unmet after "
                         f"{episodes} episodes (diagnostics: {diagnostics_path})")
        self.stage_id = stage_id
        self.diagnostics_path = diagnostics_path


def tau_stage_cap(stage_index: int, tau0: float = 2.0, decay: float = 0.6,
                  tau_min: float = 1.0) -> float:
    # The floor never drops below 1: tempering may flatten the posterior but
    # must not sharpen it, or early wrong locks become unrecoverable (the
    # prior re-enters the logit each step, so tau < 1 compounds itself).
    return max(tau_min, tau0 * decay ** (stage_index - 1))


# --- training loop ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "end_to_end"          # or baseline_frozen_belief
    belief_input: str = "full"        # full | map | uniform
    use_curriculum: bool = True
    stages: tuple[int, ...] = (1, 2, 3, 4, 5)
    max_episodes: int = 4000
    warm_start_episodes: int = 15
    alpha_end: float = 0.8
    alpha_frac: float = 0.6           # fraction of the budget spent annealing
    c_confidence: float = 0.8
    c_clip: float = 1.0
    lr_phi: float = 0.5
    tau0: float = 2.0
    tau_min: float = 1.0
    tau_decay: float = 0.6
    hidden: int = 256
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: RewardWeights = field(default_factory=RewardWeights)
    # Contact ends the episode during training too: a policy optimized in a
    # world where obstacles are pass-through shortcuts (flagged but not
    # enforced) never learns the avoidance the strict evaluation demands.
    env: EnvConfig = field(default_factory=lambda: replace(DEFAULT_ENV,
                                                           collision_terminal=True))
    pilot: PilotConfig = field(default_factory=PilotConfig)
    expert: ExpertConfig = field(default_factory=ExpertConfig)

    def __post_init__(self):
        if self.mode not in ("end_to_end", "baseline_frozen_belief"):
            raise ValueError(f"unknown training mode: {self.mode}")
        if self.belief_input not in ("full", "map", "uniform"):
            raise ValueError(f"unknown belief input: {self.belief_input}")


@dataclass
class EpisodeResult:
    transitions: list
    cursors: np.ndarray
    human_actions: np.ndarray
    goal_positions: np.ndarray
    true_goal_id: int
    stage: int
    success: bool
    collision_steps: int
    mean_gamma: float
    belief_accuracy: float
    total_reward: float
    steps: int
    pe: float


@dataclass
class Transition:
    observation: np.ndarray
    belief: np.ndarray
    gamma: float
    z: float
    log_prob: float
    value: float
    reward: float
    components: dict
    done: bool
    true_goal_id: int


def collect_episode(state: EnvState, net: PolicyNet, params: bel.InferenceParams,
                    cfg: TrainConfig, rng_policy: np.random.Generator,
                    pilot_seed: int, expert_seed: int) -> EpisodeResult:
    """Roll one training episode with stochastic blend sampling."""
    pilot = make_pilot(state, cfg.pilot, cfg.env, seed=pilot_seed)
    memory = make_memory(expert_seed)
    goal_positions = np.array([g.position for g in state.goals])
    belief = bel.uniform_belief(len(state.goals))

    transitions: list[Transition] = []
    cursors = [state.cursor]
    human_actions = []
    collision_steps = 0
    accuracy_hits = 0
    total_reward = 0.0
    success = False

    while True:
        h = pilot_action(state, pilot, cfg.pilot, cfg.env)
        # The goal filter always runs; belief_input only blinds what the
        # network sees. The expert keeps tracking the posterior MAP, so the
        # uniform variant degrades assistance targeting, not the assistant.
        belief = bel.update_belief(belief, state.cursor,
                                   [tuple(g) for g in goal_positions], h,
                                   params, cfg.env.v_max)
        obs = policy_input(state, h, belief, cfg.env, cfg.belief_input)
        gamma, z, logp, value = sample_action(net, obs, rng_policy)
        map_goal = state.goals[belief.map_goal_id]
        w = expert_action(state, map_goal, cfg.expert, memory, cfg.env)
        dist_to_map = math.dist(state.cursor, map_goal.position)

        next_state, outcome = step(state, h, w, gamma, cfg.env)
        # Progress enters on the same O(1) scale as the gamma taxes; in raw
        # pixels the progress term drowns the premature-assistance penalty
        # and the optimum becomes full takeover from the first step.
        reward, components = step_reward(StepRewardContext(
            collision=outcome.collision, gamma=gamma, p_max=belief.p_max,
            p_true=belief.probs[state.true_goal_id],
            progress=outcome.progress / cfg.env.v_max,
            dist_to_map=dist_to_map), cfg.reward)

        transitions.append(Transition(
            observation=obs, belief=np.asarray(belief.probs), gamma=gamma, z=z,
            log_prob=logp, value=value, reward=reward, components=components,
            done=outcome.terminal, true_goal_id=state.true_goal_id))
        human_actions.append(h)
        cursors.append(next_state.cursor)
        collision_steps += int(outcome.collision)
        accuracy_hits += int(belief.map_goal_id == state.true_goal_id)
        total_reward += reward
        state = next_state
        if outcome.terminal:
            success = outcome.reached_goal_id is not None
            break

    n = len(transitions)
    return EpisodeResult(
        transitions=transitions, cursors=np.asarray(cursors),
        human_actions=np.asarray(human_actions), goal_positions=goal_positions,
        true_goal_id=state.true_goal_id, stage=state.stage, success=success,
        collision_steps=collision_steps,
        mean_gamma=float(np.mean([t.gamma for t in transitions])),
        belief_accuracy=accuracy_hits / n, total_reward=total_reward,
        steps=n, pe=path_efficiency([tuple(c) for c in cursors]))


@dataclass
class TrainResult:
    checkpoint_path: str
    log_path: str
    episodes: int
    final_stage: int
    completed: bool
    success_recent: float
    phi: tuple
    quarantined: int
    skipped_updates: int
    stage_history: list


def warm_start_params(cfg: TrainConfig, seed: int) -> bel.InferenceParams:
    """Supervised pre-calibration on a small pilot dataset; falls back to
    the stock parameters when warm start is disabled."""
    if cfg.warm_start_episodes <= 0:
        return bel.InferenceParams(temperature=cfg.tau0)
    trajs, _ = generate_dataset(cfg.warm_start_episodes, cfg.pilot, cfg.env,
                                seed=seed)
    fitted = bel.fit_params(trajs, v_max=cfg.env.v_max)
    return bel.InferenceParams(beta=fitted.beta, w_theta=fitted.w_theta,
                               w_d=fitted.w_d, temperature=cfg.tau0,
                               ema_decay=fitted.ema_decay, d_slow=fitted.d_slow)


def run_training(cfg: TrainConfig, seed: int, out_dir) -> TrainResult:
    """Full joint optimization; deterministic for a fixed seed (single
    worker). Emits train_log.ndjson and checkpoint.bin under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.ndjson"
    ckpt_path = out / "checkpoint.bin"

    params = warm_start_params(cfg, seed)
    if cfg.mode == "baseline_frozen_belief" or cfg.belief_input == "uniform":
        learn_belief = False
    else:
        learn_belief = True

    net = policy_init(input_dim=10 + BELIEF_SLOTS + 1, hidden=cfg.hidden, seed=seed)
    est_updates = max(1, math.ceil(cfg.max_episodes * 120 / cfg.ppo.batch)) \
        * cfg.ppo.epochs * math.ceil(cfg.ppo.batch / cfg.ppo.minibatch)
    opt = adam_init(policy_params(net), cfg.ppo.lr, est_updates,
                    c_clip=cfg.ppo.grad_clip)

    rng_policy = np.random.default_rng([seed, 41])
    rng_shuffle = np.random.default_rng([seed, 83])
    rng_stage = np.random.default_rng([seed, 59])

    stage_list = [s for s in CURRICULUM if s.stage_id in cfg.stages]
    if cfg.use_curriculum and not stage_list:
        raise ValueError("no curriculum stages selected")
    stage_pos = 0
    in_stage: list[tuple[bool, bool]] = []  # (success, any_collision)
    stage_history: list[dict] = []

    buffer: list[EpisodeResult] = []
    buffered_steps = 0
    episode = 0
    env_seed = seed * 1_000_003
    quarantined = 0
    last_losses: dict | None = None
    recent: list[bool] = []
    completed = False
    anneal_eps = max(1, int(cfg.alpha_frac * cfg.max_episodes))

    def phase_index() -> int:
        if cfg.use_curriculum:
            return stage_list[stage_pos].stage_id
        return 1 + min(4, (5 * episode) // max(1, cfg.max_episodes))

    tau_cap = tau_stage_cap(phase_index(), cfg.tau0, cfg.tau_decay, cfg.tau_min)
    params = replace(params, temperature=min(params.temperature, max(cfg.tau_min, tau_cap)))

    def flush_updates() -> None:
        nonlocal buffer, buffered_steps, params, last_losses, quarantined
        if buffered_steps < 64:
            return
        rewards, values, dones = [], [], []
        for ep in buffer:
            rewards.append([t.reward for t in ep.transitions])
            values.append([t.value for t in ep.transitions])
            dones.append([t.done for t in ep.transitions])
        advs, rets = [], []
        for r, v, d in zip(rewards, values, dones):
            a, g = compute_gae(np.array(r), np.array(v), np.array(d),
                               cfg.ppo.discount, cfg.ppo.gae_lambda)
            advs.append(a)
            rets.append(g)
        adv_cat = normalize_advantages(np.concatenate(advs))
        batch = {
            "observations": np.vstack([np.array([t.observation for t in ep.transitions])
                                       for ep in buffer]),
            "z": np.concatenate([[t.z for t in ep.transitions] for ep in buffer]),
            "log_probs": np.concatenate([[t.log_prob for t in ep.transitions]
                                         for ep in buffer]),
            "advantages": adv_cat,
            "returns": np.concatenate(rets),
        }
        diag = ppo_update(batch, net, opt, cfg.ppo, rng_shuffle)
        if diag.get("aborted"):
            quarantined += 1
            qpath = out / f"quarantine_ep{episode}.json"
            with open(qpath, "w") as fh:
                fh.write(json.dumps({"episode": episode, "diagnostics": diag,
                                     "reward_stats": {
                                         "min": float(np.min(batch["returns"])),
                                         "max": float(np.max(batch["returns"])),
                                     }}, sort_keys=True, indent=2))
        else:
            last_losses = diag
            if learn_belief and cfg.mode == "end_to_end":
                alpha = cfg.alpha_end * min(1.0, episode / anneal_eps)
                offset = 0
                data = []
                for ep, a in zip(buffer, advs):
                    a_norm = adv_cat[offset:offset + len(a)]
                    offset += len(a)
                    data.append(episode_likelihood_data(
                        ep.cursors[:-1], ep.human_actions, ep.goal_positions,
                        ep.true_goal_id, a_norm, params, cfg.env))
                params, _ = belief_reinforce_update(
                    data, params, alpha, tau_cap, cfg.c_confidence, cfg.c_clip,
                    cfg.lr_phi, cfg.tau_min)
        buffer = []
        buffered_steps = 0

    with open(log_path, "w") as log_fh:
        while episode < cfg.max_episodes:
            if cfg.use_curriculum and not completed:
                stage_id = stage_list[stage_pos].stage_id
            else:
                # uniform mix: the whole schedule when no curriculum is used,
                # and the consolidation phase once the staged part completes
                stage_id = int(cfg.stages[rng_stage.integers(len(cfg.stages))])
            try:
                state = generate_environment(env_seed, stage_id, cfg.env)
            except GenerationError:
                env_seed += 1
                continue
            env_seed += 1

            ep = collect_episode(state, net, params, cfg, rng_policy,
                                 pilot_seed=episode, expert_seed=episode)
            buffer.append(ep)
            buffered_steps += ep.steps
            episode += 1
            recent.append(ep.success)
            if len(recent) > 100:
                recent.pop(0)

            # poisoned rewards must still yield a valid log line; the update
            # that consumes them is quarantined separately
            fin = lambda v: round(v, 6) if math.isfinite(v) else None
            log_fh.write(dump_json_line({
                "episode": episode, "stage": stage_id, "success": ep.success,
                "steps": ep.steps, "path_efficiency": fin(ep.pe),
                "mean_gamma": fin(ep.mean_gamma),
                "belief_accuracy": fin(ep.belief_accuracy),
                "collision_steps": ep.collision_steps,
                "reward": fin(ep.total_reward),
                "losses": last_losses,
                "phi": [params.beta, params.w_theta, params.w_d,
                        params.temperature],
            }) + "\n")

            if buffered_steps >= cfg.ppo.batch:
                flush_updates()

            if cfg.use_curriculum and not completed:
                st = stage_list[stage_pos]
                in_stage.append((ep.success, ep.collision_steps > 0))
                n_in = len(in_stage)
                advance = False
                if st.plateau_window:
                    if n_in >= st.min_episodes:
                        w = st.plateau_window
                        cur = np.mean([s for s, _ in in_stage[-w:]])
                        prev = np.mean([s for s, _ in in_stage[-2 * w:-w]])
                        if cur <= prev + 0.01 or n_in >= STALL_MULTIPLIER * st.min_episodes:
                            advance = True
                elif n_in >= st.min_episodes:
                    window = in_stage[-st.min_episodes:]
                    rate = np.mean([s for s, _ in window])
                    coll = np.mean([c for _, c in window])
                    if rate > st.success_threshold and \
                            (st.collision_cap is None or coll < st.collision_cap):
                        advance = True
                    elif n_in >= STALL_MULTIPLIER * st.min_episodes:
                        flush_updates()
                        diag_path = out / "stall_diagnostics.json"
                        with open(diag_path, "w") as fh:
                            fh.write(json.dumps({
                                "stage": st.stage_id, "episodes_in_stage": n_in,
                                "success_rate": float(rate),
                                "collision_rate": float(coll),
                                "threshold": st.success_threshold,
                                "phi": [params.beta, params.w_theta, params.w_d,
                                        params.temperature],
                            }, sort_keys=True, indent=2))
                        raise CurriculumStallError(st.stage_id, n_in, str(diag_path))
                if advance:
                    stage_history.append({"stage": st.stage_id,
                                          "episodes": len(in_stage),
                                          "through_episode": episode})
                    in_stage = []
                    if stage_pos + 1 < len(stage_list):
                        stage_pos += 1
                        tau_cap = tau_stage_cap(phase_index(), cfg.tau0,
                                                cfg.tau_decay, cfg.tau_min)
                        if learn_belief:
                            params = replace(params, temperature=min(
                                params.temperature, max(cfg.tau_min, tau_cap)))
                    else:
                        completed = True
            else:
                tau_cap = tau_stage_cap(phase_index(), cfg.tau0, cfg.tau_decay,
                                        cfg.tau_min)

        flush_updates()
        if in_stage and cfg.use_curriculum:
            stage_history.append({"stage": stage_list[stage_pos].stage_id,
                                  "episodes": len(in_stage),
                                  "through_episode": episode})

    arrays = policy_to_arrays(net)
    arrays.update(optimizer_to_arrays(opt))
    arrays["phi"] = np.array([params.beta, params.w_theta, params.w_d,
                              params.temperature, params.ema_decay, params.d_slow])
    meta = {
        "mode": cfg.mode, "belief_input": cfg.belief_input,
        "use_curriculum": cfg.use_curriculum, "seed": seed,
        "episodes": episode, "completed": completed,
        "hidden": cfg.hidden, "input_dim": 10 + BELIEF_SLOTS + 1,
        "stage_history": stage_history,
        "optimizer": {"step": opt.step, "base_lr": opt.base_lr,
                      "total_steps": opt.total_steps, "skipped": opt.skipped},
        "rng": {"policy": rng_state_json(rng_policy),
                "shuffle": rng_state_json(rng_shuffle),
                "stage": rng_state_json(rng_stage)},
    }
    save_checkpoint(ckpt_path, arrays, meta)

    return TrainResult(
        checkpoint_path=str(ckpt_path), log_path=str(log_path),
        episodes=episode,
        final_stage=stage_list[stage_pos].stage_id if cfg.use_curriculum else 0,
        completed=completed,
        success_recent=float(np.mean(recent)) if recent else 0.0,
        phi=(params.beta, params.w_theta, params.w_d, params.temperature),
        quarantined=quarantined, skipped_updates=opt.skipped,
        stage_history=stage_history)
