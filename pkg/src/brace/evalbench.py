"""Paired evaluation harness: baselines, metrics, stratified analysis, ablations.

Every suite runs its conditions over the same environment seeds and the same
pre-drawn pilot noise streams, so per-episode comparisons are paired rather
than merely same-distribution.  The stream pairing is asserted with checksums
instead of trusted.  Episodes run the strict environment (first contact ends
the trial): a pass-through cursor brushing a disc is tolerable during
training exploration but would overstate evaluation success.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import belief as bel
from .env import (DEFAULT_ENV, EnvConfig, EnvState, GenerationError,
                  generate_environment, nearest_obstacle_edge, path_efficiency,
                  step)
from .expert import ExpertConfig, expert_action, make_memory, run_expert_episode
from .neural import PolicyNet, load_checkpoint, policy_forward, policy_from_arrays
from .pilot import PilotConfig, make_pilot, pilot_action
from .trainer import policy_input

EVAL_STAGES = (3, 4, 5)
NOISE_SALT = 7331             # per-episode white-noise stream substream
CONDITION_NAMES = ("no_assist", "fixed_gamma", "map_sequential",
                   "uniform_prior", "brace")
ENTROPY_BAND_LABELS = ("<0.5", "0.5-1.0", ">1.0")


def strict_env(config: EnvConfig = DEFAULT_ENV) -> EnvConfig:
    return replace(config, collision_terminal=True)


# ---------------------------------------------------------------------------
# types


@dataclass(frozen=True)
class EpisodeMetrics:
    success: bool
    steps_to_complete: int
    path_efficiency: float
    throughput: float             # Fitts index of difficulty per step
    mean_gamma_by_quartile: tuple[float, float, float, float]
    collision_count: int
    belief_accuracy_at_25pct: bool
    belief_accuracy_at_50pct: bool
    belief_accuracy_at_75pct: bool

    def __post_init__(self) -> None:
        if not 0.0 < self.path_efficiency <= 1.0 + 1e-9:
            raise ValueError(f"path efficiency out of range: {self.path_efficiency}")


@dataclass(frozen=True)
class Condition:
    """One evaluation cell: how gamma is produced and what the policy sees."""

    name: str
    gamma0: float | None = None
    belief_mode: str = "full"
    checkpoint: str | None = None
    policy: PolicyNet | None = None
    params: bel.InferenceParams | None = None
    expert: ExpertConfig = field(default_factory=ExpertConfig)

    def __post_init__(self) -> None:
        if self.name not in CONDITION_NAMES:
            raise ValueError(f"unknown condition: {self.name}")
        if self.name == "fixed_gamma":
            if self.gamma0 is None or not 0.0 <= self.gamma0 <= 1.0:
                raise ValueError(f"fixed_gamma requires gamma0 in [0, 1], got {self.gamma0}")

    @property
    def needs_policy(self) -> bool:
        return self.name in ("map_sequential", "uniform_prior", "brace")

    @property
    def tracks_belief(self) -> bool:
        # Every condition keeps the goal filter running: the assistive target
        # always comes from the posterior MAP, and the accuracy-over-path
        # metrics stay comparable across conditions. The uniform-prior
        # ablation blinds only the blending policy's input, not the
        # inference stack.
        return True


def no_assist_condition() -> Condition:
    return Condition(name="no_assist")


def fixed_gamma_condition(gamma0: float) -> Condition:
    return Condition(name="fixed_gamma", gamma0=gamma0)


def brace_condition(checkpoint: str) -> Condition:
    return Condition(name="brace", belief_mode="full", checkpoint=checkpoint)


def map_sequential_condition(checkpoint: str) -> Condition:
    """Single-goal conditioning: the net sees a one-hot on the MAP goal (ties
    to the lowest index) with zero entropy, instead of the posterior."""
    return Condition(name="map_sequential", belief_mode="map", checkpoint=checkpoint)


def uniform_prior_condition(checkpoint: str) -> Condition:
    return Condition(name="uniform_prior", belief_mode="uniform", checkpoint=checkpoint)


class MissingCheckpointError(FileNotFoundError):
    pass


def load_policy_bundle(checkpoint: str) -> tuple[PolicyNet, bel.InferenceParams]:
    path = Path(checkpoint)
    if not path.exists():
        raise MissingCheckpointError(str(path))
    arrays, _meta = load_checkpoint(path)
    net = policy_from_arrays(arrays)
    phi = arrays["phi"]
    params = bel.InferenceParams(beta=float(phi[0]), w_theta=float(phi[1]),
                                 w_d=float(phi[2]), temperature=float(phi[3]),
                                 ema_decay=float(phi[4]), d_slow=float(phi[5]))
    return net, params


# ---------------------------------------------------------------------------
# single-episode runner


def noise_stream_for(seed: int, config: EnvConfig) -> np.ndarray:
    rng = np.random.default_rng([int(seed), NOISE_SALT])
    return rng.standard_normal((config.max_steps + 8, 2))


def _quartile_means(values: list[float]) -> tuple[float, float, float, float]:
    chunks = np.array_split(np.asarray(values, dtype=np.float64), 4)
    return tuple(float(np.mean(c)) if len(c) else float("nan") for c in chunks)


def _accuracy_at(fractions: Sequence[float], cum_path: np.ndarray,
                 map_correct: list[bool]) -> list[bool]:
    """MAP-correctness at the step where realized path length first exceeds
    each fraction of the final length; falls back to the last step when the
    cursor never moved."""
    total = float(cum_path[-1]) if len(cum_path) else 0.0
    out = []
    for frac in fractions:
        idx = int(np.argmax(cum_path > frac * total)) if total > 0 else len(map_correct) - 1
        if total > 0 and not cum_path[idx] > frac * total:
            idx = len(map_correct) - 1
        out.append(bool(map_correct[idx]))
    return out


def run_episode(condition: Condition, state: EnvState,
                pilot_cfg: PilotConfig, config: EnvConfig,
                net: PolicyNet | None, params: bel.InferenceParams,
                noise_stream: np.ndarray, seed: int) -> dict:
    """One paired episode under a condition; returns the per-episode record."""
    pilot = make_pilot(state, pilot_cfg, config, seed=seed, noise_stream=noise_stream)
    memory = make_memory(seed)
    goal_positions = [tuple(g.position) for g in state.goals]
    belief = bel.uniform_belief(len(state.goals))
    start = tuple(state.cursor)
    true_goal = state.true_goal

    cursors = [start]
    gammas: list[float] = []
    entropies: list[float] = []
    near_obstacle: list[bool] = []
    map_correct: list[bool] = []
    step_lengths: list[float] = []
    collisions = 0
    success = False

    while True:
        h = pilot_action(state, pilot, pilot_cfg, config)
        if condition.tracks_belief:
            belief = bel.update_belief(belief, state.cursor, goal_positions, h,
                                       params, config.v_max)
        if condition.name == "no_assist":
            gamma = 0.0
        elif condition.name == "fixed_gamma":
            gamma = float(condition.gamma0)
        else:
            obs = policy_input(state, h, belief, config, condition.belief_mode)
            g, _v, _cache = policy_forward(net, obs[None, :])
            gamma = float(g[0])
        w = expert_action(state, state.goals[belief.map_goal_id],
                          condition.expert, memory, config)
        edge = nearest_obstacle_edge(state.cursor, state.obstacles, config)

        next_state, outcome = step(state, h, w, gamma, config)

        gammas.append(gamma)
        entropies.append(belief.entropy)
        near_obstacle.append(edge < config.d_safe)
        map_correct.append(belief.map_goal_id == state.true_goal_id)
        step_lengths.append(math.dist(next_state.cursor, state.cursor))
        cursors.append(tuple(next_state.cursor))
        collisions += int(outcome.collision)
        state = next_state
        if outcome.terminal:
            success = outcome.reached_goal_id is not None
            break

    steps = len(gammas)
    cum_path = np.cumsum(step_lengths)
    acc25, acc50, acc75 = _accuracy_at((0.25, 0.50, 0.75), cum_path, map_correct)
    dist_id = math.dist(start, true_goal.position)
    index_of_difficulty = math.log2(dist_id / (2.0 * true_goal.radius) + 1.0)

    metrics = EpisodeMetrics(
        success=success,
        steps_to_complete=steps,
        path_efficiency=path_efficiency(cursors),
        throughput=index_of_difficulty / steps,
        mean_gamma_by_quartile=_quartile_means(gammas),
        collision_count=collisions,
        belief_accuracy_at_25pct=acc25,
        belief_accuracy_at_50pct=acc50,
        belief_accuracy_at_75pct=acc75,
    )

    gam = np.asarray(gammas)
    near = np.asarray(near_obstacle)
    ent_q1 = np.array_split(np.asarray(entropies), 4)[0]
    return {
        "condition": condition.name,
        "seed": int(seed),
        "stage": int(state.stage),
        "n_goals": len(goal_positions),
        "true_goal": int(state.true_goal_id),
        "success": bool(metrics.success),
        "steps": int(metrics.steps_to_complete),
        "path_efficiency": float(metrics.path_efficiency),
        "throughput": float(metrics.throughput),
        "collision_count": int(metrics.collision_count),
        "mean_gamma": float(gam.mean()),
        "mean_gamma_by_quartile": [_none_if_nan(v) for v in metrics.mean_gamma_by_quartile],
        "gamma_near_obstacle": _none_if_nan(float(gam[near].mean()) if near.any() else float("nan")),
        "gamma_elsewhere": _none_if_nan(float(gam[~near].mean()) if (~near).any() else float("nan")),
        "entropy_q1_mean": float(ent_q1.mean()) if len(ent_q1) else 0.0,
        "belief_accuracy_at_25pct": acc25,
        "belief_accuracy_at_50pct": acc50,
        "belief_accuracy_at_75pct": acc75,
        "belief_accuracy_mean": float(np.mean(map_correct)),
        "noise_crc": int(zlib.crc32(noise_stream.tobytes())),
    }


def _none_if_nan(v: float) -> float | None:
    return None if (isinstance(v, float) and math.isnan(v)) else float(v)


# ---------------------------------------------------------------------------
# suite driver


@dataclass(frozen=True)
class SuiteResult:
    records: tuple[dict, ...]
    table: tuple[dict, ...]
    skipped: tuple[str, ...]       # "<condition>: <reason>" notices
    dropped_seeds: tuple[int, ...]

    def by_condition(self, name: str) -> list[dict]:
        return [r for r in self.records if r["condition"] == name]


def aggregate_table(records: Sequence[dict]) -> list[dict]:
    """Per-condition mean +- sd rows; permutation-invariant over episodes."""
    rows = []
    names = sorted({r["condition"] for r in records})
    for name in names:
        sub = [r for r in records if r["condition"] == name]
        arr = lambda key: np.asarray([r[key] for r in sub], dtype=np.float64)
        rows.append({
            "condition": name,
            "episodes": len(sub),
            "success_rate": float(arr("success").mean()),
            "steps_mean": float(arr("steps").mean()),
            "steps_sd": float(arr("steps").std()),
            "path_efficiency_mean": float(arr("path_efficiency").mean()),
            "path_efficiency_sd": float(arr("path_efficiency").std()),
            "throughput_mean": float(arr("throughput").mean()),
            "throughput_sd": float(arr("throughput").std()),
            "collision_mean": float(arr("collision_count").mean()),
            "mean_gamma": float(arr("mean_gamma").mean()),
        })
    return rows


def run_suite(conditions: Sequence[Condition], seeds: Sequence[int],
              pilot_cfg: PilotConfig = PilotConfig(),
              stages: Sequence[int] = EVAL_STAGES,
              config: EnvConfig | None = None) -> SuiteResult:
    """Run every condition over the identical (seed, stage, noise) episodes.

    Conditions whose checkpoint is missing are skipped with a notice rather
    than failing the suite.  Seeds whose environment generation fails are
    dropped for all conditions, preserving the pairing.
    """
    config = strict_env(DEFAULT_ENV) if config is None else config
    episodes: list[tuple[int, int, EnvState, np.ndarray]] = []
    dropped: list[int] = []
    for i, seed in enumerate(seeds):
        stage = int(stages[i % len(stages)])
        try:
            state = generate_environment(int(seed), stage, config)
        except GenerationError:
            dropped.append(int(seed))
            continue
        episodes.append((int(seed), stage, state, noise_stream_for(seed, config)))

    records: list[dict] = []
    skipped: list[str] = []
    default_params = bel.InferenceParams()
    for condition in conditions:
        net, params = condition.policy, condition.params
        if condition.needs_policy and net is None:
            if condition.checkpoint is None:
                skipped.append(f"{condition.name}: no checkpoint configured")
                continue
            try:
                net, loaded = load_policy_bundle(condition.checkpoint)
            except MissingCheckpointError as exc:
                skipped.append(f"{condition.name}: missing checkpoint {exc}")
                continue
            params = params or loaded
        params = params or default_params

        for seed, stage, state, stream in episodes:
            records.append(run_episode(condition, state, pilot_cfg, config,
                                       net, params, stream, seed))

    # paired-noise assertion: every condition consumed byte-identical streams
    by_seed: dict[int, set[int]] = {}
    for r in records:
        by_seed.setdefault(r["seed"], set()).add(r["noise_crc"])
    for seed, crcs in by_seed.items():
        if len(crcs) != 1:
            raise AssertionError(f"pilot noise streams diverged for seed {seed}")

    return SuiteResult(records=tuple(records), table=tuple(aggregate_table(records)),
                       skipped=tuple(skipped), dropped_seeds=tuple(dropped))


# ---------------------------------------------------------------------------
# record files


RECORD_SCHEMA = {
    "type": "object",
    "required": ["condition", "seed", "stage", "n_goals", "success", "steps",
                 "path_efficiency", "throughput", "collision_count",
                 "mean_gamma", "mean_gamma_by_quartile", "entropy_q1_mean",
                 "belief_accuracy_at_25pct", "belief_accuracy_at_50pct",
                 "belief_accuracy_at_75pct", "noise_crc"],
    "properties": {
        "condition": {"type": "string"},
        "seed": {"type": "integer"},
        "stage": {"type": "integer", "minimum": 1, "maximum": 5},
        "n_goals": {"type": "integer", "minimum": 1},
        "success": {"type": "boolean"},
        "steps": {"type": "integer", "minimum": 1},
        "path_efficiency": {"type": "number", "exclusiveMinimum": 0,
                            "maximum": 1.000000001},
        "throughput": {"type": "number", "minimum": 0},
        "collision_count": {"type": "integer", "minimum": 0},
        "mean_gamma": {"type": "number", "minimum": 0, "maximum": 1},
        "mean_gamma_by_quartile": {
            "type": "array", "minItems": 4, "maxItems": 4,
            "items": {"type": ["number", "null"]},
        },
        "entropy_q1_mean": {"type": "number", "minimum": 0},
        "belief_accuracy_at_25pct": {"type": "boolean"},
        "belief_accuracy_at_50pct": {"type": "boolean"},
        "belief_accuracy_at_75pct": {"type": "boolean"},
        "noise_crc": {"type": "integer"},
    },
}


def validate_record(record: dict) -> None:
    import jsonschema

    jsonschema.validate(record, RECORD_SCHEMA)


def write_records(path, records: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def write_table_csv(path, rows: Sequence[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# uncertainty stratification (brace vs. map_sequential, paired by seed)


def entropy_band(value: float) -> str:
    # boundaries are exact: 0.5 and 1.0 nats belong to the middle band
    if value < 0.5:
        return ENTROPY_BAND_LABELS[0]
    if value <= 1.0:
        return ENTROPY_BAND_LABELS[1]
    return ENTROPY_BAND_LABELS[2]


def stratify_by_uncertainty(records: Sequence[dict]) -> list[dict]:
    """Relative step reduction of brace over map_sequential, banded by the
    brace episode's mean first-quartile entropy."""
    brace = {(r["seed"], r["stage"]): r for r in records if r["condition"] == "brace"}
    seq = {(r["seed"], r["stage"]): r for r in records
           if r["condition"] == "map_sequential"}
    pairs = []
    for key, b in brace.items():
        s = seq.get(key)
        if s is None:
            continue
        improvement = (s["steps"] - b["steps"]) / s["steps"]
        pairs.append((entropy_band(b["entropy_q1_mean"]), b["n_goals"] >= 3, improvement))

    rows = []
    for label in ENTROPY_BAND_LABELS:
        vals = [imp for band, _multi, imp in pairs if band == label]
        if not vals:
            rows.append({"band": label, "n": 0, "insufficient_data": True})
            continue
        rows.append({"band": label, "n": len(vals),
                     "mean_improvement": float(np.mean(vals)),
                     "sd_improvement": float(np.std(vals)),
                     "insufficient_data": False})
    multi = [imp for _band, is_multi, imp in pairs if is_multi]
    rows.append({"band": "multi_target", "n": len(multi),
                 "mean_improvement": float(np.mean(multi)) if multi else None,
                 "sd_improvement": float(np.std(multi)) if multi else None,
                 "insufficient_data": not multi})
    return rows


# ---------------------------------------------------------------------------
# degraded-expert protocol


def degraded_expert_suite(checkpoint: str, seeds: Sequence[int],
                          modes: Sequence[str] = ("full", "horizon_limited",
                                                  "delayed", "random_perturbed"),
                          pilot_cfg: PilotConfig = PilotConfig(),
                          stages: Sequence[int] = EVAL_STAGES,
                          config: EnvConfig | None = None) -> list[dict]:
    """Standalone expert vs. BRACE wrapping that same expert, per mode.

    The standalone column drives the expert alone (full takeover, true goal
    known) on the identical episodes; the delta shows what belief-gated
    blending buys back as the expert degrades.
    """
    config = strict_env(DEFAULT_ENV) if config is None else config
    net, params = load_policy_bundle(checkpoint)
    rows = []
    for mode in modes:
        expert_cfg = ExpertConfig(mode=mode)
        standalone = []
        for i, seed in enumerate(seeds):
            stage = int(stages[i % len(stages)])
            try:
                state = generate_environment(int(seed), stage, config)
            except GenerationError:
                continue
            result = run_expert_episode(state, expert_cfg, config, seed=int(seed))
            standalone.append(result["success"])
        suite = run_suite(
            [Condition(name="brace", policy=net, params=params, expert=expert_cfg)],
            seeds, pilot_cfg, stages, config)
        brace_success = [r["success"] for r in suite.records]
        rows.append({
            "mode": mode,
            "standalone_success": float(np.mean(standalone)),
            "brace_success": float(np.mean(brace_success)),
            "delta": float(np.mean(brace_success) - np.mean(standalone)),
            "episodes": len(brace_success),
        })
    return rows


# ---------------------------------------------------------------------------
# reward ablation (training-time; budget capped well below the full run)


ABLATION_BUDGET_FRAC = 0.4


def reward_ablation(base_cfg, seed: int, out_dir,
                    weight_names: Sequence[str] = ("w_coll", "w_prog", "w_auto"),
                    eval_seeds: Sequence[int] | None = None,
                    budget_frac: float = ABLATION_BUDGET_FRAC,
                    pilot_cfg: PilotConfig | None = None) -> dict:
    """Train once per zeroed weight at a reduced budget; report curves and a
    paired final evaluation per variant.  Import is deferred so the harness
    stays usable without the training stack in memory."""
    from .trainer import run_training

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    budget = max(200, int(base_cfg.max_episodes * budget_frac))
    eval_seeds = list(eval_seeds if eval_seeds is not None
                      else range(900_000, 900_060))
    pilot_cfg = pilot_cfg or base_cfg.pilot

    variants = {"full": base_cfg.reward}
    for name in weight_names:
        variants[f"{name}=0"] = replace(base_cfg.reward, **{name: 0.0})

    report: dict = {"budget_episodes": budget, "variants": {}}
    for label, weights in variants.items():
        cfg = replace(base_cfg, reward=weights, max_episodes=budget)
        run_dir = out_dir / label.replace("=", "_")
        result = run_training(cfg, seed=seed, out_dir=run_dir)
        curve = []
        with open(result.log_path, encoding="utf-8") as fh:
            for line in fh:
                rec = json.loads(line)
                curve.append({"episode": rec["episode"], "success": rec["success"],
                              "mean_gamma": rec["mean_gamma"],
                              "collision_steps": rec["collision_steps"]})
        suite = run_suite([Condition(name="brace", checkpoint=result.checkpoint_path)],
                          eval_seeds, pilot_cfg)
        agg = suite.table[0]
        report["variants"][label] = {
            "checkpoint": result.checkpoint_path,
            "curve": curve,
            "final_success": agg["success_rate"],
            "final_mean_gamma": agg["mean_gamma"],
            "final_collision_mean": agg["collision_mean"],
        }
    return report
