"""Shared fixtures.

Heavyweight artifacts (trained checkpoints, big eval suites) are built once
and cached under BRACE_TEST_CACHE (default ~/.cache/brace_tests), keyed by
the full config repr, so repeated test runs skip retraining.  Delete the
cache directory after changing training code.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import pytest

from brace.trainer import PPOConfig, TrainConfig, run_training

CACHE_ROOT = Path(os.environ.get("BRACE_TEST_CACHE",
                                 os.path.expanduser("~/.cache/brace_tests")))

ACCEPT_SEED = 0

# Single-stage budget small enough for a cold cache while still exercising the
# stage-completion and consolidation paths.
TINY = TrainConfig(stages=(1,), max_episodes=130, warm_start_episodes=6,
                   ppo=PPOConfig(batch=256, minibatch=64))


def cached_training(label: str, cfg: TrainConfig, seed: int) -> Path:
    """Train once per (config, seed); return the run directory."""
    key = hashlib.sha256(repr((cfg, seed)).encode()).hexdigest()[:16]
    out = CACHE_ROOT / f"{label}_{key}"
    done = out / "checkpoint.bin"
    if not done.exists():
        run_training(cfg, seed, out)
    return out


def episodes_used(run_dir: Path) -> int:
    with open(run_dir / "train_log.ndjson") as fh:
        return sum(1 for line in fh if line.strip())


@pytest.fixture(scope="session")
def tiny_run() -> Path:
    return cached_training("tiny", TINY, seed=3)


@pytest.fixture(scope="session")
def full_run() -> Path:
    """Full-curriculum joint training; the checkpoint most tests assist with."""
    return cached_training("full", TrainConfig(), ACCEPT_SEED)


@pytest.fixture(scope="session")
def uniform_run() -> Path:
    """Same budget, belief input pinned to uniform (no posterior features)."""
    cfg = TrainConfig(belief_input="uniform")
    return cached_training("uniform", cfg, ACCEPT_SEED)


@pytest.fixture(scope="session")
def nocurriculum_run(full_run) -> Path:
    """No staged curriculum, budget matched to what the curriculum run used."""
    cfg = TrainConfig(use_curriculum=False, max_episodes=episodes_used(full_run))
    return cached_training("nocur", cfg, ACCEPT_SEED)


def cached_json(label: str, key_obj, builder) -> dict | list:
    """Build-once JSON artifact cache for expensive evaluation sweeps."""
    key = hashlib.sha256(repr(key_obj).encode()).hexdigest()[:16]
    path = CACHE_ROOT / f"{label}_{key}.json"
    if path.exists():
        return json.loads(path.read_text())
    value = builder()
    CACHE_ROOT.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(value))
    return value


# --- acceptance report ---------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


# --- shared evaluation sweeps -------------------------------------------------

PAIRED_SEEDS = tuple(range(500_000, 500_300))     # 300 episodes over stages 3-5
DEGRADED_SEEDS = tuple(range(520_000, 520_060))   # 60 episodes per expert mode


def build_paired_suite(full_dir: Path, uniform_dir: Path) -> dict:
    from brace import evalbench as ev
    ckpt = str(full_dir / "checkpoint.bin")
    conditions = [ev.brace_condition(ckpt), ev.no_assist_condition(),
                  ev.map_sequential_condition(ckpt),
                  ev.uniform_prior_condition(str(uniform_dir / "checkpoint.bin"))]
    res = ev.run_suite(conditions, PAIRED_SEEDS)
    return {"records": list(res.records), "table": list(res.table),
            "strata": ev.stratify_by_uncertainty(res.records),
            "dropped_seeds": list(res.dropped_seeds),
            "skipped": list(res.skipped)}


def build_single_condition_suite(run_dir: Path) -> dict:
    from brace import evalbench as ev
    res = ev.run_suite([ev.brace_condition(str(run_dir / "checkpoint.bin"))],
                       PAIRED_SEEDS)
    return {"records": list(res.records), "table": list(res.table),
            "dropped_seeds": list(res.dropped_seeds)}


def build_degraded_rows(full_dir: Path) -> list:
    from brace import evalbench as ev
    return ev.degraded_expert_suite(str(full_dir / "checkpoint.bin"),
                                    DEGRADED_SEEDS)


def build_reward_ablation(out_dir: Path) -> dict:
    from brace import evalbench as ev
    report = ev.reward_ablation(TrainConfig(), seed=ACCEPT_SEED, out_dir=out_dir)
    # curves are bulky and the tests only read the per-variant summary stats
    for variant in report["variants"].values():
        variant["final_episode_success"] = variant["curve"][-1]["success"]
        del variant["curve"]
    return report


@pytest.fixture(scope="session")
def paired_suite(full_run, uniform_run) -> dict:
    """brace / no_assist / map_sequential / uniform-input variant on
    identical (seed, stage, noise) episodes."""
    return cached_json("paired", (str(full_run), str(uniform_run), PAIRED_SEEDS),
                       lambda: build_paired_suite(full_run, uniform_run))


@pytest.fixture(scope="session")
def nocurriculum_suite(nocurriculum_run) -> dict:
    return cached_json("nocur_suite", (str(nocurriculum_run), PAIRED_SEEDS),
                       lambda: build_single_condition_suite(nocurriculum_run))


@pytest.fixture(scope="session")
def degraded_rows(full_run) -> list:
    return cached_json("degraded", (str(full_run), DEGRADED_SEEDS),
                       lambda: build_degraded_rows(full_run))


@pytest.fixture(scope="session")
def ablation_report(full_run) -> dict:
    # keyed on the full run so retraining invalidates the ablation sweeps too
    return cached_json("ablation", (str(full_run),),
                       lambda: build_reward_ablation(CACHE_ROOT / "ablation_runs"))
