import json
import math

import numpy as np
import pytest

from brace import belief as bel
from brace import trainer
from brace.env import DEFAULT_ENV, generate_environment
from brace.neural import adam_init, policy_init, policy_params
from brace.pilot import PilotConfig
from brace.trainer import (BELIEF_SLOTS, CurriculumStage, CurriculumStallError,
                           PPOConfig, RewardWeights, StepRewardContext,
                           TrainConfig, belief_reinforce_update,
                           collect_episode, compute_gae,
                           episode_likelihood_data, normalize_advantages,
                           policy_input, ppo_update, run_training, step_reward,
                           tau_stage_cap, warm_start_params)

from conftest import TINY

W = RewardWeights()


def ctx(**kw):
    base = dict(collision=False, gamma=0.0, p_max=1.0, p_true=1.0,
                progress=0.0, dist_to_map=150.0)
    base.update(kw)
    return StepRewardContext(**base)


# ---------------------------------------------------------------------------
# step reward


def test_reward_uniform_prior_idle_step():
    # three-way uniform belief, nothing else active: only the goal
    # identification term fires, 2*ln(1/3)
    total, comps = step_reward(ctx(p_max=1 / 3, p_true=1 / 3))
    assert total == pytest.approx(2.0 * math.log(1.0 / 3.0))
    assert total == pytest.approx(-2.197, abs=5e-4)
    assert all(v == 0.0 for k, v in comps.items() if k != "goal_id")


def test_reward_full_takeover_far_from_map():
    # gamma=1 beyond the far threshold: assistance tax plus autonomy cost
    total, comps = step_reward(ctx(gamma=1.0, dist_to_map=260.0))
    assert comps["far"] == pytest.approx(-1.5)
    assert comps["autonomy"] == pytest.approx(-1.5)
    assert total == pytest.approx(-3.0)


def test_reward_collision_dominates():
    total, comps = step_reward(ctx(collision=True))
    assert comps["collision"] == -10.0
    assert total == pytest.approx(-10.0)


def test_reward_proximity_gate_and_progress():
    near = step_reward(ctx(gamma=0.8, p_max=0.9, dist_to_map=99.0))[1]
    at_edge = step_reward(ctx(gamma=0.8, p_max=0.9, dist_to_map=100.0))[1]
    assert near["proximity"] == pytest.approx(2.5 * 0.8 * 0.9)
    assert at_edge["proximity"] == 0.0
    # progress arrives as a fraction of the speed cap, so a full-speed step
    # toward the goal is worth at most w_prog * p_max
    total, comps = step_reward(ctx(p_max=0.5, progress=0.4))
    assert comps["progress"] == pytest.approx(3.0 * 0.5 * 0.4)
    # total is the exact sum of components
    assert total == pytest.approx(sum(comps.values()))


def test_reward_threshold_ordering_enforced():
    with pytest.raises(ValueError, match="near threshold"):
        RewardWeights(near_threshold=300.0, far_threshold=250.0)


# ---------------------------------------------------------------------------
# advantage estimation


def test_gae_lambda_one_is_discounted_monte_carlo():
    rng = np.random.default_rng(0)
    r = rng.normal(size=7)
    v = rng.normal(size=7)
    dones = np.zeros(7, bool)
    dones[-1] = True
    adv, ret = compute_gae(r, v, dones, discount=0.9, lam=1.0)
    # with lam=1 the advantage telescopes to (discounted return - value)
    mc = np.array([sum(0.9 ** (k - t) * r[k] for k in range(t, 7))
                   for t in range(7)])
    np.testing.assert_allclose(adv, mc - v, atol=1e-12)
    np.testing.assert_allclose(ret, mc, atol=1e-12)


def test_gae_done_cuts_bootstrap():
    r = np.array([1.0, 1.0, 1.0])
    v = np.array([5.0, 5.0, 5.0])
    dones = np.array([False, True, False])
    adv, _ = compute_gae(r, v, dones, discount=1.0, lam=0.95)
    # step 1 is terminal: delta = r - v exactly, nothing propagates across
    assert adv[1] == pytest.approx(1.0 - 5.0)
    assert adv[2] == pytest.approx(1.0 - 5.0)
    with pytest.raises(ValueError, match="empty"):
        compute_gae(np.array([]), np.array([]), np.array([], dtype=bool))


def test_advantage_normalization():
    rng = np.random.default_rng(1)
    a = rng.normal(3.0, 7.0, size=200)
    n = normalize_advantages(a)
    assert abs(n.mean()) < 1e-12
    assert n.std() == pytest.approx(1.0, abs=1e-6)
    flat = normalize_advantages(np.full(5, 2.5))
    np.testing.assert_allclose(flat, 0.0)


# ---------------------------------------------------------------------------
# policy input layout


def _three_goal_state():
    return generate_environment(3, 4, DEFAULT_ENV)


def test_policy_input_full_mode_matches_observation():
    from brace.env import observation_vector
    state = _three_goal_state()
    h = (4.0, -2.0)
    belief = bel.uniform_belief(3)
    x = policy_input(state, h, belief, DEFAULT_ENV, "full")
    assert x.shape == (10 + BELIEF_SLOTS + 1,)
    np.testing.assert_allclose(x[:10], observation_vector(state, h, DEFAULT_ENV))
    np.testing.assert_allclose(x[10:13], 1.0 / 3.0)
    assert x[13] == pytest.approx(math.log(3.0))


def test_policy_input_pads_missing_goals():
    state = generate_environment(11, 3, DEFAULT_ENV)  # two goals
    belief = bel.uniform_belief(2)
    x = policy_input(state, (0.0, 0.0), belief, DEFAULT_ENV, "full")
    assert x[6] == pytest.approx(1.0)       # absent third goal reads as far
    assert x[12] == 0.0                     # and carries no belief mass
    np.testing.assert_allclose(x[10:12], 0.5)
    assert x[13] == pytest.approx(math.log(2.0))


def test_policy_input_map_and_uniform_modes():
    state = _three_goal_state()
    probs = np.array([0.2, 0.7, 0.1])
    belief = bel.BeliefState(probs=tuple(probs), log_scores=tuple(np.log(probs)),
                             entropy=float(-(probs * np.log(probs)).sum()),
                             p_max=0.7, map_goal_id=1)
    m = policy_input(state, (0.0, 0.0), belief, DEFAULT_ENV, "map")
    np.testing.assert_allclose(m[10:13], [0.0, 1.0, 0.0])
    assert m[13] == 0.0
    u = policy_input(state, (0.0, 0.0), belief, DEFAULT_ENV, "uniform")
    np.testing.assert_allclose(u[10:13], 1.0 / 3.0)
    assert u[13] == pytest.approx(math.log(3.0))
    with pytest.raises(ValueError, match="unknown belief mode"):
        policy_input(state, (0.0, 0.0), belief, DEFAULT_ENV, "posterior")


# ---------------------------------------------------------------------------
# curriculum schedule


def test_tau_caps_flatten_only():
    caps = [tau_stage_cap(i) for i in range(1, 6)]
    assert caps == [2.0, 1.2, 1.0, 1.0, 1.0]
    assert min(caps) >= 1.0


def test_train_config_validation():
    with pytest.raises(ValueError, match="unknown training mode"):
        TrainConfig(mode="offline")
    with pytest.raises(ValueError, match="unknown belief input"):
        TrainConfig(belief_input="sparse")


# ---------------------------------------------------------------------------
# ppo update


def _synthetic_batch(n=256, seed=0, favor_high_z=True):
    """Observations are noise; advantages reward samples with z above the
    mean, so the actor mean must move up if the update works."""
    rng = np.random.default_rng(seed)
    net = policy_init(input_dim=6, hidden=16, seed=seed)
    X = rng.normal(size=(n, 6))
    from brace.neural import sample_action
    zs, lps = [], []
    for i in range(n):
        _, z, lp, _ = sample_action(net, X[i], rng)
        zs.append(z)
        lps.append(lp)
    z = np.array(zs)
    adv = np.sign(z - z.mean()) * (1.0 if favor_high_z else -1.0)
    return net, {"observations": X, "z": z, "log_probs": np.array(lps),
                 "advantages": normalize_advantages(adv),
                 "returns": rng.normal(size=n)}


def test_ppo_update_moves_actor_toward_rewarded_samples():
    net, batch = _synthetic_batch()
    cfg = PPOConfig(batch=256, minibatch=64, epochs=2)
    opt = adam_init(policy_params(net), cfg.lr, 100, c_clip=cfg.grad_clip)
    from brace.neural import policy_forward
    _, _, cache0 = policy_forward(net, batch["observations"])
    mu_before = cache0.actor_pre.mean()
    diag = ppo_update(batch, net, opt, cfg, np.random.default_rng(0))
    assert not diag["aborted"]
    assert all(math.isfinite(diag[k]) for k in
               ("actor_loss", "value_loss", "entropy", "clip_fraction", "approx_kl"))
    _, _, cache1 = policy_forward(net, batch["observations"])
    assert cache1.actor_pre.mean() > mu_before


def test_ppo_update_rejects_small_batches():
    net, batch = _synthetic_batch(n=32)
    cfg = PPOConfig()
    opt = adam_init(policy_params(net), cfg.lr, 100)
    with pytest.raises(ValueError, match="too small"):
        ppo_update(batch, net, opt, cfg, np.random.default_rng(0))


def test_ppo_update_aborts_on_nonfinite_and_leaves_net_alone():
    net, batch = _synthetic_batch()
    batch["advantages"] = batch["advantages"].copy()
    batch["advantages"][3] = math.nan
    before = {k: v.copy() for k, v in policy_params(net).items()}
    cfg = PPOConfig(batch=256, minibatch=256, epochs=1)
    opt = adam_init(policy_params(net), cfg.lr, 100)
    diag = ppo_update(batch, net, opt, cfg, np.random.default_rng(0))
    assert diag["aborted"]
    for k, v in policy_params(net).items():
        np.testing.assert_array_equal(v, before[k])


# ---------------------------------------------------------------------------
# inference-parameter ascent


def _episode_data(params, n_eps=4, n_steps=40, seed=0, advantages=None):
    rng = np.random.default_rng(seed)
    data = []
    for e in range(n_eps):
        state = generate_environment(100 + e, 3, DEFAULT_ENV)
        goals = np.array([g.position for g in state.goals])
        true = state.true_goal_id
        cursor = np.array(state.cursor, dtype=float)
        cursors, actions = [], []
        for _ in range(n_steps):
            to_goal = goals[true] - cursor
            d = np.linalg.norm(to_goal)
            a = to_goal / max(d, 1e-9) * min(10.0, d) + rng.normal(0, 0.4, 2)
            cursors.append(tuple(cursor))
            actions.append(tuple(a))
            cursor = cursor + np.clip(a, -10, 10)
        adv = advantages if advantages is not None else np.ones(n_steps)
        data.append(episode_likelihood_data(
            np.array(cursors), np.array(actions), goals, true, adv, params))
    return data


def test_belief_update_sharpens_on_clean_goal_directed_data():
    params = bel.InferenceParams(beta=1.0, temperature=1.5)
    data = _episode_data(params)
    new, info = belief_reinforce_update(data, params, alpha=0.0, tau_cap=2.0)
    # supervised objective on nearly-rational trajectories asks for a
    # sharper likelihood than beta=1
    assert new.beta > params.beta
    assert new.w_theta + new.w_d == pytest.approx(1.0)
    assert info["norm"] >= 0.0


def test_belief_update_temperature_never_increases():
    params = bel.InferenceParams(beta=2.0, temperature=1.2)
    data = _episode_data(params)
    for cap in (2.0, 1.0):
        new, _ = belief_reinforce_update(data, params, alpha=0.5, tau_cap=cap)
        assert new.temperature <= params.temperature + 1e-12
        assert new.temperature >= 1.0  # floor


def test_belief_update_confidence_scales_step():
    params = bel.InferenceParams(beta=2.0, temperature=1.0)
    data = _episode_data(params)
    loose, il = belief_reinforce_update(data, params, alpha=0.0, tau_cap=2.0,
                                        c_confidence=1e-6)
    tight, it = belief_reinforce_update(data, params, alpha=0.0, tau_cap=2.0,
                                        c_confidence=0.999)
    assert il["confidence"] == 1.0
    assert it["confidence"] < 1.0
    move = lambda p: abs(p.beta - params.beta)
    assert move(tight) <= move(loose) + 1e-12


def test_belief_update_clamps_into_ranges():
    params = bel.InferenceParams(beta=49.9, w_theta=0.94, w_d=0.06,
                                 temperature=1.0)
    data = _episode_data(params)
    new, info = belief_reinforce_update(data, params, alpha=0.0, tau_cap=1.0,
                                        lr_phi=500.0, c_clip=1e9)
    assert 0.5 <= new.beta <= 50.0
    assert 0.05 <= new.w_theta <= 0.95
    assert info["warnings"] >= 1


# ---------------------------------------------------------------------------
# episode collection


def test_collect_episode_contract():
    cfg = TrainConfig()
    params = bel.InferenceParams()
    net = policy_init(seed=0)
    state = generate_environment(5, 2, cfg.env)
    rng = np.random.default_rng(9)
    ep = collect_episode(state, net, params, cfg, rng, pilot_seed=4, expert_seed=4)
    assert ep.steps == len(ep.transitions)
    assert len(ep.cursors) == ep.steps + 1
    assert len(ep.human_actions) == ep.steps
    assert 0.0 < ep.pe <= 1.0 + 1e-9
    assert 0.0 <= ep.belief_accuracy <= 1.0
    assert all(0.0 < t.gamma < 1.0 for t in ep.transitions)
    assert ep.transitions[-1].done
    assert not any(t.done for t in ep.transitions[:-1])
    assert ep.total_reward == pytest.approx(sum(t.reward for t in ep.transitions))


def test_collect_episode_deterministic_given_rng():
    cfg = TrainConfig()
    params = bel.InferenceParams()
    state = generate_environment(5, 2, cfg.env)
    runs = []
    for _ in range(2):
        net = policy_init(seed=0)
        ep = collect_episode(state, net, params, cfg, np.random.default_rng(3),
                             pilot_seed=4, expert_seed=4)
        runs.append(ep)
    assert runs[0].steps == runs[1].steps
    np.testing.assert_array_equal(runs[0].cursors, runs[1].cursors)
    assert runs[0].total_reward == runs[1].total_reward


def test_collect_episode_uniform_mode_blinds_input_only():
    # The filter keeps running (the expert still tracks the posterior MAP);
    # only the network's belief slots are flattened.
    cfg = TrainConfig(belief_input="uniform")
    params = bel.InferenceParams()
    net = policy_init(seed=0)
    state = generate_environment(7, 3, cfg.env)
    ep = collect_episode(state, net, params, cfg, np.random.default_rng(1),
                         pilot_seed=2, expert_seed=2)
    posterior_moved = any(abs(t.belief[0] - 0.5) > 1e-6 for t in ep.transitions)
    assert posterior_moved
    for t in ep.transitions:
        np.testing.assert_allclose(t.observation[10:12], 0.5)  # two live goals
        assert t.observation[12] == 0.0
        assert t.observation[13] == pytest.approx(math.log(2))


# ---------------------------------------------------------------------------
# warm start


def test_warm_start_disabled_returns_stock():
    params = warm_start_params(TrainConfig(warm_start_episodes=0, tau0=1.7), seed=0)
    stock = bel.InferenceParams()
    assert params.temperature == 1.7
    assert params.beta == stock.beta


def test_warm_start_fits_and_keeps_schedule_temperature():
    cfg = TrainConfig(warm_start_episodes=12, tau0=2.0)
    params = warm_start_params(cfg, seed=0)
    assert params.temperature == 2.0
    assert params.beta != bel.InferenceParams().beta


# ---------------------------------------------------------------------------
# full training loop (small budgets)




def test_training_emits_artifacts_and_log_schema(tiny_run):
    log = (tiny_run / "train_log.ndjson").read_text().strip().splitlines()
    assert len(log) == 130
    rec = json.loads(log[-1])
    assert set(rec) >= {"episode", "stage", "success", "steps", "path_efficiency",
                        "mean_gamma", "belief_accuracy", "collision_steps",
                        "reward", "losses", "phi"}
    assert rec["episode"] == 130
    assert rec["stage"] == 1
    assert len(rec["phi"]) == 4


def test_training_completes_stage_then_consolidates(tiny_run):
    from brace.neural import load_checkpoint
    _, meta = load_checkpoint(tiny_run / "checkpoint.bin")
    assert meta["completed"] is True
    # one curriculum block recorded, the remaining budget spent on the mix
    assert meta["stage_history"][0]["stage"] == 1
    assert meta["stage_history"][0]["episodes"] >= 100
    assert meta["episodes"] == 130
    assert meta["input_dim"] == 14


def test_training_checkpoint_carries_parameters(tiny_run):
    from brace.neural import load_checkpoint
    arrays, meta = load_checkpoint(tiny_run / "checkpoint.bin")
    assert "phi" in arrays and arrays["phi"].shape == (6,)
    assert any(k.startswith("net.trunk") for k in arrays)
    assert any(k.startswith("opt.m.") for k in arrays)
    # rng states serialize as plain ints
    assert isinstance(meta["rng"]["policy"]["state"]["state"], int)


def test_training_same_seed_is_byte_identical(tmp_path):
    cfg = TrainConfig(stages=(1,), max_episodes=20, warm_start_episodes=4,
                      ppo=PPOConfig(batch=128, minibatch=64))
    a, b = tmp_path / "a", tmp_path / "b"
    run_training(cfg, seed=11, out_dir=a)
    run_training(cfg, seed=11, out_dir=b)
    assert (a / "checkpoint.bin").read_bytes() == (b / "checkpoint.bin").read_bytes()
    assert (a / "train_log.ndjson").read_bytes() == (b / "train_log.ndjson").read_bytes()


def test_training_without_curriculum_samples_selected_stages(tmp_path):
    cfg = TrainConfig(use_curriculum=False, stages=(1, 2), max_episodes=24,
                      warm_start_episodes=4, ppo=PPOConfig(batch=128, minibatch=64))
    res = run_training(cfg, seed=2, out_dir=tmp_path / "mix")
    assert res.completed is False
    assert res.final_stage == 0
    stages = set()
    with open(res.log_path) as fh:
        for line in fh:
            stages.add(json.loads(line)["stage"])
    assert stages <= {1, 2} and len(stages) == 2


def test_training_stalls_with_diagnostics(tmp_path, monkeypatch):
    monkeypatch.setattr(trainer, "CURRICULUM",
                        (CurriculumStage(1, 4, 1.01),))  # unreachable bar
    cfg = TrainConfig(stages=(1,), max_episodes=80, warm_start_episodes=4,
                      ppo=PPOConfig(batch=128, minibatch=64))
    with pytest.raises(CurriculumStallError, match="stage 1"):
        run_training(cfg, seed=1, out_dir=tmp_path / "stall")
    diag = json.loads((tmp_path / "stall" / "stall_diagnostics.json").read_text())
    assert diag["stage"] == 1
    assert diag["episodes_in_stage"] == 20  # five times the stage minimum


def test_training_quarantines_nonfinite_batches(tmp_path, monkeypatch):
    real = trainer.step_reward

    def poisoned(ctx, weights=RewardWeights()):
        total, comps = real(ctx, weights)
        return math.nan, comps

    monkeypatch.setattr(trainer, "step_reward", poisoned)
    cfg = TrainConfig(stages=(1,), max_episodes=6, warm_start_episodes=4,
                      ppo=PPOConfig(batch=128, minibatch=64))
    res = run_training(cfg, seed=1, out_dir=tmp_path / "q")
    assert res.quarantined >= 1
    qfiles = list((tmp_path / "q").glob("quarantine_ep*.json"))
    assert qfiles
    payload = json.loads(qfiles[0].read_text())
    assert payload["diagnostics"]["aborted"] is True
