"""Watch one docking episode tick by tick under different assistance modes.

Runs the same seeded scene three times: unassisted, fixed 50/50 blending,
and (when a checkpoint path is given) the learned blending policy.  Prints a
compact tick table showing how the posterior sharpens and where the blend
weight goes.

Usage: python3 demos/watch_episode.py [checkpoint.bin]
"""

import sys

import numpy as np

from brace import belief as bel
from brace.env import DEFAULT_ENV, generate_environment, nearest_obstacle_edge, step
from brace.evalbench import load_policy_bundle, strict_env
from brace.expert import ExpertConfig, expert_action, make_memory
from brace.neural import policy_forward
from brace.pilot import PilotConfig, make_pilot, pilot_action
from brace.trainer import policy_input

SEED = 429
STAGE = 4


def run(gamma_source, label, net=None, params=None):
    config = strict_env(DEFAULT_ENV)
    state = generate_environment(SEED, STAGE, config)
    params = params or bel.InferenceParams()
    pilot_cfg = PilotConfig()
    pilot = make_pilot(state, pilot_cfg, config, seed=SEED)
    memory = make_memory(SEED)
    b = bel.uniform_belief(len(state.goals))
    print(f"\n=== {label} ===")
    print(f"goals: {len(state.goals)}  true goal: g{state.true_goal_id}  "
          f"obstacles: {len(state.obstacles)}")
    print(f"{'tick':>4} {'p(goals)':<24} {'H':>5} {'MAP':>4} {'gamma':>6} {'d_goal':>7} {'d_obs':>6}")
    t = 0
    while t < config.max_steps:
        h = pilot_action(state, pilot, pilot_cfg, config)
        b = bel.update_belief(b, state.cursor,
                              [tuple(g.position) for g in state.goals], h,
                              params, config.v_max)
        gamma = gamma_source(state, h, b, net, params, config)
        w = expert_action(state, state.goals[b.map_goal_id], ExpertConfig(),
                          memory, config)
        state, outcome = step(state, h, w, gamma, config)
        d_goal = float(np.hypot(*(np.array(state.goals[state.true_goal_id].position)
                                  - np.array(state.cursor))))
        d_obs = nearest_obstacle_edge(state.cursor, state.obstacles, config)
        if t % 10 == 0 or outcome.terminal:
            probs = " ".join(f"{p:.2f}" for p in b.probs)
            print(f"{t:>4} [{probs:<22}] {b.entropy:>5.2f}  g{b.map_goal_id} "
                  f"{gamma:>6.2f} {d_goal:>7.1f} {d_obs:>6.1f}")
        t += 1
        if outcome.terminal:
            verdict = "reached the goal" if outcome.reached_goal_id is not None \
                else ("collision" if outcome.collision else "timeout")
            print(f"--> {verdict} after {t} ticks")
            return
    print(f"--> timeout after {t} ticks")


def main():
    run(lambda *a: 0.0, "no assistance")
    run(lambda *a: 0.5, "fixed gamma = 0.5")
    if len(sys.argv) > 1:
        net, params = load_policy_bundle(sys.argv[1])

        def learned(state, h, b, net, params, config):
            g, _v, _ = policy_forward(net, policy_input(state, h, b, config, "full")[None, :])
            return float(g[0])

        run(learned, f"learned blending ({sys.argv[1]})", net, params)
    else:
        print("\n(pass a checkpoint.bin to watch the learned policy; "
              "train one with `brace train --out runs/demo`)")


if __name__ == "__main__":
    main()
