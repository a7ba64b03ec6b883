"""How much should the robot take over, and when is committing to one goal bad?

Part 1 sweeps belief certainty and prints the optimal blend weight: more
certainty -> more assistance, and a heavier safety constraint also pushes the
optimum up.  Part 2 compares committing to the most-likely goal against
optimizing under the full posterior on random utility landscapes -- the
commit strategy never wins, and its extra regret grows with how far apart
the per-goal optima sit.
"""

import numpy as np

from brace.theory import (certainty_belief, default_progress_family,
                          default_quadratic_family, optimal_gamma, regret_pair,
                          verify_theorem2)


def sweep(family):
    print(f"\n--- {family.name}: optimal blend vs. certainty ---")
    print(f"{'lambda':>7} {'gamma*':>8}    (lambda 0 = uniform belief, 1 = certain)")
    for lam in np.linspace(0.0, 1.0, 6):
        b = certainty_belief(lam, len(family.constraints))
        print(f"{lam:>7.2f} {optimal_gamma(family, b):>8.4f}")
    b_half = certainty_belief(0.5, len(family.constraints))
    g1 = optimal_gamma(family, b_half, scale=1.0)
    g2 = optimal_gamma(family, b_half, scale=2.0)
    print(f"constraint weight x2 at lambda=0.5: gamma* {g1:.4f} -> {g2:.4f}")


def regret_demo():
    print("\n--- committing to the MAP goal vs. integrating the posterior ---")
    fam = default_quadratic_family()
    for lam in (0.0, 0.4, 0.8):
        b = certainty_belief(lam, len(fam.constraints))
        s = regret_pair(fam, b)
        print(f"lambda {lam:.1f}: regret(commit) {s.r_map:.4f} >= "
              f"regret(integrate) {s.r_int:.4f}   gap {s.gap:.4f}")
    rep = verify_theorem2(n_families=200, seed=3)
    print(f"\nrandom landscapes: {rep.n_samples} families, "
          f"{rep.n_regret_violations} ordering violations, "
          f"worst identity residual {rep.max_identity_residual:.1e}")
    spreads = np.array([s.optima_spread for s in rep.samples])
    gaps = np.array([s.gap for s in rep.samples])
    lo = gaps[spreads < np.median(spreads)].mean()
    hi = gaps[spreads >= np.median(spreads)].mean()
    print(f"mean gap when per-goal optima agree: {lo:.5f}; when they disagree: {hi:.5f}")


if __name__ == "__main__":
    sweep(default_quadratic_family())
    sweep(default_progress_family())
    regret_demo()
