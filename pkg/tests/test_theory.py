import json
import math

import numpy as np
import pytest

from brace.theory import (ProgressConstraintFamily, QuadraticFamily,
                          belief_entropy, certainty_belief, check_assumptions,
                          default_progress_family, default_quadratic_family,
                          golden_section_max, map_goal, optimal_gamma,
                          regret_pair, theorem1_report_dict,
                          theorem2_report_dict, verify_theorem1,
                          verify_theorem2, write_verification_report)


def symmetric_pair():
    """Two goals with mirrored optima and no constraint term; under an even
    belief the committed controller picks one side while the integrated one
    sits at the midpoint."""
    return QuadraticFamily(optima=np.array([0.2, 0.8]),
                           curvatures=np.array([1.0, 1.0]),
                           constraints=np.array([0.0, 0.0]))


# ---------------------------------------------------------------------------
# family construction


def test_quadratic_family_validation():
    with pytest.raises(ValueError, match="share a shape"):
        QuadraticFamily(optima=np.zeros(2), curvatures=np.ones(3),
                        constraints=np.zeros(2))
    with pytest.raises(ValueError, match="curvatures"):
        QuadraticFamily(optima=np.zeros(2), curvatures=np.array([1.0, 0.0]),
                        constraints=np.zeros(2))
    with pytest.raises(ValueError, match="non-negative"):
        QuadraticFamily(optima=np.zeros(2), curvatures=np.ones(2),
                        constraints=np.array([-0.1, 0.0]))


def test_progress_family_validation_and_clipping():
    fam = default_progress_family()
    speeds = np.linalg.norm(fam.expert_actions(), axis=1)
    assert np.all(speeds <= fam.v_max + 1e-12)
    with pytest.raises(ValueError, match="goals must be"):
        ProgressConstraintFamily(cursor=np.zeros(2), human=np.zeros(2),
                                 goals=np.zeros(3), obstacle=np.zeros(2),
                                 constraints=np.zeros(3))
    with pytest.raises(ValueError, match="one constraint weight"):
        ProgressConstraintFamily(cursor=np.zeros(2), human=np.zeros(2),
                                 goals=np.zeros((2, 2)), obstacle=np.zeros(2),
                                 constraints=np.zeros(3))


def test_goal_optimum_closed_form_matches_search():
    fam = default_quadratic_family()
    for g in range(fam.n_goals):
        one_hot = np.zeros(fam.n_goals)
        one_hot[g] = 1.0
        assert optimal_gamma(fam, one_hot) == pytest.approx(
            fam.goal_optimum(g), abs=1e-9)
        # constraint scaling shifts the closed form too
        assert optimal_gamma(fam, one_hot, scale=2.5) == pytest.approx(
            fam.goal_optimum(g, scale=2.5), abs=1e-9)


# ---------------------------------------------------------------------------
# scalar optimizer


def test_golden_section_interior_and_boundary():
    assert golden_section_max(lambda x: -(x - 0.3) ** 2, 0.0, 1.0) == \
        pytest.approx(0.3, abs=1e-9)
    assert golden_section_max(lambda x: x, 0.0, 1.0) == pytest.approx(1.0, abs=1e-6)
    assert golden_section_max(lambda x: -x, 0.0, 1.0) == pytest.approx(0.0, abs=1e-6)


def test_optimal_gamma_matches_fine_grid_on_random_families():
    rng = np.random.default_rng(17)
    fine = np.linspace(0.0, 1.0, 200_001)
    for _ in range(25):
        n = int(rng.integers(2, 6))
        fam = QuadraticFamily(optima=rng.uniform(0.05, 0.95, n),
                              curvatures=rng.uniform(0.5, 3.0, n),
                              constraints=rng.uniform(0.0, 1.0, n))
        belief = rng.dirichlet(np.ones(n))
        util = belief @ fam.utility_matrix(fine)
        brute = fine[int(np.argmax(util))]
        found = optimal_gamma(fam, belief)
        assert abs(found - brute) < 1e-5
        # in value the refinement can only improve on the brute grid
        eu = lambda x: float(belief @ fam.utility_matrix(np.array([x]))[:, 0])
        assert eu(found) >= eu(brute) - 1e-12


def test_optimal_gamma_input_validation():
    fam = symmetric_pair()
    with pytest.raises(ValueError, match="belief must have shape"):
        optimal_gamma(fam, np.array([1.0, 0.0, 0.0]))
    bad = QuadraticFamily(optima=np.array([np.inf, 0.5]),
                          curvatures=np.ones(2), constraints=np.zeros(2))
    with pytest.raises(ValueError, match="non-finite expected utility at gamma="):
        optimal_gamma(bad, np.array([0.5, 0.5]))


# ---------------------------------------------------------------------------
# belief parameterization


def test_certainty_belief_endpoints_and_entropy():
    assert np.allclose(certainty_belief(0.0, 4), 0.25)
    p = certainty_belief(1.0, 4, true_goal=2)
    assert p[2] == 1.0 and p.sum() == pytest.approx(1.0)
    with pytest.raises(ValueError, match="certainty level"):
        certainty_belief(1.2, 3)
    lams = np.linspace(0.0, 1.0, 21)
    ents = [belief_entropy(certainty_belief(l, 3)) for l in lams]
    assert ents[0] == pytest.approx(math.log(3))
    assert ents[-1] == 0.0
    assert all(a > b for a, b in zip(ents, ents[1:]))


def test_map_goal_tie_breaks_low():
    assert map_goal(np.array([0.4, 0.4, 0.2])) == 0
    assert map_goal(np.array([0.1, 0.5, 0.4])) == 1


# ---------------------------------------------------------------------------
# regret decomposition


def test_regret_fixture_symmetric_pair():
    sample = regret_pair(symmetric_pair(), np.array([0.5, 0.5]))
    # MAP ties to goal 0 and commits to 0.2; the integrated optimum is the
    # midpoint 0.5; regrets follow from the unit curvatures
    assert sample.r_map == pytest.approx(0.18, abs=1e-9)
    assert sample.r_int == pytest.approx(0.09, abs=1e-9)
    assert sample.gap == pytest.approx(0.09, abs=1e-9)
    assert sample.optima_spread == pytest.approx(0.6, abs=1e-9)
    assert sample.identity_residual <= 1e-9


def test_regret_vanishes_for_coincident_optima():
    fam = QuadraticFamily(optima=np.full(3, 0.55),
                          curvatures=np.array([1.0, 2.0, 0.7]),
                          constraints=np.zeros(3))
    sample = regret_pair(fam, np.array([0.3, 0.3, 0.4]))
    assert abs(sample.gap) <= 1e-12
    assert sample.r_map <= 1e-12 and sample.r_int <= 1e-12


def test_regret_point_mass_belief_is_free():
    fam = default_quadratic_family()
    one_hot = np.array([0.0, 1.0, 0.0])
    sample = regret_pair(fam, one_hot)
    assert sample.r_int == pytest.approx(0.0, abs=1e-12)
    assert sample.r_map == pytest.approx(0.0, abs=1e-12)  # MAP is that goal


def test_regret_gap_scales_with_dispersion():
    # same curvature, widening optima: the committed controller's penalty
    # grows quadratically in the spread under a fixed even belief
    gaps = []
    for spread in (0.1, 0.2, 0.4):
        fam = QuadraticFamily(optima=np.array([0.5 - spread / 2, 0.5 + spread / 2]),
                              curvatures=np.ones(2), constraints=np.zeros(2))
        gaps.append(regret_pair(fam, np.array([0.5, 0.5])).gap)
    assert gaps[1] == pytest.approx(4.0 * gaps[0], rel=1e-6)
    assert gaps[2] == pytest.approx(16.0 * gaps[0], rel=1e-6)


# ---------------------------------------------------------------------------
# the two sweeps


def test_assumption_checks_pass_on_both_defaults():
    for fam in (default_quadratic_family(), default_progress_family()):
        rep = check_assumptions(fam)
        assert rep.all_met, (fam.name, rep)
        assert rep.max_convexity <= 1e-8


def test_uncertainty_sweep_passes_for_both_families():
    for fam in (default_quadratic_family(), default_progress_family()):
        rep = verify_theorem1(fam)
        assert rep.status == "passed"
        assert not rep.violations
        assert len(rep.lambdas) == 51
        diffs = np.diff(rep.gamma_star)
        assert np.all(diffs >= -1e-9)
        assert rep.gamma_star[-1] > rep.gamma_star[0]  # sweep actually moves
        cons = np.diff(rep.gamma_star_constraint)
        assert np.all(cons >= -1e-9)
        assert rep.gamma_star_constraint[-1] > rep.gamma_star_constraint[0]


def test_uncertainty_sweep_gates_on_assumptions():
    # convex utility (negative curvature is rejected by the constructor, so
    # build concavity failure through a constraint large enough to flip the
    # progress family's second derivative) -- instead use a quadratic with
    # huge constraint pull and an optimum above one: the efficiency margin
    # check fails rather than monotonicity being asserted blindly.
    fam = QuadraticFamily(optima=np.array([0.1, 0.9]),
                          curvatures=np.array([0.5, 0.5]),
                          constraints=np.array([8.0, 0.0]))
    rep = verify_theorem1(fam, true_goal=1)
    assert rep.status in ("passed", "assumptions_unmet")
    if rep.status == "assumptions_unmet":
        assert not rep.assumptions.all_met


def test_regret_sweep_at_reduced_size():
    rep = verify_theorem2(60, seed=5)
    assert rep.passed
    assert rep.n_samples == 60 and len(rep.samples) == 60
    assert rep.n_regret_violations == 0
    assert rep.max_identity_residual <= 1e-9
    assert all(s.gap >= -1e-9 for s in rep.samples)
    sizes = {s.n_goals for s in rep.samples}
    assert sizes == {2, 3, 4, 5}
    # dispersion split: wide-spread samples should carry the bigger gaps
    spreads = np.array([s.optima_spread for s in rep.samples])
    gaps = np.array([s.gap for s in rep.samples])
    med = np.median(spreads)
    assert gaps[spreads > med].mean() > gaps[spreads <= med].mean()


def test_regret_sweep_is_seeded():
    a = verify_theorem2(20, seed=9)
    b = verify_theorem2(20, seed=9)
    assert [s.gap for s in a.samples] == [s.gap for s in b.samples]


# ---------------------------------------------------------------------------
# report serialization


def test_report_dicts_round_numbers():
    rep1 = verify_theorem1(default_quadratic_family())
    d1 = theorem1_report_dict(rep1)
    assert d1["status"] == "passed"
    assert len(d1["gamma_star"]) == 51
    assert isinstance(d1["assumptions"]["concave"], bool)
    rep2 = verify_theorem2(25, seed=1)
    d2 = theorem2_report_dict(rep2)
    assert d2["passed"] is True
    assert len(d2["samples"]["gap"]) == 25
    json.dumps(d1), json.dumps(d2)  # JSON-safe end to end


def test_verification_report_file_is_reproducible(tmp_path):
    rep1 = [verify_theorem1(default_quadratic_family())]
    rep2 = verify_theorem2(25, seed=1)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    write_verification_report(p1, rep1, rep2)
    write_verification_report(p2, [verify_theorem1(default_quadratic_family())],
                              verify_theorem2(25, seed=1))
    assert p1.read_bytes() == p2.read_bytes()  # timings stay out of the file
    doc = json.loads(p1.read_text())
    assert "elapsed_s" not in doc["theorem2"]
    assert all("elapsed_s" not in r for r in doc["theorem1"])
    assert doc["theorem2"]["passed"] is True
