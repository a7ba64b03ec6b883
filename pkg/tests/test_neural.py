import math

import numpy as np
import pytest
from scipy import stats

from brace.neural import (CHECKPOINT_MAGIC, GAMMA_EPS, Mlp, OptimState,
                          ShapeError, adam_init, clip_by_global_norm,
                          cosine_lr, gamma_from_pretanh, gaussian_log_prob,
                          global_norm, load_checkpoint, mlp_backward,
                          mlp_forward, mlp_init, optimizer_step,
                          optimizer_to_arrays, policy_backward,
                          policy_backward_pretanh, policy_forward,
                          policy_from_arrays, policy_init, policy_params,
                          policy_to_arrays, rng_from_state, rng_state_json,
                          sample_action, save_checkpoint)


def rel_err(a, b):
    denom = max(abs(a), abs(b), 1e-10)
    return abs(a - b) / denom


def fd_grad(loss_fn, param, idx, h=1e-6):
    """Central difference of a scalar loss wrt one parameter entry."""
    orig = param[idx]
    param[idx] = orig + h
    up = loss_fn()
    param[idx] = orig - h
    down = loss_fn()
    param[idx] = orig
    return (up - down) / (2.0 * h)


def sample_coords(arr, rng, k=6):
    flat = [tuple(ix) for ix in np.ndindex(arr.shape)]
    if len(flat) <= k:
        return flat
    picks = rng.choice(len(flat), size=k, replace=False)
    return [flat[i] for i in picks]


# ---------------------------------------------------------------------------
# mlp layer math


def test_mlp_forward_rejects_wrong_width():
    rng = np.random.default_rng(0)
    net = mlp_init([4, 3], ["tanh"], rng)
    with pytest.raises(ShapeError, match="expected 4"):
        mlp_forward(net, np.zeros((2, 5)))
    with pytest.raises(ShapeError):
        mlp_forward(net, np.zeros(4))  # must be batched


def test_mlp_rejects_unknown_activation():
    with pytest.raises(ValueError, match="unknown activation"):
        Mlp(weights=[np.zeros((2, 2))], biases=[np.zeros(2)],
            activations=["sigmoid"])


@pytest.mark.parametrize("acts", [["relu", "identity"], ["tanh", "tanh"],
                                  ["identity", "relu"]])
def test_mlp_gradcheck_all_activations(acts):
    rng = np.random.default_rng(hash(tuple(acts)) % 2**32)
    net = mlp_init([5, 7, 3], acts, rng)
    x = rng.normal(size=(4, 5))
    coeff = rng.normal(size=(4, 3))

    def loss():
        out, _ = mlp_forward(net, x)
        return float(np.sum(coeff * out))

    out, cache = mlp_forward(net, x)
    grads, dx = mlp_backward(net, cache, coeff)
    worst = 0.0
    for layer, (dw, db) in enumerate(grads):
        for idx in sample_coords(dw, rng):
            worst = max(worst, rel_err(dw[idx], fd_grad(loss, net.weights[layer], idx)))
        for idx in sample_coords(db, rng):
            worst = max(worst, rel_err(db[idx], fd_grad(loss, net.biases[layer], idx)))
    # input gradient too
    for idx in sample_coords(x, rng):
        worst = max(worst, rel_err(dx[idx], fd_grad(loss, x, idx)))
    assert worst < 1e-6


def test_mlp_backward_from_preactivation_skips_last_nonlinearity():
    rng = np.random.default_rng(3)
    net = mlp_init([3, 4, 2], ["relu", "tanh"], rng)
    x = rng.normal(size=(5, 3))
    _, cache = mlp_forward(net, x)
    coeff = rng.normal(size=(5, 2))

    def loss_pre():
        feats = x
        for w, b, act in zip(net.weights[:-1], net.biases[:-1], net.activations[:-1]):
            feats = np.maximum(feats @ w.T + b, 0.0)
        z = feats @ net.weights[-1].T + net.biases[-1]
        return float(np.sum(coeff * z))

    grads, _ = mlp_backward(net, cache, coeff, from_preactivation=True)
    dw = grads[-1][0]
    for idx in sample_coords(dw, rng):
        assert rel_err(dw[idx], fd_grad(loss_pre, net.weights[-1], idx)) < 1e-6


# ---------------------------------------------------------------------------
# policy heads


def test_policy_forward_shapes_and_range():
    net = policy_init(seed=1)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(6, 14))
    gamma, value, cache = policy_forward(net, x)
    assert gamma.shape == (6,) and value.shape == (6,)
    assert np.all(gamma > 0.0) and np.all(gamma < 1.0)
    # single-row convenience path
    g1, v1, _ = policy_forward(net, x[2])
    assert g1[0] == pytest.approx(gamma[2]) and v1[0] == pytest.approx(value[2])


def test_policy_gradcheck_gamma_and_value_heads():
    # small trunk keeps the finite-difference sweep cheap
    rng = np.random.default_rng(7)
    worst = 0.0
    for trial in range(5):
        net = policy_init(input_dim=6, hidden=16, seed=100 + trial)
        x = rng.normal(size=(3, 6))
        a = rng.normal(size=3)
        b = rng.normal(size=3)

        def loss():
            g, v, _ = policy_forward(net, x)
            return float(np.sum(a * g + b * v))

        _, _, cache = policy_forward(net, x)
        grads = policy_backward(net, cache, a, b)
        params = policy_params(net)
        for key in ("trunk.W0", "trunk.b0", "actor.W0", "actor.b0",
                    "critic.W0", "critic.b0"):
            for idx in sample_coords(grads[key], rng, k=5):
                worst = max(worst, rel_err(grads[key][idx],
                                           fd_grad(loss, params[key], idx)))
    assert worst < 1e-5


def test_policy_gradcheck_pretanh_path():
    rng = np.random.default_rng(11)
    net = policy_init(input_dim=5, hidden=12, seed=42)
    x = rng.normal(size=(4, 5))
    a = rng.normal(size=4)
    b = rng.normal(size=4)

    def loss():
        _, v, cache = policy_forward(net, x)
        return float(np.sum(a * cache.actor_pre + b * v))

    _, _, cache = policy_forward(net, x)
    grads = policy_backward_pretanh(net, cache, a, b)
    params = policy_params(net)
    worst = 0.0
    for key in ("trunk.W0", "actor.W0", "actor.b0", "critic.W0"):
        for idx in sample_coords(grads[key], rng, k=5):
            worst = max(worst, rel_err(grads[key][idx],
                                       fd_grad(loss, params[key], idx)))
    assert worst < 1e-5


def test_backward_rejects_stale_cache():
    net_a = policy_init(input_dim=4, hidden=8, seed=0)
    net_b = policy_init(input_dim=4, hidden=8, seed=1)
    x = np.zeros((2, 4))
    _, _, cache = policy_forward(net_a, x)
    with pytest.raises(ValueError, match="stale cache"):
        policy_backward(net_b, cache, np.ones(2), np.ones(2))
    with pytest.raises(ValueError, match="does not"):
        policy_backward(net_a, cache, np.ones(3), np.ones(3))


def test_log_std_gradient_is_zero_through_backward():
    # backprop covers the deterministic heads; the exploration scale gets its
    # gradient analytically in the ppo loss, so these paths must not touch it
    net = policy_init(input_dim=4, hidden=8, seed=5)
    _, _, cache = policy_forward(net, np.zeros((1, 4)))
    grads = policy_backward(net, cache, np.ones(1), np.ones(1))
    assert grads["log_std"].shape == (1,)
    assert grads["log_std"][0] == 0.0


def test_gamma_from_pretanh_bounds_and_monotonicity():
    z = np.array([-1e9, -3.0, 0.0, 3.0, 1e9])
    g = gamma_from_pretanh(z)
    assert g[0] == GAMMA_EPS and g[-1] == 1.0 - GAMMA_EPS
    assert g[2] == pytest.approx(0.5)
    assert np.all(np.diff(g) >= 0.0)


def test_gaussian_log_prob_matches_reference():
    rng = np.random.default_rng(2)
    z = rng.normal(size=20)
    mu = rng.normal(size=20)
    for log_std in (-1.5, 0.0, 0.7):
        ours = gaussian_log_prob(z, mu, log_std)
        ref = stats.norm.logpdf(z, loc=mu, scale=math.exp(log_std))
        np.testing.assert_allclose(ours, ref, rtol=1e-12)


def test_sample_action_is_rng_deterministic_and_consistent():
    net = policy_init(seed=9)
    x = np.random.default_rng(9).normal(size=14)
    g1, z1, lp1, v1 = sample_action(net, x, np.random.default_rng(123))
    g2, z2, lp2, v2 = sample_action(net, x, np.random.default_rng(123))
    assert (g1, z1, lp1, v1) == (g2, z2, lp2, v2)
    assert g1 == pytest.approx(float(gamma_from_pretanh(np.array([z1]))[0]))
    _, _, cache = policy_forward(net, x)
    mu = cache.actor_pre[0]
    assert lp1 == pytest.approx(float(gaussian_log_prob(
        np.array([z1]), np.array([mu]), float(net.log_std[0]))[0]))


def test_policy_params_are_live_references():
    net = policy_init(input_dim=4, hidden=8, seed=3)
    params = policy_params(net)
    before, _, _ = policy_forward(net, np.ones((1, 4)))
    params["actor.b0"] += 0.5
    after, _, _ = policy_forward(net, np.ones((1, 4)))
    assert after[0] != before[0]


# ---------------------------------------------------------------------------
# optimizer


def test_global_norm_and_clip():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    assert global_norm(grads) == pytest.approx(5.0)
    clipped, norm = clip_by_global_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert global_norm(clipped) == pytest.approx(1.0)
    # direction preserved: componentwise ratio is the common scale
    np.testing.assert_allclose(clipped["a"], grads["a"] / 5.0)
    np.testing.assert_allclose(clipped["b"], grads["b"] / 5.0)
    # under the cap the originals come back untouched
    same, norm2 = clip_by_global_norm(grads, 10.0)
    assert same is grads and norm2 == pytest.approx(5.0)
    zeros, _ = clip_by_global_norm({"a": np.zeros(2)}, 1.0)
    assert np.all(zeros["a"] == 0.0)


def test_cosine_lr_schedule_endpoints():
    assert cosine_lr(0.3, 0, 100) == pytest.approx(0.3)
    assert cosine_lr(0.3, 50, 100) == pytest.approx(0.15)
    assert cosine_lr(0.3, 100, 100) == pytest.approx(0.0, abs=1e-15)
    # clamped outside the schedule
    assert cosine_lr(0.3, -5, 100) == pytest.approx(0.3)
    assert cosine_lr(0.3, 400, 100) == pytest.approx(0.0, abs=1e-15)
    vals = [cosine_lr(1.0, s, 10) for s in range(11)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_optimizer_first_step_moves_against_gradient():
    params = {"w": np.array([1.0, -2.0])}
    opt = adam_init(params, base_lr=0.1, total_steps=10)
    info = optimizer_step(params, {"w": np.array([0.5, -0.25])}, opt)
    assert not info["skipped"] and info["lr"] == pytest.approx(0.1)
    # bias-corrected first step is lr * sign(g) regardless of magnitude
    np.testing.assert_allclose(params["w"], [1.0 - 0.1, -2.0 + 0.1], atol=1e-8)
    assert opt.step == 1


def test_optimizer_descends_a_quadratic():
    params = {"w": np.array([4.0])}
    opt = adam_init(params, base_lr=0.2, total_steps=200)
    for _ in range(200):
        optimizer_step(params, {"w": 2.0 * params["w"]}, opt)
    assert abs(params["w"][0]) < 0.05


def test_optimizer_skips_nonfinite_gradients():
    params = {"w": np.array([1.0])}
    opt = adam_init(params, base_lr=0.1, total_steps=10)
    info = optimizer_step(params, {"w": np.array([math.nan])}, opt)
    assert info["skipped"] and math.isnan(info["grad_norm"])
    assert params["w"][0] == 1.0 and opt.step == 0 and opt.skipped == 1
    # moments untouched, so the next clean step behaves like a first step
    optimizer_step(params, {"w": np.array([1.0])}, opt)
    assert params["w"][0] == pytest.approx(0.9)


def test_optimizer_applies_global_clip_when_configured():
    params = {"w": np.array([0.0, 0.0])}
    opt = adam_init(params, base_lr=0.1, total_steps=10, c_clip=1.0)
    info = optimizer_step(params, {"w": np.array([30.0, 40.0])}, opt)
    assert info["clipped"] and info["grad_norm"] == pytest.approx(50.0)
    unclipped = adam_init({"w": np.zeros(2)}, 0.1, 10)
    info2 = optimizer_step({"w": np.zeros(2)}, {"w": np.array([30.0, 40.0])}, unclipped)
    assert not info2["clipped"]


def test_optimizer_rejects_key_mismatch():
    params = {"w": np.zeros(2)}
    opt = adam_init(params, 0.1, 10)
    with pytest.raises(ValueError, match="key mismatch"):
        optimizer_step(params, {"v": np.zeros(2)}, opt)


# ---------------------------------------------------------------------------
# checkpoint container


def test_checkpoint_roundtrip_and_meta(tmp_path):
    rng = np.random.default_rng(4)
    arrays = {"net.w": rng.normal(size=(3, 5)),
              "opt.m": rng.normal(size=7),
              "phi": np.array([2.0, 1.0, 0.8, 1.2, 0.0, 60.0]),
              "count": np.array([17], dtype=np.int64)}
    path = tmp_path / "ck.bin"
    save_checkpoint(path, arrays, meta={"episode": 12, "stage": 3})
    loaded, meta = load_checkpoint(path)
    assert meta == {"episode": 12, "stage": 3}
    assert set(loaded) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
        assert loaded[k].dtype == arrays[k].dtype


def test_checkpoint_bytes_are_reproducible(tmp_path):
    arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([1, 2, 3])}
    p1, p2 = tmp_path / "one.bin", tmp_path / "two.bin"
    save_checkpoint(p1, arrays, meta={"k": "v"})
    save_checkpoint(p2, dict(reversed(list(arrays.items()))), meta={"k": "v"})
    assert p1.read_bytes() == p2.read_bytes()
    assert p1.read_bytes().startswith(CHECKPOINT_MAGIC)


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    bogus = tmp_path / "bogus.bin"
    bogus.write_bytes(b"NOTACHECKPOINT")
    with pytest.raises(ValueError, match="bad magic"):
        load_checkpoint(bogus)
    good = tmp_path / "good.bin"
    save_checkpoint(good, {"x": np.arange(100.0)})
    clipped = tmp_path / "clipped.bin"
    clipped.write_bytes(good.read_bytes()[:-40])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(clipped)


def test_policy_array_roundtrip_preserves_outputs(tmp_path):
    net = policy_init(input_dim=6, hidden=10, seed=21)
    arrays = policy_to_arrays(net)
    assert all(k.startswith("net.") for k in arrays)
    path = tmp_path / "pol.bin"
    save_checkpoint(path, arrays)
    loaded, _ = load_checkpoint(path)
    rebuilt = policy_from_arrays(loaded)
    x = np.random.default_rng(0).normal(size=(4, 6))
    g0, v0, _ = policy_forward(net, x)
    g1, v1, _ = policy_forward(rebuilt, x)
    np.testing.assert_array_equal(g0, g1)
    np.testing.assert_array_equal(v0, v1)
    assert rebuilt.log_std[0] == net.log_std[0]


def test_policy_from_arrays_requires_every_head():
    net = policy_init(input_dim=4, hidden=8, seed=2)
    arrays = policy_to_arrays(net)
    broken = {k: v for k, v in arrays.items() if not k.startswith("net.critic")}
    with pytest.raises(ValueError, match="missing arrays"):
        policy_from_arrays(broken)


def test_optimizer_to_arrays_covers_both_moments():
    params = {"w": np.zeros(3), "b": np.zeros(1)}
    opt = adam_init(params, 0.1, 10)
    optimizer_step(params, {"w": np.ones(3), "b": np.ones(1)}, opt)
    arrays = optimizer_to_arrays(opt)
    assert set(arrays) == {"opt.m.w", "opt.m.b", "opt.v.w", "opt.v.b"}
    assert arrays["opt.m.w"][0] != 0.0


def test_rng_state_roundtrip_continues_stream():
    rng = np.random.default_rng(77)
    rng.standard_normal(13)  # advance
    snap = rng_state_json(rng)
    assert isinstance(snap["state"]["state"], int)  # JSON-safe, not np ints
    restored = rng_from_state(snap)
    np.testing.assert_array_equal(restored.standard_normal(5),
                                  rng.standard_normal(5))
    with pytest.raises(ValueError, match="unsupported bit generator"):
        rng_from_state({"bit_generator": "MT19937"})
