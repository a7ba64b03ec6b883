"""Minimal differentiable stack: fully-connected nets with hand-written
backprop, the dual-head actor-critic producing the blending weight and a
state value, adaptive-moment optimization with cosine learning-rate decay,
and a deterministic binary checkpoint container.

Everything is float64 numpy; no autograd framework. Gradients are exact and
verified against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

GAMMA_EPS = 1e-12  # keeps the rescaled blend weight inside the open interval

_ACTIVATIONS = ("relu", "tanh", "identity")


class ShapeError(ValueError):
    def __init__(self, expected, got):
        super().__init__(f"input width mismatch: expected {expected}, got {got}")
        self.expected = expected
        self.got = got


@dataclass
class Mlp:
    weights: list  # [(out, in) arrays]
    biases: list   # [(out,) arrays]
    activations: list  # one of _ACTIVATIONS per layer

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ValueError("layer list lengths differ")
        for act in self.activations:
            if act not in _ACTIVATIONS:
                raise ValueError(f"unknown activation: {act}")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]


def mlp_init(sizes: list[int], activations: list[str],
             rng: np.random.Generator) -> Mlp:
    """Uniform fan-in initialization: U(-1/sqrt(n_in), 1/sqrt(n_in))."""
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, (n_out, n_in)))
        biases.append(rng.uniform(-bound, bound, n_out))
    return Mlp(weights=weights, biases=biases, activations=list(activations))


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def mlp_forward(mlp: Mlp, x: np.ndarray) -> tuple[np.ndarray, list]:
    """x: (B, in) -> (B, out) plus per-layer cache of (input, pre-activation)."""
    if x.ndim != 2 or x.shape[1] != mlp.input_dim:
        raise ShapeError(mlp.input_dim, x.shape)
    cache = []
    out = x
    for w, b, act in zip(mlp.weights, mlp.biases, mlp.activations):
        z = out @ w.T + b
        cache.append((out, z))
        out = _act(act, z)
    return out, cache


def mlp_backward(mlp: Mlp, cache: list, d_out: np.ndarray,
                 from_preactivation: bool = False) -> tuple[list, np.ndarray]:
    """Backprop d_out (B, out) through the net; returns ([(dW, db)], dx).

    from_preactivation treats d_out as the gradient at the final layer's
    pre-activation (used when a loss depends on the raw head output rather
    than its squashed value).
    """
    grads = [None] * len(mlp.weights)
    delta = d_out
    for i in range(len(mlp.weights) - 1, -1, -1):
        inp, z = cache[i]
        if i == len(mlp.weights) - 1 and from_preactivation:
            dz = delta
        else:
            dz = delta * _act_grad(mlp.activations[i], z)
        grads[i] = (dz.T @ inp, dz.sum(axis=0))
        delta = dz @ mlp.weights[i]
    return grads, delta


@dataclass
class PolicyNet:
    """Shared trunk with an actor head (one tanh unit -> blend weight) and a
    critic head (one linear unit -> state value)."""
    trunk: Mlp
    actor: Mlp
    critic: Mlp
    log_std: np.ndarray  # shape (1,): shared exploration scale, learnable

    @property
    def input_dim(self) -> int:
        return self.trunk.input_dim


def policy_init(input_dim: int = 14, hidden: int = 256, seed: int = 0,
                log_std_init: float = -1.0) -> PolicyNet:
    rng = np.random.default_rng([seed, 271828])
    return PolicyNet(
        trunk=mlp_init([input_dim, hidden, hidden], ["relu", "relu"], rng),
        actor=mlp_init([hidden, 1], ["tanh"], rng),
        critic=mlp_init([hidden, 1], ["identity"], rng),
        log_std=np.array([log_std_init]),
    )


@dataclass
class ForwardCache:
    net_id: int
    batch: int
    trunk: list
    actor: list
    critic: list
    actor_pre: np.ndarray  # (B,) raw actor unit before tanh


def policy_forward(net: PolicyNet, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, ForwardCache]:
    """x: (B, input_dim) or (input_dim,) -> (gamma (B,), value (B,), cache)."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    feats, trunk_cache = mlp_forward(net.trunk, x)
    actor_out, actor_cache = mlp_forward(net.actor, feats)
    value, critic_cache = mlp_forward(net.critic, feats)
    gamma = np.clip((actor_out[:, 0] + 1.0) / 2.0, GAMMA_EPS, 1.0 - GAMMA_EPS)
    cache = ForwardCache(net_id=id(net), batch=x.shape[0], trunk=trunk_cache,
                         actor=actor_cache, critic=critic_cache,
                         actor_pre=actor_cache[-1][1][:, 0])
    return gamma, value[:, 0], cache


def _check_cache(net: PolicyNet, cache: ForwardCache, upstream: np.ndarray) -> None:
    if cache.net_id != id(net):
        raise ValueError("stale cache: produced by a different network instance")
    if upstream.shape != (cache.batch,):
        raise ValueError(f"upstream gradient shape {upstream.shape} does not "
                         f"match cached batch {cache.batch}")


def _assemble(net: PolicyNet, cache: ForwardCache, d_actor: np.ndarray,
              d_value: np.ndarray, actor_from_pre: bool) -> dict:
    actor_grads, d_feat_a = mlp_backward(net.actor, cache.actor, d_actor[:, None],
                                         from_preactivation=actor_from_pre)
    critic_grads, d_feat_c = mlp_backward(net.critic, cache.critic, d_value[:, None])
    trunk_grads, _ = mlp_backward(net.trunk, cache.trunk, d_feat_a + d_feat_c)
    out: dict[str, np.ndarray] = {}
    for name, grads in (("trunk", trunk_grads), ("actor", actor_grads),
                        ("critic", critic_grads)):
        for i, (dw, db) in enumerate(grads):
            out[f"{name}.W{i}"] = dw
            out[f"{name}.b{i}"] = db
    out["log_std"] = np.zeros(1)
    return out


def policy_backward(net: PolicyNet, cache: ForwardCache, d_gamma: np.ndarray,
                    d_value: np.ndarray) -> dict:
    """Gradients of sum_b d_gamma[b]*gamma[b] + d_value[b]*value[b]."""
    d_gamma = np.atleast_1d(np.asarray(d_gamma, dtype=float))
    d_value = np.atleast_1d(np.asarray(d_value, dtype=float))
    _check_cache(net, cache, d_gamma)
    # gamma = (tanh_out + 1)/2; the tanh derivative itself lives in the Mlp.
    return _assemble(net, cache, d_gamma * 0.5, d_value, actor_from_pre=False)


def policy_backward_pretanh(net: PolicyNet, cache: ForwardCache, d_mu: np.ndarray,
                            d_value: np.ndarray) -> dict:
    """Same plumbing, but d_mu applies at the actor unit before tanh (the
    exploration distribution is Gaussian in that raw output)."""
    d_mu = np.atleast_1d(np.asarray(d_mu, dtype=float))
    d_value = np.atleast_1d(np.asarray(d_value, dtype=float))
    _check_cache(net, cache, d_mu)
    return _assemble(net, cache, d_mu, d_value, actor_from_pre=True)


def gamma_from_pretanh(z: np.ndarray) -> np.ndarray:
    return np.clip((np.tanh(z) + 1.0) / 2.0, GAMMA_EPS, 1.0 - GAMMA_EPS)


def gaussian_log_prob(z: np.ndarray, mu: np.ndarray, log_std: float) -> np.ndarray:
    sigma = math.exp(log_std)
    return -0.5 * ((z - mu) / sigma) ** 2 - log_std - 0.5 * math.log(2.0 * math.pi)


def sample_action(net: PolicyNet, x: np.ndarray,
                  rng: np.random.Generator) -> tuple[float, float, float, float]:
    """Draw an exploratory blend weight: Gaussian noise on the pre-tanh actor
    output. Returns (gamma, z, log_prob, value)."""
    _, value, cache = policy_forward(net, x)
    mu = cache.actor_pre[0]
    z = mu + math.exp(float(net.log_std[0])) * rng.standard_normal()
    logp = float(gaussian_log_prob(np.array([z]), np.array([mu]),
                                   float(net.log_std[0]))[0])
    return float(gamma_from_pretanh(np.array([z]))[0]), float(z), logp, float(value[0])


def policy_params(net: PolicyNet) -> dict:
    """Live references to every parameter array, keyed like the gradients."""
    out: dict[str, np.ndarray] = {}
    for name, mlp in (("trunk", net.trunk), ("actor", net.actor), ("critic", net.critic)):
        for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
            out[f"{name}.W{i}"] = w
            out[f"{name}.b{i}"] = b
    out["log_std"] = net.log_std
    return out


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scales all gradients by a common factor so the joint norm is at most
    max_norm; direction is preserved."""
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class OptimState:
    m: dict
    v: dict
    step: int
    base_lr: float
    total_steps: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    c_clip: float | None = None
    skipped: int = 0


def adam_init(params: dict, base_lr: float, total_steps: int,
              c_clip: float | None = None) -> OptimState:
    return OptimState(m={k: np.zeros_like(p) for k, p in params.items()},
                      v={k: np.zeros_like(p) for k, p in params.items()},
                      step=0, base_lr=base_lr, total_steps=max(1, total_steps),
                      c_clip=c_clip)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    frac = min(max(step, 0), total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


def optimizer_step(params: dict, grads: dict, opt: OptimState) -> dict:
    """In-place adaptive-moment update. Non-finite gradients skip the whole
    step and raise a flag in the returned info dict."""
    if set(params) != set(grads):
        raise ValueError("parameter/gradient key mismatch")
    if any(not np.all(np.isfinite(g)) for g in grads.values()):
        opt.skipped += 1
        return {"skipped": True, "lr": 0.0, "grad_norm": math.nan, "clipped": False}

    clipped = False
    norm = global_norm(grads)
    if opt.c_clip is not None and norm > opt.c_clip:
        grads, _ = clip_by_global_norm(grads, opt.c_clip)
        clipped = True

    lr = cosine_lr(opt.base_lr, opt.step, opt.total_steps)
    opt.step += 1
    t = opt.step
    for k, p in params.items():
        g = grads[k]
        opt.m[k] = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        opt.v[k] = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[k] / (1.0 - opt.beta1 ** t)
        v_hat = opt.v[k] / (1.0 - opt.beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return {"skipped": False, "lr": lr, "grad_norm": norm, "clipped": clipped}


# --- checkpoint container ---------------------------------------------------
#
# Layout: magic, 8-byte little-endian header length, JSON header (sorted keys),
# then each array's raw C-order little-endian bytes at the recorded offsets.
# No timestamps or environment-dependent fields: identical inputs produce
# byte-identical files.

CHECKPOINT_MAGIC = b"BRACECHK1\n"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for key in sorted(arrays):
        arr = np.ascontiguousarray(arrays[key])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes()
        entries.append({"key": key, "dtype": arr.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {"version": CHECKPOINT_VERSION, "arrays": entries, "meta": meta or {}}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        (head_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(head_len).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version: {header.get('version')}")
        body = fh.read()
    arrays = {}
    for ent in header["arrays"]:
        raw = body[ent["offset"]:ent["offset"] + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise ValueError(f"truncated checkpoint: array {ent['key']}")
        arrays[ent["key"]] = np.frombuffer(raw, dtype=np.dtype(ent["dtype"])) \
            .reshape(ent["shape"]).copy()
    return arrays, header["meta"]


def policy_to_arrays(net: PolicyNet, prefix: str = "net.") -> dict:
    return {prefix + k: v.copy() for k, v in policy_params(net).items()}


def policy_from_arrays(arrays: dict, prefix: str = "net.") -> PolicyNet:
    """Rebuilds the actor-critic from checkpoint arrays; the activation
    scheme is fixed by construction, so shapes alone are sufficient."""
    def collect(name: str, activations: list[str]) -> Mlp:
        weights, biases = [], []
        i = 0
        while f"{prefix}{name}.W{i}" in arrays:
            weights.append(arrays[f"{prefix}{name}.W{i}"].copy())
            biases.append(arrays[f"{prefix}{name}.b{i}"].copy())
            i += 1
        if not weights:
            raise ValueError(f"checkpoint missing arrays for {name!r}")
        return Mlp(weights=weights, biases=biases, activations=activations[:len(weights)])

    trunk = collect("trunk", ["relu"] * 8)
    actor = collect("actor", ["tanh"])
    critic = collect("critic", ["identity"])
    return PolicyNet(trunk=trunk, actor=actor, critic=critic,
                     log_std=arrays[prefix + "log_std"].copy())


def optimizer_to_arrays(opt: OptimState, prefix: str = "opt.") -> dict:
    out = {prefix + "m." + k: v.copy() for k, v in opt.m.items()}
    out.update({prefix + "v." + k: v.copy() for k, v in opt.v.items()})
    return out


def rng_state_json(rng: np.random.Generator) -> dict:
    """PCG64 state as plain JSON-able ints."""
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {"state": int(st["state"]["state"]), "inc": int(st["state"]["inc"])},
            "has_uint32": int(st["has_uint32"]), "uinteger": int(st["uinteger"])}


def rng_from_state(state: dict) -> np.random.Generator:
    if state.get("bit_generator") != "PCG64":
        raise ValueError(f"unsupported bit generator: {state.get('bit_generator')}")
    bg = np.random.PCG64()
    bg.state = {"bit_generator": "PCG64",
                "state": {"state": int(state["state"]["state"]),
                          "inc": int(state["state"]["inc"])},
                "has_uint32": int(state["has_uint32"]),
                "uinteger": int(state["uinteger"])}
    return np.random.Generator(bg)
