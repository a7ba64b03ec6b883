"""Live human-in-the-loop session host.

A session owns one environment, one belief filter, and (for the assisted
condition) one trained policy.  The loop is lockstep: every tick consumes the
latest input frame (zero-order hold when none arrived), updates the belief,
picks gamma per the configured condition, advances the environment, and
streams a state frame back.  All trial state advances only from (seed, frame
stream), so replaying a recorded input stream byte-for-byte reproduces the
outbound frames; wall-clock time only paces the live loop.

Transport is a bidirectional socket upgraded from a plain HTTP request
(RFC 6455 text frames, implemented here directly on the stdlib socket --
text messages are length-delimited by the frame header and carry one JSON
object each).  The first outbound message is a versioned handshake echoing
the session config.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import socket
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import belief as bel
from .env import DEFAULT_ENV, EnvConfig, generate_environment, nearest_obstacle_edge, path_efficiency, step
from .evalbench import _accuracy_at, _none_if_nan, _quartile_means, load_policy_bundle
from .expert import ExpertConfig, expert_action, make_memory
from .neural import PolicyNet, policy_forward
from .trainer import policy_input

PROTOCOL_VERSION = 1
STALE_SECONDS = 2.0           # inputs older than this freeze assistance at 0
TAIL_POINTS = 40
SESSION_CONDITIONS = ("no_assist", "manual_gamma", "brace")


@dataclass(frozen=True)
class SessionConfig:
    tick_rate: float = 30.0
    seed: int = 0
    stage: int = 4
    condition: str = "brace"
    checkpoint: str | None = None
    participant: str = "anon"
    collision_limit: int = 1      # strict by default, matching the eval suites
    expert: ExpertConfig = field(default_factory=ExpertConfig)

    def __post_init__(self) -> None:
        if not 10.0 <= self.tick_rate <= 60.0:
            raise ValueError(f"tick_rate must lie in [10, 60] Hz, got {self.tick_rate}")
        if self.condition not in SESSION_CONDITIONS:
            raise ValueError(f"unknown session condition: {self.condition}")
        if self.condition == "brace" and self.checkpoint is None:
            raise ValueError("brace condition requires a checkpoint")

    @property
    def stale_ticks(self) -> int:
        return int(math.ceil(STALE_SECONDS * self.tick_rate))


def clamp_frame_in(payload: dict) -> dict:
    """Normalize a client frame: components clamped to [-1, 1], optional
    manual gamma clamped to [0, 1]."""
    raw = payload.get("input", (0.0, 0.0))
    vec = (float(min(max(raw[0], -1.0), 1.0)), float(min(max(raw[1], -1.0), 1.0)))
    out = {"tick": int(payload.get("tick", -1)), "input": vec}
    if payload.get("manual_gamma") is not None:
        out["manual_gamma"] = float(min(max(payload["manual_gamma"], 0.0), 1.0))
    return out


class SessionEngine:
    """Pure lockstep trial state machine; the transport layer feeds it frames.

    Deterministic by construction: no wall-clock reads, staleness counted in
    ticks, all randomness from the environment seed.
    """

    def __init__(self, cfg: SessionConfig, config: EnvConfig = DEFAULT_ENV,
                 net: PolicyNet | None = None,
                 params: bel.InferenceParams | None = None):
        self.cfg = cfg
        self.config = config
        if cfg.condition == "brace" and net is None:
            net, params = load_policy_bundle(cfg.checkpoint)
        self.net = net
        self.params = params or bel.InferenceParams()
        self.state = generate_environment(cfg.seed, cfg.stage, config)
        self.belief = bel.uniform_belief(len(self.state.goals))
        self.memory = make_memory(cfg.seed)
        self.start = tuple(self.state.cursor)
        self.tick = 0
        self.status = "running"
        self.held_input = (0.0, 0.0)
        self.held_gamma = 0.0
        self.ticks_since_input = 0
        self.collisions = 0
        self._cursors = [self.start]
        self._gammas: list[float] = []
        self._entropies: list[float] = []
        self._near: list[bool] = []
        self._map_correct: list[bool] = []
        self._step_lengths: list[float] = []
        self._input_crc = 0
        self.timings: list[dict] = []
        # tick-indexed log of the frame consumed each tick (None = hold);
        # replaying it through a fresh engine reproduces the outbound stream
        self.consumed: list[dict | None] = []

    @property
    def finished(self) -> bool:
        return self.status != "running"

    def _gamma(self, stale: bool, obs_builder: Callable[[], np.ndarray]) -> float:
        if stale or self.cfg.condition == "no_assist":
            return 0.0
        if self.cfg.condition == "manual_gamma":
            return self.held_gamma
        g, _v, _cache = policy_forward(self.net, obs_builder()[None, :])
        return float(g[0])

    def step_tick(self, frame_in: dict | None) -> dict:
        """Advance one tick; returns the outbound frame as a plain dict."""
        if self.finished:
            return self.frame_out(stale=False)
        t_tick = time.perf_counter()

        self.consumed.append(dict(frame_in) if frame_in is not None else None)
        if frame_in is not None:
            frame = clamp_frame_in(frame_in)
            self.held_input = frame["input"]
            if "manual_gamma" in frame:
                self.held_gamma = frame["manual_gamma"]
            self.ticks_since_input = 0
            self._input_crc = zlib.crc32(
                json.dumps(frame, sort_keys=True).encode(), self._input_crc)
        else:
            self.ticks_since_input += 1
        stale = self.ticks_since_input > self.cfg.stale_ticks

        h = (self.held_input[0] * self.config.v_max,
             self.held_input[1] * self.config.v_max)
        t0 = time.perf_counter()
        self.belief = bel.update_belief(
            self.belief, self.state.cursor,
            [tuple(g.position) for g in self.state.goals], h,
            self.params, self.config.v_max)
        t_belief = time.perf_counter() - t0

        t0 = time.perf_counter()
        gamma = self._gamma(stale, lambda: policy_input(
            self.state, h, self.belief, self.config, "full"))
        t_policy = time.perf_counter() - t0

        w = expert_action(self.state, self.state.goals[self.belief.map_goal_id],
                          self.cfg.expert, self.memory, self.config)
        edge = nearest_obstacle_edge(self.state.cursor, self.state.obstacles, self.config)
        next_state, outcome = step(self.state, h, w, gamma, self.config)

        self.tick += 1
        self._gammas.append(gamma)
        self._entropies.append(self.belief.entropy)
        self._near.append(edge < self.config.d_safe)
        self._map_correct.append(self.belief.map_goal_id == self.state.true_goal_id)
        self._step_lengths.append(math.dist(next_state.cursor, self.state.cursor))
        self._cursors.append(tuple(next_state.cursor))
        self.collisions += int(outcome.collision)
        self.state = next_state

        if outcome.reached_goal_id is not None:
            self.status = "success"
        elif self.collisions >= self.cfg.collision_limit:
            self.status = "collision"
        elif self.state.step_index >= self.config.max_steps:
            self.status = "timeout"
        self.timings.append({"belief_ms": t_belief * 1e3, "policy_ms": t_policy * 1e3,
                             "total_ms": (time.perf_counter() - t_tick) * 1e3})
        return self.frame_out(stale)

    def frame_out(self, stale: bool) -> dict:
        probs = [float(p) for p in self.belief.probs]
        return {
            "type": "frame",
            "tick": self.tick,
            "cursor": [float(self.state.cursor[0]), float(self.state.cursor[1])],
            "goals": [{"x": float(g.position[0]), "y": float(g.position[1]),
                       "r": float(g.radius)} for g in self.state.goals],
            "obstacles": [{"x": float(o.position[0]), "y": float(o.position[1]),
                           "r": float(o.radius)} for o in self.state.obstacles],
            "belief": probs,
            "gamma": float(self._gammas[-1]) if self._gammas else 0.0,
            "map_goal_id": int(self.belief.map_goal_id),
            "status": self.status,
            "tail": [[float(x), float(y)] for x, y in self._cursors[-TAIL_POINTS:]],
            "safety_stale": bool(stale),
        }

    def abort(self) -> None:
        if not self.finished:
            self.status = "aborted"

    def record(self) -> dict:
        """Trial record in the batch-evaluation per-episode format."""
        steps = max(len(self._gammas), 1)
        gam = np.asarray(self._gammas) if self._gammas else np.zeros(1)
        near = np.asarray(self._near) if self._near else np.zeros(1, dtype=bool)
        correct = self._map_correct or [False]
        cum = np.cumsum(self._step_lengths) if self._step_lengths else np.zeros(1)
        acc25, acc50, acc75 = _accuracy_at((0.25, 0.50, 0.75), cum, correct)
        ent_q1 = np.array_split(np.asarray(self._entropies or [0.0]), 4)[0]
        true_goal = self.state.goals[self.state.true_goal_id]
        dist_id = math.dist(self.start, true_goal.position)
        return {
            "condition": self.cfg.condition,
            "seed": int(self.cfg.seed),
            "stage": int(self.cfg.stage),
            "n_goals": len(self.state.goals),
            "true_goal": int(self.state.true_goal_id),
            "success": self.status == "success",
            "steps": int(steps),
            "path_efficiency": float(path_efficiency(self._cursors)),
            "throughput": float(math.log2(dist_id / (2.0 * true_goal.radius) + 1.0) / steps),
            "collision_count": int(self.collisions),
            "mean_gamma": float(gam.mean()),
            "mean_gamma_by_quartile": [_none_if_nan(v) for v in _quartile_means(list(gam))],
            "gamma_near_obstacle": _none_if_nan(float(gam[near].mean()) if near.any() else float("nan")),
            "gamma_elsewhere": _none_if_nan(float(gam[~near].mean()) if (~near).any() else float("nan")),
            "entropy_q1_mean": float(ent_q1.mean()) if len(ent_q1) else 0.0,
            "belief_accuracy_at_25pct": acc25,
            "belief_accuracy_at_50pct": acc50,
            "belief_accuracy_at_75pct": acc75,
            "belief_accuracy_mean": float(np.mean(correct)),
            "noise_crc": int(self._input_crc),
            "aborted": self.status == "aborted",
            "participant": self.cfg.participant,
        }


def replay_session(cfg: SessionConfig, frames: Sequence[dict | None],
                   config: EnvConfig = DEFAULT_ENV,
                   net: PolicyNet | None = None,
                   params: bel.InferenceParams | None = None) -> tuple[list[dict], dict]:
    """Offline replay of a tick-indexed input stream (None = no frame that
    tick); returns (outbound frames, trial record)."""
    engine = SessionEngine(cfg, config, net, params)
    out = []
    for frame in frames:
        out.append(engine.step_tick(frame))
        if engine.finished:
            break
    return out, engine.record()


def latency_report(timings: Sequence[dict]) -> dict:
    """Per-tick compute percentiles in milliseconds; informational only."""
    if not timings:
        return {"ticks": 0}
    report: dict = {"ticks": len(timings)}
    for key in ("belief_ms", "policy_ms", "total_ms"):
        vals = np.asarray([t[key] for t in timings])
        report[key] = {
            "p50": float(np.percentile(vals, 50)),
            "p90": float(np.percentile(vals, 90)),
            "p99": float(np.percentile(vals, 99)),
            "max": float(vals.max()),
        }
    return report


# ---------------------------------------------------------------------------
# transport: minimal server side of the socket-upgrade protocol


_UPGRADE_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


def _accept_key(key: str) -> str:
    digest = hashlib.sha1((key + _UPGRADE_GUID).encode()).digest()
    return base64.b64encode(digest).decode()


def _read_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("socket closed")
        buf += chunk
    return buf


def read_message(sock: socket.socket) -> tuple[int, bytes]:
    """Read one frame; returns (opcode, payload).  Client frames are masked."""
    head = _read_exact(sock, 2)
    opcode = head[0] & 0x0F
    masked = bool(head[1] & 0x80)
    length = head[1] & 0x7F
    if length == 126:
        length = struct.unpack(">H", _read_exact(sock, 2))[0]
    elif length == 127:
        length = struct.unpack(">Q", _read_exact(sock, 8))[0]
    mask = _read_exact(sock, 4) if masked else b""
    payload = _read_exact(sock, length) if length else b""
    if masked:
        payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
    return opcode, payload


def write_message(sock: socket.socket, payload: bytes, opcode: int = 0x1) -> None:
    header = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        header += bytes([n])
    elif n < 1 << 16:
        header += bytes([126]) + struct.pack(">H", n)
    else:
        header += bytes([127]) + struct.pack(">Q", n)
    sock.sendall(header + payload)


def _handshake(sock: socket.socket) -> None:
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = sock.recv(4096)
        if not chunk:
            raise ConnectionError("client left during handshake")
        data += chunk
    headers = {}
    for line in data.split(b"\r\n")[1:]:
        if b":" in line:
            k, v = line.split(b":", 1)
            headers[k.strip().lower().decode()] = v.strip().decode()
    key = headers.get("sec-websocket-key")
    if headers.get("upgrade", "").lower() != "websocket" or key is None:
        sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        raise ConnectionError("not an upgrade request")
    sock.sendall(
        b"HTTP/1.1 101 Switching Protocols\r\n"
        b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
        b"Sec-WebSocket-Accept: " + _accept_key(key).encode() + b"\r\n\r\n")


class _Mailbox:
    """Latest-value input slot shared between the reader thread and the loop."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._frame: dict | None = None
        self.closed = False

    def put(self, frame: dict) -> None:
        with self._lock:
            self._frame = frame

    def take(self) -> dict | None:
        with self._lock:
            frame, self._frame = self._frame, None
            return frame


def _reader(sock: socket.socket, mailbox: _Mailbox) -> None:
    try:
        while True:
            opcode, payload = read_message(sock)
            if opcode == 0x8:          # close
                break
            if opcode == 0x9:          # ping -> pong
                write_message(sock, payload, opcode=0xA)
                continue
            if opcode != 0x1:
                continue
            try:
                frame = json.loads(payload.decode())
            except (UnicodeDecodeError, json.JSONDecodeError):
                continue
            if isinstance(frame, dict) and frame.get("type") == "input":
                mailbox.put(frame)
    except (ConnectionError, OSError):
        pass
    finally:
        mailbox.closed = True


def run_session(cfg: SessionConfig, conn: socket.socket,
                config: EnvConfig | None = None,
                record_dir: str | Path | None = None) -> dict:
    """Host one live trial over an upgraded socket; returns the trial record.

    Disconnects mark the trial aborted and keep the partial record.
    """
    config = config if config is not None else DEFAULT_ENV
    _handshake(conn)
    engine = SessionEngine(cfg, config)
    mailbox = _Mailbox()
    reader = threading.Thread(target=_reader, args=(conn, mailbox), daemon=True)
    reader.start()

    hello = {"type": "hello", "version": PROTOCOL_VERSION,
             "config": {"tick_rate": cfg.tick_rate, "seed": cfg.seed,
                        "stage": cfg.stage, "condition": cfg.condition,
                        "participant": cfg.participant,
                        "collision_limit": cfg.collision_limit,
                        "stale_ticks": cfg.stale_ticks}}
    period = 1.0 / cfg.tick_rate
    try:
        write_message(conn, json.dumps(hello, sort_keys=True).encode())
        next_tick = time.monotonic()
        while not engine.finished:
            if mailbox.closed:
                engine.abort()
                break
            frame = engine.step_tick(mailbox.take())
            write_message(conn, json.dumps(frame, sort_keys=True).encode())
            next_tick += period
            delay = next_tick - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        if engine.finished and not mailbox.closed:
            write_message(conn, b"", opcode=0x8)
    except (ConnectionError, OSError):
        engine.abort()

    record = engine.record()
    record["latency"] = latency_report(engine.timings)
    if record_dir is not None:
        out = Path(record_dir)
        out.mkdir(parents=True, exist_ok=True)
        name = f"trial_{cfg.participant}_{cfg.seed}_{int(time.time()*1000)}.json"
        (out / name).write_text(json.dumps(record, indent=2, sort_keys=True))
    return record


def serve(cfg: SessionConfig, port: int, host: str = "127.0.0.1",
          config: EnvConfig | None = None,
          record_dir: str | Path | None = None,
          max_sessions: int | None = None,
          ready: threading.Event | None = None) -> list[dict]:
    """Accept connections one session at a time until max_sessions is reached
    (forever when None).  Each connection gets a fresh engine from the same
    config; records accumulate and are returned."""
    records: list[dict] = []
    server = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    server.bind((host, port))
    server.listen(1)
    if ready is not None:
        ready.set()
    try:
        n = 0
        while max_sessions is None or n < max_sessions:
            conn, _addr = server.accept()
            try:
                records.append(run_session(cfg, conn, config, record_dir))
            finally:
                conn.close()
            n += 1
    finally:
        server.close()
    return records
