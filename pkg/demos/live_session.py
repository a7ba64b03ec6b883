"""Drive a live session over the wire protocol with a scripted client.

Starts the session host on a local port, connects a bare-socket client that
performs the protocol upgrade by hand, and steers straight at whichever goal
the server currently believes in.  Prints the frame stream a browser cockpit
would render.  No checkpoint needed (runs the manual-gamma condition with a
mid-slider value).

Usage: python3 demos/live_session.py [checkpoint.bin]
"""

import base64
import json
import os
import socket
import sys
import threading

import numpy as np

from brace.session import SessionConfig, read_message, serve, write_message

PORT = 8941


def upgrade(port):
    sock = socket.create_connection(("127.0.0.1", port), timeout=10)
    key = base64.b64encode(os.urandom(16)).decode()
    sock.sendall((f"GET / HTTP/1.1\r\nHost: 127.0.0.1:{port}\r\n"
                  f"Upgrade: websocket\r\nConnection: Upgrade\r\n"
                  f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n").encode())
    buf = b""
    while b"\r\n\r\n" not in buf:
        buf += sock.recv(4096)
    assert b"101" in buf.split(b"\r\n", 1)[0], "upgrade refused"
    return sock


def send_masked(sock, obj):
    payload = json.dumps(obj).encode()
    mask = os.urandom(4)
    body = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
    assert len(payload) < 126
    sock.sendall(bytes([0x81, 0x80 | len(payload)]) + mask + body)


def main():
    ckpt = sys.argv[1] if len(sys.argv) > 1 else None
    cfg = SessionConfig(tick_rate=30, seed=77, stage=4,
                        condition="brace" if ckpt else "manual_gamma",
                        checkpoint=ckpt, participant="demo")
    records = []
    ready = threading.Event()
    host = threading.Thread(
        target=lambda: records.extend(serve(cfg, PORT, max_sessions=1, ready=ready)),
        daemon=True)
    host.start()
    ready.wait(5)

    sock = upgrade(PORT)
    _, payload = read_message(sock)
    hello = json.loads(payload)
    print(f"hello: protocol v{hello['version']}  condition={hello['config']['condition']}  "
          f"{hello['config']['tick_rate']:g} Hz")

    while True:
        opcode, payload = read_message(sock)
        if opcode == 0x8:
            break
        frame = json.loads(payload)
        goal = frame["goals"][frame["map_goal_id"]]
        d = np.array([goal["x"], goal["y"]]) - np.array(frame["cursor"])
        u = d / max(np.linalg.norm(d), 1e-9)
        msg = {"type": "input", "tick": frame["tick"], "input": u.tolist()}
        if cfg.condition == "manual_gamma":
            msg["manual_gamma"] = 0.5
        send_masked(sock, msg)
        if frame["tick"] % 15 == 0 or frame["status"] != "running":
            belief = " ".join(f"{p:.2f}" for p in frame["belief"])
            print(f"tick {frame['tick']:>4}  cursor ({frame['cursor'][0]:6.1f},"
                  f"{frame['cursor'][1]:6.1f})  belief [{belief}]  "
                  f"gamma {frame['gamma']:.2f}  {frame['status']}")
        if frame["status"] != "running":
            break
    sock.close()
    host.join(10)
    if records:
        rec = records[0]
        print(f"\ntrial record: success={rec['success']} steps={rec['steps']} "
              f"mean_gamma={rec['mean_gamma']:.2f}")
        print(f"tick compute p50 {rec['latency']['total_ms']['p50']:.2f} ms, "
              f"p99 {rec['latency']['total_ms']['p99']:.2f} ms")


if __name__ == "__main__":
    main()
