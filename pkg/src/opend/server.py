"""Session server: live episodes over newline-delimited JSON, plus log replay.

Each connection is one isolated session stepping its own WorldState through
the exact `executor.step_world` code path the benchmark uses.  Transports:
plain TCP (default) and a minimal WebSocket mode carrying identical message
bodies, so browser clients speak the same protocol.
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import struct
import threading
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import bench, camera, executor, grasp, hands, instruct, scene
from .geometry import quat_from_axis_angle, quat_mul, quat_normalize

RATE_LIMIT_HZ = 60.0
RATE_BURST = 60.0


class LogCorrupt(Exception):
    pass


class SceneMismatch(Exception):
    pass


class ProtocolViolation(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code


def _error(code: str, msg: str) -> dict:
    return {"type": "error", "code": code, "msg": msg}


@dataclass
class _Session:
    dataset: bench.Dataset
    cfg: executor.ExecConfig
    world: Optional[executor.WorldState] = None
    hand_kind: str = ""
    instruction: str = ""
    target_part: int = -1
    dataset_ref: Optional[dict] = None
    assist_final: Optional[np.ndarray] = None
    trace: list = field(default_factory=list)
    initial_hand: Optional[dict] = None
    t0: float = 0.0
    acts: int = 0

    def handle(self, msg: dict) -> list[dict]:
        kind = msg.get("type")
        if kind == "reset":
            return self._reset(msg)
        if kind == "act":
            return self._act(msg)
        if kind == "finish":
            return self._finish()
        raise ProtocolViolation("BAD_MESSAGE", f"unknown message type {kind!r}")

    def _reset(self, msg: dict) -> list[dict]:
        try:
            split = msg["split"]
            index = int(msg["index"])
            hand_kind = msg["hand"]
            seed = int(msg.get("seed", 0))
        except (KeyError, TypeError, ValueError) as e:
            raise ProtocolViolation("BAD_MESSAGE", f"bad reset fields: {e}") from e
        refs = self.dataset.split_instructions(split)
        if not 0 <= index < len(refs):
            raise ProtocolViolation("BAD_INDEX", f"index {index} outside split of {len(refs)}")
        ref = refs[index]
        cab = self.dataset.cabinet(ref.cabinet_id)
        model = hands.hand_spec(hand_kind)
        pose = camera.place_camera(cab, seed * 4 + 1)
        obs = camera.render(pose, cab, seed * 4 + 2)

        cuboid = grasp.HandleCuboid.from_part(cab.part(ref.part_id))
        try:
            plan = grasp.search_grasp(model, cuboid, self.cfg.mu)
            self.assist_final = plan.final_joints
            pregrasp = plan.pregrasp
        except grasp.NoGrasp:
            self.assist_final = hands.curl_joints(model, model.open_rest, np.ones(len(model.fingers)))
            pregrasp = grasp.pregrasp_pose(cuboid, model)
        rng = np.random.default_rng([seed, 0x7E1E])
        spawn_p = pregrasp.p + np.array([-0.3, 0.0, 0.0]) + rng.uniform(-0.05, 0.05, 3)
        hand0 = hands.HandState(spawn_p, pregrasp.r.copy(), model.open_rest.copy())

        self.world = executor.WorldState(cab, model, hand0, None, phase="approach")
        self.hand_kind = hand_kind
        self.instruction = ref.text
        self.target_part = ref.part_id
        self.dataset_ref = {"master_seed": self.dataset.master_seed, "split": split,
                            "index": index, "fingerprint": self.dataset.fingerprint()}
        self.trace = []
        self.initial_hand = executor.hand_state_dict(hand0)
        self.t0 = time.monotonic()
        self.acts = 0
        return [{
            "type": "obs",
            "rgb": base64.b64encode(camera.rgb_png_bytes(obs)).decode("ascii"),
            "depth": base64.b64encode(camera.depth_raw_bytes(obs)).decode("ascii"),
            "instruction": ref.text,
            "camera": camera.camera_to_dict(obs.camera),
            "hand": executor.hand_state_dict(hand0),
            "dof": model.dof,
        }]

    def _pace(self) -> None:
        self.acts += 1
        allowed = (time.monotonic() - self.t0) * RATE_LIMIT_HZ + RATE_BURST
        if self.acts > allowed:
            time.sleep((self.acts - allowed) / RATE_LIMIT_HZ)

    def _act(self, msg: dict) -> list[dict]:
        if self.world is None:
            raise ProtocolViolation("OUT_OF_ORDER", "act before reset")
        self._pace()
        w = self.world
        m = w.hand_model
        try:
            dp = np.asarray(msg.get("dp", [0.0, 0.0, 0.0]), dtype=float).reshape(3)
            dr = np.asarray(msg.get("dr", [0.0, 0.0, 0.0]), dtype=float).reshape(3)
            if "d" in msg:
                d_cmd = np.asarray(msg["d"], dtype=float)
                if d_cmd.shape != (m.dof,):
                    raise ProtocolViolation("BAD_MESSAGE", f"d must have {m.dof} entries")
            else:
                grip = float(msg.get("grip", -1.0))
                s = min(1.0, max(0.0, (grip + 1.0) / 2.0))
                d_cmd = hands.interpolate_joints(m.open_rest, self.assist_final, s)
        except (TypeError, ValueError) as e:
            raise ProtocolViolation("BAD_MESSAGE", f"bad act fields: {e}") from e
        angle = float(np.linalg.norm(dr))
        rot = quat_from_axis_angle(dr, angle) if angle > 1e-12 else np.array([1.0, 0, 0, 0])
        cmd = hands.HandState(w.hand.p + dp, quat_normalize(quat_mul(rot, w.hand.r)), d_cmd)
        w.phase = "pull" if w.attachment is not None else "approach"
        w = executor.step_world(w, cmd, self.cfg)
        w.phase = "pull" if w.attachment is not None else "approach"
        self.world = w
        self.trace.append({
            "t": w.t,
            "phase": w.phase,
            "p": [float(v) for v in w.hand.p],
            "r": [float(v) for v in w.hand.r],
            "d": [float(v) for v in w.hand.d],
            "joints": [float(p.joint.value) for p in w.cabinet.parts],
            "attached": -1 if w.attachment is None else w.attachment.part_id,
        })
        _, ratio = executor.check_success(w.cabinet, self.target_part)
        return [{
            "type": "state",
            "hand": executor.hand_state_dict(w.hand),
            "joints": [float(p.joint.value) for p in w.cabinet.parts],
            "open_ratio": ratio,
            "attached": w.attachment is not None,
            "phase": w.phase,
        }]

    def _finish(self) -> list[dict]:
        if self.world is None:
            raise ProtocolViolation("OUT_OF_ORDER", "finish before reset")
        w = self.world
        phase_failure = executor.DETACHED if w.detached else executor.NONE
        result = executor._classify(w.cabinet, self.target_part, phase_failure)
        result.trace = self.trace
        result.initial_hand = self.initial_hand
        lines = executor.trajectory_lines(
            scene_with_initial_joints(w.cabinet), result, self.hand_kind,
            self.instruction, mode="teleop", dataset_ref=self.dataset_ref, cfg=self.cfg)
        log_text = "\n".join(lines) + "\n"
        self.world = None
        return [
            {"type": "result", **result.as_dict()},
            {"type": "log", "jsonl": base64.b64encode(log_text.encode()).decode("ascii")},
        ]


def scene_with_initial_joints(c: scene.Cabinet) -> scene.Cabinet:
    parts = tuple(scene.Part(p.id, p.kind, scene.Joint(p.joint.kind, p.joint.axis,
                  p.joint.origin, p.joint.limit, 0.0), p.handle, p.face_rect) for p in c.parts)
    return scene.Cabinet(c.id, c.body_dims, c.front_x, parts, c.split)


# ---------------------------------------------------------------------------
# transports


def _ws_handshake(conn: socket.socket) -> bool:
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = conn.recv(4096)
        if not chunk:
            return False
        data += chunk
    key = None
    for line in data.split(b"\r\n"):
        if line.lower().startswith(b"sec-websocket-key:"):
            key = line.split(b":", 1)[1].strip()
    if key is None:
        return False
    accept = base64.b64encode(hashlib.sha1(key + b"258EAFA5-E914-47DA-95CA-C5AB0DC85B11").digest())
    conn.sendall(b"HTTP/1.1 101 Switching Protocols\r\nUpgrade: websocket\r\n"
                 b"Connection: Upgrade\r\nSec-WebSocket-Accept: " + accept + b"\r\n\r\n")
    return True


def _ws_recv(conn: socket.socket) -> Optional[str]:
    head = _recv_exact(conn, 2)
    if head is None:
        return None
    opcode = head[0] & 0x0F
    masked = head[1] & 0x80
    length = head[1] & 0x7F
    if length == 126:
        ext = _recv_exact(conn, 2)
        if ext is None:
            return None
        (length,) = struct.unpack(">H", ext)
    elif length == 127:
        ext = _recv_exact(conn, 8)
        if ext is None:
            return None
        (length,) = struct.unpack(">Q", ext)
    mask = _recv_exact(conn, 4) if masked else b"\x00" * 4
    if mask is None:
        return None
    body = _recv_exact(conn, length)
    if body is None:
        return None
    if masked:
        body = bytes(b ^ mask[i % 4] for i, b in enumerate(body))
    if opcode == 0x8:  # close
        return None
    if opcode != 0x1:
        return ""  # ignore non-text frames
    return body.decode("utf-8")


def _ws_send(conn: socket.socket, text: str) -> None:
    body = text.encode("utf-8")
    if len(body) < 126:
        head = bytes([0x81, len(body)])
    elif len(body) < (1 << 16):
        head = bytes([0x81, 126]) + struct.pack(">H", len(body))
    else:
        head = bytes([0x81, 127]) + struct.pack(">Q", len(body))
    conn.sendall(head + body)


def _recv_exact(conn: socket.socket, n: int) -> Optional[bytes]:
    buf = b""
    while len(buf) < n:
        try:
            chunk = conn.recv(n - len(buf))
        except OSError:
            return None
        if not chunk:
            return None
        buf += chunk
    return buf


class SessionServer:
    """Accepts connections; each connection drives one isolated session."""

    def __init__(self, dataset: bench.Dataset, cfg: executor.ExecConfig = executor.ExecConfig(),
                 host: str = "127.0.0.1", port: int = 0, transport: str = "tcp"):
        if transport not in ("tcp", "ws"):
            raise ValueError(f"unknown transport {transport!r}")
        self.dataset = dataset
        self.cfg = cfg
        self.transport = transport
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(16)
        self._sock.settimeout(0.2)
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def start(self) -> "SessionServer":
        self._thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.is_set():
                time.sleep(0.2)
        except KeyboardInterrupt:
            pass
        finally:
            self.stop()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2.0)

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            threading.Thread(target=self._serve_conn, args=(conn,), daemon=True).start()
        self._sock.close()

    def _serve_conn(self, conn: socket.socket) -> None:
        session = _Session(self.dataset, self.cfg)
        try:
            if self.transport == "ws":
                if not _ws_handshake(conn):
                    return
                recv = lambda: _ws_recv(conn)  # noqa: E731
                send = lambda d: _ws_send(conn, json.dumps(d, sort_keys=True))  # noqa: E731
            else:
                reader = conn.makefile("rb")
                recv = lambda: (lambda ln: ln.decode("utf-8") if ln else None)(reader.readline())  # noqa: E731
                send = lambda d: conn.sendall((json.dumps(d, sort_keys=True) + "\n").encode())  # noqa: E731
            while not self._stop.is_set():
                line = recv()
                if line is None:
                    break
                if not line.strip():
                    continue
                try:
                    msg = json.loads(line)
                    if not isinstance(msg, dict):
                        raise ProtocolViolation("BAD_MESSAGE", "message must be a JSON object")
                    replies = session.handle(msg)
                except ProtocolViolation as e:
                    send(_error(e.code, str(e)))
                    break
                except json.JSONDecodeError as e:
                    send(_error("BAD_MESSAGE", f"invalid JSON: {e.msg}"))
                    break
                for reply in replies:
                    send(reply)
        except (OSError, ValueError):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass


def serve(bind: str, dataset: bench.Dataset, cfg: executor.ExecConfig = executor.ExecConfig(),
          transport: str = "tcp") -> SessionServer:
    host, _, port = bind.rpartition(":")
    server = SessionServer(dataset, cfg, host or "127.0.0.1", int(port), transport)
    return server


# ---------------------------------------------------------------------------
# replay


def replay(log_path, dataset: Optional[bench.Dataset] = None) -> executor.EpisodeResult:
    """Re-execute a trajectory log and verify it reproduces the recorded run."""
    with open(log_path, "r", encoding="utf-8") as f:
        lines = [ln for ln in (l.strip() for l in f) if ln]
    if not lines:
        raise LogCorrupt("empty log")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise LogCorrupt(f"bad header: {e.msg}") from e
    if header.get("format") != executor.TRAJ_FORMAT:
        raise LogCorrupt(f"unsupported log format {header.get('format')!r}")
    ref = header.get("dataset")
    if dataset is not None and ref is not None:
        if ref.get("master_seed") != dataset.master_seed or \
                (ref.get("fingerprint") and ref["fingerprint"] != dataset.fingerprint()):
            raise SceneMismatch(f"log dataset {ref} does not match the provided dataset")
    try:
        footer = json.loads(lines[-1])
    except json.JSONDecodeError as e:
        raise LogCorrupt(f"bad footer: {e.msg}") from e
    if "result" not in footer:
        raise LogCorrupt("log is truncated: no result record")
    recorded = executor.EpisodeResult.from_dict(footer["result"])

    cab = scene.cabinet_from_dict(header["scene"])
    model = hands.hand_spec(header["hand"])
    target = header["target_part"]
    steps = []
    for ln in lines[1:-1]:
        try:
            steps.append(json.loads(ln))
        except json.JSONDecodeError as e:
            raise LogCorrupt(f"bad step record: {e.msg}") from e
    if steps and header.get("initial_hand") is None:
        raise LogCorrupt("log has steps but no initial hand state")

    if steps:
        ih = header["initial_hand"]
        w = executor.WorldState(cab, model,
                                hands.HandState(np.array(ih["p"]), np.array(ih["r"]),
                                                np.array(ih["d"])), None)
        cfg = executor.ExecConfig(**header.get("cfg", {}))
        for rec in steps:
            cmd = hands.HandState(np.array(rec["p"]), np.array(rec["r"]), np.array(rec["d"]))
            w = executor.step_world(w, cmd, cfg)
            joints = [float(p.joint.value) for p in w.cabinet.parts]
            attached = -1 if w.attachment is None else w.attachment.part_id
            if not np.allclose(joints, rec["joints"], atol=1e-12) or attached != rec["attached"]:
                raise LogCorrupt(f"step {rec['t']} diverges on replay")
        cab = w.cabinet
    success, ratio = executor.check_success(cab, target)
    if success != recorded.success or abs(ratio - recorded.open_ratio) > 1e-12:
        raise LogCorrupt("recorded result does not match replayed state")
    return recorded
