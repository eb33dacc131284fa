"""Handle solvers: noisy oracle detection, language/affordance grounding, and
the wire protocol for plugging in externally trained detectors.

The language pipeline mirrors the generation side: recover a world anchor for
every confident box, label the anchor layout with the same ordinal scheme the
instruction generator uses, and return the box whose description equals the
query sentence.  Detections carry no part kind, so kind is inferred from bbox
posture (vertical -> door, horizontal -> drawer by default).
"""

from __future__ import annotations

import base64
import json
import socket
import struct
import threading
from dataclasses import dataclass

import numpy as np

from . import camera, instruct, scene

SCORE_THRESHOLD = 0.8
JITTER_SCORE_PENALTY = 0.01  # score lost per px of mean edge jitter
FALSE_SCORE_MAX = 0.6
DETECT_FORMAT = "opend-detect/1"
MAX_FRAME = 1 << 26

DEFAULT_KIND_BY_POSTURE = {scene.VERTICAL: scene.DOOR, scene.HORIZONTAL: scene.DRAWER}


class NoDetection(Exception):
    """The detector produced no boxes at all."""


class NoMatchingBox(Exception):
    """No confident detection matches the instruction."""


class InvalidLayout(Exception):
    """The detected layout cannot be described (label overflow / duplicates)."""


class EmptyMap(Exception):
    pass


class ProtocolError(Exception):
    pass


class DetectTimeout(Exception):
    pass


class InvalidBBox(Exception):
    pass


@dataclass(frozen=True)
class Detection:
    bbox: camera.BBox
    score: float


@dataclass(frozen=True)
class NoiseConfig:
    sigma_px: float = 0.0
    p_miss: float = 0.0
    p_fp: float = 0.0  # expected count of false boxes (Poisson)


def oracle_detect(c: scene.Cabinet, pose: camera.CameraPose, noise: NoiseConfig = NoiseConfig(),
                  seed: int = 0) -> list[Detection]:
    """Project every handle, jitter edges, drop misses, add false boxes."""
    rng = np.random.default_rng([int(seed), 0xDE7])
    hi = pose.resolution - 1e-6
    out: list[Detection] = []
    for part in c.parts:
        jit = rng.normal(0.0, 1.0, 4) * noise.sigma_px
        miss = rng.random() < noise.p_miss
        try:
            bb = camera.project_bbox(pose, part)
        except (camera.BehindCamera, camera.OutsideFrame):
            continue
        if miss:
            continue
        y0, y1 = sorted((bb.y0 + jit[0], bb.y1 + jit[2]))
        z0, z1 = sorted((bb.z0 + jit[1], bb.z1 + jit[3]))
        y0, y1 = float(np.clip(y0, 0.0, hi - 1.0)), float(np.clip(y1, 1.0, hi))
        z0, z1 = float(np.clip(z0, 0.0, hi - 1.0)), float(np.clip(z1, 1.0, hi))
        if y1 - y0 < 0.5:
            y1 = min(hi, y0 + 0.5)
        if z1 - z0 < 0.5:
            z1 = min(hi, z0 + 0.5)
        score = max(0.0, 1.0 - JITTER_SCORE_PENALTY * float(np.mean(np.abs(jit))))
        out.append(Detection(camera.BBox(y0, z0, y1, z1), score))
    for _ in range(int(rng.poisson(noise.p_fp))):
        u0 = float(rng.uniform(0.0, pose.resolution - 24.0))
        v0 = float(rng.uniform(0.0, pose.resolution - 24.0))
        w = float(rng.uniform(4.0, 24.0))
        h = float(rng.uniform(4.0, 24.0))
        out.append(Detection(camera.BBox(u0, v0, u0 + w, v0 + h),
                             float(rng.uniform(0.0, FALSE_SCORE_MAX))))
    return out


def match_language(dets: list[Detection], instruction: str, obs: camera.Observation,
                   kind_by_posture: dict | None = None) -> camera.BBox:
    """Pick the confident box whose generated description equals the instruction."""
    kind_by_posture = kind_by_posture or DEFAULT_KIND_BY_POSTURE
    strong = [d for d in dets if d.score > SCORE_THRESHOLD]
    if not strong:
        raise NoMatchingBox("no detection above the score threshold")
    if len(strong) == 1:
        return strong[0].bbox

    anchored = []
    for d in strong:
        try:
            anchor = camera.recover_world(d.bbox, obs)
        except camera.NoDepth:
            continue
        _, posture = camera.bbox_center_posture(d.bbox)
        anchored.append((d, anchor, kind_by_posture[posture]))
    if not anchored:
        raise NoMatchingBox("no confident detection has usable depth")
    try:
        h_labels = instruct.axis_labels([a[1][1] for a in anchored], scene.HORIZONTAL)
        v_labels = instruct.axis_labels([a[1][2] for a in anchored], scene.VERTICAL)
    except instruct.TooManyPositions as e:
        raise InvalidLayout(str(e)) from e
    descriptions = []
    for (d, _, kind), h_lab, v_lab in zip(anchored, h_labels, v_labels):
        descriptions.append((instruct.normalize(instruct.Instruction(0, v_lab, h_lab, kind).text), d))
    texts = [t for t, _ in descriptions]
    if len(set(texts)) != len(texts):
        raise InvalidLayout("two detections obtained the same description")
    want = instruct.normalize(instruction)
    for text, d in descriptions:
        if text == want:
            return d.bbox
    raise NoMatchingBox(f"no detection matches {instruction!r}")


def ground_affordance(amap: np.ndarray, dets: list[Detection]) -> camera.BBox:
    """Box containing the affordance argmax; falls back to a 9x9 pixel box."""
    amap = np.asarray(amap, dtype=float)
    if amap.size == 0 or float(amap.max()) <= 0.0:
        raise EmptyMap("affordance map has no positive response")
    row, col = np.unravel_index(int(np.argmax(amap)), amap.shape)
    u, v = col + 0.5, row + 0.5
    for d in dets:
        if d.bbox.contains(u, v):
            return d.bbox
    n = amap.shape[1] - 1e-6
    return camera.BBox(float(np.clip(u - 4.5, 0, n)), float(np.clip(v - 4.5, 0, n)),
                       float(np.clip(u + 4.5, 0, n)), float(np.clip(v + 4.5, 0, n)))


# ---------------------------------------------------------------------------
# plugin wire protocol: 4-byte big-endian length + UTF-8 JSON body


def _send_frame(sock: socket.socket, payload: dict) -> None:
    body = json.dumps(payload, sort_keys=True).encode("utf-8")
    sock.sendall(struct.pack(">I", len(body)) + body)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ProtocolError("connection closed mid-frame")
        buf += chunk
    return buf


def _recv_frame(sock: socket.socket) -> dict:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > MAX_FRAME:
        raise ProtocolError(f"frame of {length} bytes exceeds limit")
    try:
        return json.loads(_recv_exact(sock, length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ProtocolError(f"bad frame body: {e}") from e


def observation_payload(obs: camera.Observation, instruction: str) -> dict:
    return {
        "format": DETECT_FORMAT,
        "image": base64.b64encode(camera.rgb_png_bytes(obs)).decode("ascii"),
        "depth": base64.b64encode(camera.depth_raw_bytes(obs)).decode("ascii"),
        "instruction": instruction,
        "camera": camera.camera_to_dict(obs.camera),
    }


def _parse_endpoint(endpoint) -> tuple[str, int]:
    if isinstance(endpoint, tuple):
        return endpoint
    host, _, port = endpoint.rpartition(":")
    return host or "127.0.0.1", int(port)


def external_detect(endpoint, obs: camera.Observation, instruction: str,
                    timeout: float = 5.0) -> camera.BBox:
    host, port = _parse_endpoint(endpoint)
    try:
        with socket.create_connection((host, port), timeout=timeout) as sock:
            sock.settimeout(timeout)
            _send_frame(sock, observation_payload(obs, instruction))
            reply = _recv_frame(sock)
    except socket.timeout as e:
        raise DetectTimeout(f"plugin at {host}:{port} timed out") from e
    except OSError as e:
        raise ProtocolError(f"plugin connection failed: {e}") from e
    if "bbox" not in reply:
        raise ProtocolError(f"reply missing bbox: {reply}")
    bb = reply["bbox"]
    if not (isinstance(bb, list) and len(bb) == 4 and all(isinstance(v, (int, float)) for v in bb)):
        raise InvalidBBox(f"malformed bbox {bb!r}")
    y0, z0, y1, z1 = (float(v) for v in bb)
    n = obs.camera.resolution
    if not (0.0 <= y0 < y1 < n and 0.0 <= z0 < z1 < n):
        raise InvalidBBox(f"bbox {bb} outside frame or degenerate")
    return camera.BBox(y0, z0, y1, z1)


def serve_plugin(handler, host: str = "127.0.0.1", port: int = 0):
    """Run a detector plugin endpoint in a daemon thread.

    `handler(request_dict) -> reply_dict`.  Returns ((host, port), stop_fn);
    handy for tests and for serving real models.
    """
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(8)
    srv.settimeout(0.2)
    stop = threading.Event()

    def loop():
        while not stop.is_set():
            try:
                conn, _ = srv.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with conn:
                try:
                    request = _recv_frame(conn)
                    _send_frame(conn, handler(request))
                except (ProtocolError, OSError):
                    pass
        srv.close()

    thread = threading.Thread(target=loop, daemon=True)
    thread.start()

    def stop_fn():
        stop.set()
        thread.join(timeout=2.0)

    return srv.getsockname(), stop_fn


# ---------------------------------------------------------------------------
# detector objects used by the episode driver


class OracleDetector:
    """Ground-truth-backed detector with configurable degradation."""

    def __init__(self, noise: NoiseConfig = NoiseConfig(), seed: int = 0):
        self.noise = noise
        self.seed = seed

    def locate(self, obs: camera.Observation, instruction: str, cabinet: scene.Cabinet) -> camera.BBox:
        dets = oracle_detect(cabinet, obs.camera, self.noise, self.seed)
        if not dets:
            raise NoDetection("oracle produced no boxes")
        return match_language(dets, instruction, obs)


class PluginDetector:
    """Detector served by an external process over the plugin protocol."""

    def __init__(self, endpoint, timeout: float = 5.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def locate(self, obs: camera.Observation, instruction: str, cabinet=None) -> camera.BBox:
        return external_detect(self.endpoint, obs, instruction, self.timeout)
