import base64
import json
import socket

import numpy as np
import pytest

from opend import bench, executor, grasp, hands, scene, server


@pytest.fixture(scope="module")
def ds():
    quota = bench.DatasetQuota(cabinets_train=2, cabinets_test=3, drawers_train=3,
                               drawers_test=4, doors_train=2, doors_test=2)
    return bench.build_dataset(21, quota)


@pytest.fixture()
def live(ds):
    srv = server.SessionServer(ds, executor.ExecConfig()).start()
    yield srv
    srv.stop()


class Client:
    def __init__(self, address):
        self.sock = socket.create_connection(address, timeout=20)
        self.reader = self.sock.makefile("rb")

    def send(self, msg, replies=1):
        self.sock.sendall((json.dumps(msg) + "\n").encode())
        out = []
        for _ in range(replies):
            line = self.reader.readline()
            if not line:
                break
            out.append(json.loads(line))
        return out

    def close(self):
        self.sock.close()


def _drawer_index(ds, split="test"):
    refs = ds.split_instructions(split)
    for i, r in enumerate(refs):
        if r.kind == scene.DRAWER:
            c = ds.cabinet(r.cabinet_id)
            if c.part(r.part_id).handle.posture == scene.HORIZONTAL:
                return i, r
    raise AssertionError("no drawer in split")


def test_noop_episode_has_zero_ratio_and_no_timeout(live):
    cl = Client(live.address)
    try:
        (obs,) = cl.send({"type": "reset", "split": "test", "index": 0,
                          "hand": "franka", "seed": 1})
        assert obs["type"] == "obs" and obs["instruction"]
        (st,) = cl.send({"type": "act", "dp": [0, 0, 0], "dr": [0, 0, 0], "grip": -1.0})
        assert st["type"] == "state" and st["open_ratio"] == 0.0
        res, log = cl.send({"type": "finish"}, replies=2)
        assert res["type"] == "result"
        assert res["success"] is False and res["open_ratio"] == 0.0
        assert res["failure"] != executor.TIMEOUT
        assert log["type"] == "log"
    finally:
        cl.close()


def test_act_before_reset_is_protocol_error(live):
    cl = Client(live.address)
    try:
        (err,) = cl.send({"type": "act", "dp": [0, 0, 0]})
        assert err["type"] == "error" and err["code"] == "OUT_OF_ORDER"
    finally:
        cl.close()


def test_bad_index_is_rejected(live):
    cl = Client(live.address)
    try:
        (err,) = cl.send({"type": "reset", "split": "test", "index": 999,
                          "hand": "franka", "seed": 0})
        assert err["type"] == "error" and err["code"] == "BAD_INDEX"
    finally:
        cl.close()


def _scripted_drawer_session(cl, ds, index, ref, seed=4):
    """Steer to the ground-truth pregrasp, close, pull; returns (result, log)."""
    (obs,) = cl.send({"type": "reset", "split": "test", "index": index,
                      "hand": "franka", "seed": seed})
    hand_p = np.array(obs["hand"]["p"])
    c = ds.cabinet(ref.cabinet_id)
    model = hands.hand_spec(hands.FRANKA)
    plan = grasp.search_grasp(model, grasp.HandleCuboid.from_part(c.part(ref.part_id)))
    # approach in 40 equal steps
    for k in range(40):
        dp = (plan.pregrasp.p - hand_p) / 40.0
        (st,) = cl.send({"type": "act", "dp": dp.tolist(), "dr": [0, 0, 0], "grip": -1.0})
    # close the grip over 30 steps
    for k in range(1, 31):
        grip = -1.0 + 2.0 * k / 30.0
        (st,) = cl.send({"type": "act", "dp": [0, 0, 0], "dr": [0, 0, 0], "grip": grip})
    assert st["attached"], "scripted session failed to grab the handle"
    # pull for 1.2 m worth of -x travel
    for _ in range(120):
        (st,) = cl.send({"type": "act", "dp": [-0.01, 0, 0], "dr": [0, 0, 0], "grip": 1.0})
    res, log = cl.send({"type": "finish"}, replies=2)
    return res, log


def test_scripted_session_opens_drawer_and_replays(live, ds, tmp_path):
    index, ref = _drawer_index(ds)
    cl = Client(live.address)
    try:
        res, log = _scripted_drawer_session(cl, ds, index, ref)
    finally:
        cl.close()
    assert res["success"] is True
    assert res["open_ratio"] > 0.2
    path = tmp_path / "teleop.traj.jsonl"
    path.write_bytes(base64.b64decode(log["jsonl"]))
    replayed = server.replay(path, ds)
    assert replayed.as_dict() == {k: res[k] for k in
                                  ("success", "open_ratio", "target_part", "opened_part", "failure")}


def test_truncated_log_is_corrupt(live, ds, tmp_path):
    index, ref = _drawer_index(ds)
    cl = Client(live.address)
    try:
        res, log = _scripted_drawer_session(cl, ds, index, ref)
    finally:
        cl.close()
    lines = base64.b64decode(log["jsonl"]).decode().strip().split("\n")
    path = tmp_path / "truncated.traj.jsonl"
    path.write_text("\n".join(lines[:-1]) + "\n")  # drop the result footer
    with pytest.raises(server.LogCorrupt):
        server.replay(path, ds)


def test_log_from_other_dataset_is_scene_mismatch(live, ds, tmp_path):
    index, ref = _drawer_index(ds)
    cl = Client(live.address)
    try:
        res, log = _scripted_drawer_session(cl, ds, index, ref)
    finally:
        cl.close()
    path = tmp_path / "log.traj.jsonl"
    path.write_bytes(base64.b64decode(log["jsonl"]))
    other = bench.build_dataset(99, ds.quota)
    with pytest.raises(server.SceneMismatch):
        server.replay(path, other)


def test_sessions_are_isolated(live):
    a = Client(live.address)
    b = Client(live.address)
    try:
        a.send({"type": "reset", "split": "test", "index": 0, "hand": "franka", "seed": 1})
        b.send({"type": "reset", "split": "test", "index": 1, "hand": "allegro", "seed": 2})
        (sa0,) = a.send({"type": "act", "dp": [0, 0, 0], "dr": [0, 0, 0], "grip": -1.0})
        for _ in range(5):
            b.send({"type": "act", "dp": [-0.05, 0.02, 0.01], "dr": [0, 0, 0.2], "grip": 0.5})
        (sa1,) = a.send({"type": "act", "dp": [0, 0, 0], "dr": [0, 0, 0], "grip": -1.0})
        assert sa1["hand"]["p"] == sa0["hand"]["p"]  # b's motion never leaks into a
        assert len(sa1["hand"]["d"]) == 2
        (sb,) = b.send({"type": "act", "dp": [0, 0, 0], "dr": [0, 0, 0], "grip": 0.5})
        assert len(sb["hand"]["d"]) == 16
    finally:
        a.close()
        b.close()


def test_agent_benchmark_log_replays_identically(tmp_path, ds):
    table = bench.run_benchmark(ds, [hands.FRANKA], bench.DetectorSpec("oracle"),
                                split="test", jobs=1, out_dir=tmp_path)
    trajs = sorted((tmp_path / "trajs").iterdir())
    assert trajs
    for path in trajs:
        footer = json.loads(path.read_text().strip().split("\n")[-1])
        replayed = server.replay(path, ds)
        assert replayed.as_dict() == footer["result"]


# ---------------------------------------------------------------------------
# websocket transport


def _ws_client_send(sock, text):
    body = text.encode()
    mask = b"\x12\x34\x56\x78"
    masked = bytes(b ^ mask[i % 4] for i, b in enumerate(body))
    if len(body) < 126:
        head = bytes([0x81, 0x80 | len(body)])
    else:
        import struct

        head = bytes([0x81, 0x80 | 126]) + struct.pack(">H", len(body))
    sock.sendall(head + mask + masked)


def _ws_client_recv(sock):
    import struct

    head = sock.recv(2)
    length = head[1] & 0x7F
    if length == 126:
        (length,) = struct.unpack(">H", sock.recv(2))
    elif length == 127:
        (length,) = struct.unpack(">Q", sock.recv(8))
    buf = b""
    while len(buf) < length:
        buf += sock.recv(length - len(buf))
    return buf.decode()


def test_websocket_transport_carries_same_messages(ds):
    srv = server.SessionServer(ds, executor.ExecConfig(), transport="ws").start()
    try:
        sock = socket.create_connection(srv.address, timeout=20)
        sock.sendall(b"GET / HTTP/1.1\r\nHost: x\r\nUpgrade: websocket\r\n"
                     b"Connection: Upgrade\r\nSec-WebSocket-Key: dGhlIHNhbXBsZSBub25jZQ==\r\n"
                     b"Sec-WebSocket-Version: 13\r\n\r\n")
        head = b""
        while b"\r\n\r\n" not in head:
            head += sock.recv(1024)
        assert b"101" in head.split(b"\r\n")[0]
        assert b"s3pPLMBiTxaQ9kYGzzhZRbK+xOo=" in head  # RFC 6455 sample accept key
        _ws_client_send(sock, json.dumps({"type": "reset", "split": "test", "index": 0,
                                          "hand": "franka", "seed": 3}))
        obs = json.loads(_ws_client_recv(sock))
        assert obs["type"] == "obs"
        _ws_client_send(sock, json.dumps({"type": "act", "dp": [0, 0, 0],
                                          "dr": [0, 0, 0], "grip": -1.0}))
        st = json.loads(_ws_client_recv(sock))
        assert st["type"] == "state"
        sock.close()
    finally:
        srv.stop()
