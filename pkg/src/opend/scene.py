"""Cabinet scene model: parts, joints, handles, procedural generation, scene files.

Geometry conventions:
  * the cabinet front plane sits at ``x = front_x`` (default 0) and the body
    extends behind it along +x;
  * part front panels protrude ``PANEL_THICKNESS`` in front of that plane;
  * a handle is a cuboid whose *front face center* is the ``Handle.center``
    field; the bar extends ``depth`` back along +x until it meets the panel.

Keeping ``center`` on the grasp-facing surface is what lets depth sensing at
the projected bbox center recover the handle position to millimetres.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .geometry import rotation_about_axis

SCENE_FORMAT = "opend-scene/1"

DOOR = "door"
DRAWER = "drawer"
REVOLUTE = "revolute"
PRISMATIC = "prismatic"
HORIZONTAL = "horizontal"
VERTICAL = "vertical"

PART_KINDS = (DOOR, DRAWER)
JOINT_KINDS = (REVOLUTE, PRISMATIC)
POSTURES = (HORIZONTAL, VERTICAL)

PANEL_THICKNESS = 0.012
DEFAULT_HANDLE_COLOR = (70, 72, 78)
MAX_PARTS = 10


class GenerationFailed(Exception):
    """No valid cabinet within the retry budget."""


class ParseError(Exception):
    def __init__(self, msg: str, field: str = "", line: int = 0):
        super().__init__(msg)
        self.field = field
        self.line = line


@dataclass(frozen=True)
class Handle:
    center: tuple[float, float, float]
    posture: str
    length: float
    thickness: float
    depth: float
    color: tuple[int, int, int] = DEFAULT_HANDLE_COLOR

    def length_axis(self) -> np.ndarray:
        return np.array([0.0, 1.0, 0.0]) if self.posture == HORIZONTAL else np.array([0.0, 0.0, 1.0])

    def thickness_axis(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0]) if self.posture == HORIZONTAL else np.array([0.0, 1.0, 0.0])

    def obb(self) -> tuple[np.ndarray, np.ndarray]:
        """Rest-pose axis-aligned box as (center, half-extents)."""
        c = np.array(self.center) + np.array([self.depth * 0.5, 0.0, 0.0])
        if self.posture == HORIZONTAL:
            half = np.array([self.depth, self.length, self.thickness]) * 0.5
        else:
            half = np.array([self.depth, self.thickness, self.length]) * 0.5
        return c, half


@dataclass(frozen=True)
class Joint:
    kind: str
    axis: tuple[float, float, float]
    origin: tuple[float, float, float]
    limit: float
    value: float = 0.0


@dataclass(frozen=True)
class Part:
    id: int
    kind: str
    joint: Joint
    handle: Handle
    face_rect: tuple[float, float, float, float]  # (y, z, w, h) on the front plane

    @property
    def anchor(self) -> tuple[float, float, float]:
        """Reference position used for spatial labelling: face_rect center."""
        y, z, w, h = self.face_rect
        return (0.0, y + 0.5 * w, z + 0.5 * h)


@dataclass(frozen=True)
class Cabinet:
    id: int
    body_dims: tuple[float, float, float]  # (width, height, depth)
    front_x: float
    parts: tuple[Part, ...]
    split: str = "train"

    def part(self, part_id: int) -> Part:
        for p in self.parts:
            if p.id == part_id:
                return p
        raise KeyError(f"no part {part_id}")


@dataclass(frozen=True)
class Violation:
    code: str
    part_id: int
    detail: str


# ---------------------------------------------------------------------------
# current-pose geometry


def part_motion(part: Part) -> tuple[np.ndarray, np.ndarray]:
    """Rigid motion (R, t) taking rest-pose part geometry to its current pose."""
    j = part.joint
    if j.kind == PRISMATIC:
        return np.eye(3), np.array(j.axis) * j.value
    r = rotation_about_axis(j.axis, j.value)
    o = np.array(j.origin)
    return r, o - r @ o


def handle_center_world(part: Part) -> np.ndarray:
    r, t = part_motion(part)
    return r @ np.array(part.handle.center) + t


def handle_axis_world(part: Part) -> np.ndarray:
    r, _ = part_motion(part)
    return r @ part.handle.length_axis()


def handle_obb_world(part: Part) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Handle cuboid at the current joint value: (center, half, rotation)."""
    c0, half = part.handle.obb()
    r, t = part_motion(part)
    return r @ c0 + t, half, r


def panel_obb_world(part: Part, front_x: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    y, z, w, h = part.face_rect
    c0 = np.array([front_x - 0.5 * PANEL_THICKNESS, y + 0.5 * w, z + 0.5 * h])
    half = np.array([0.5 * PANEL_THICKNESS, 0.5 * w, 0.5 * h])
    r, t = part_motion(part)
    return r @ c0 + t, half, r


def body_obb(c: Cabinet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w, h, d = c.body_dims
    center = np.array([c.front_x + 0.5 * d, 0.0, 0.5 * h])
    return center, np.array([0.5 * d, 0.5 * w, 0.5 * h]), np.eye(3)


def open_ratio(part: Part) -> float:
    """Door ratio theta/180deg, drawer ratio delta/length."""
    j = part.joint
    if part.kind == DOOR:
        return j.value / np.pi
    return j.value / j.limit


def with_joint_value(c: Cabinet, part_id: int, value: float) -> Cabinet:
    parts = tuple(
        replace(p, joint=replace(p.joint, value=value)) if p.id == part_id else p
        for p in c.parts
    )
    return replace(c, parts=parts)


# ---------------------------------------------------------------------------
# validation


def validate_cabinet(c: Cabinet) -> list[Violation]:
    out: list[Violation] = []
    w, h, d = c.body_dims
    if not (1 <= len(c.parts) <= MAX_PARTS):
        out.append(Violation("PartCount", -1, f"{len(c.parts)} parts"))
    if min(w, h, d) <= 0:
        out.append(Violation("BadBodyDims", -1, str(c.body_dims)))
    rects = []
    for p in c.parts:
        j = p.joint
        if p.kind not in PART_KINDS:
            out.append(Violation("BadPartKind", p.id, p.kind))
            continue
        expected = REVOLUTE if p.kind == DOOR else PRISMATIC
        if j.kind != expected:
            out.append(Violation("JointKindMismatch", p.id, f"{p.kind} with {j.kind}"))
        if not (0.0 <= j.value <= j.limit + 1e-12):
            out.append(Violation("JointOutOfRange", p.id, f"value={j.value} limit={j.limit}"))
        axis = np.array(j.axis)
        if p.kind == DOOR and abs(abs(axis[2]) - 1.0) > 1e-9:
            out.append(Violation("BadJointAxis", p.id, "door hinge must be vertical"))
        if p.kind == DRAWER and np.linalg.norm(axis - np.array([-1.0, 0, 0])) > 1e-9:
            out.append(Violation("BadJointAxis", p.id, "drawer axis must be -x"))
        hd = p.handle
        if not (hd.length > hd.thickness > 0.0):
            out.append(Violation("BadHandleDims", p.id, f"length={hd.length} thickness={hd.thickness}"))
        if hd.depth <= 0.0:
            out.append(Violation("BadHandleDims", p.id, f"depth={hd.depth}"))
        if hd.posture not in POSTURES:
            out.append(Violation("BadPosture", p.id, hd.posture))
        if hd.center[0] > c.front_x - 1e-9:
            out.append(Violation("HandleBehindFace", p.id, f"center.x={hd.center[0]}"))
        ry, rz, rw, rh = p.face_rect
        if rw <= 0 or rh <= 0:
            out.append(Violation("BadFaceRect", p.id, str(p.face_rect)))
        if ry < -w / 2 - 1e-9 or ry + rw > w / 2 + 1e-9 or rz < -1e-9 or rz + rh > h + 1e-9:
            out.append(Violation("FaceOutOfBody", p.id, str(p.face_rect)))
        rects.append((p.id, ry, rz, rw, rh))
    for i in range(len(rects)):
        for k in range(i + 1, len(rects)):
            ia, ya, za, wa, ha = rects[i]
            ib, yb, zb, wb, hb = rects[k]
            if ya < yb + wb - 1e-9 and yb < ya + wa - 1e-9 and za < zb + hb - 1e-9 and zb < za + ha - 1e-9:
                out.append(Violation("FaceOverlap", ia, f"parts {ia} and {ib}"))
    return out


# ---------------------------------------------------------------------------
# procedural generation


@dataclass(frozen=True)
class GenerationConstraints:
    n_parts: Optional[int] = None
    kinds: Optional[tuple[str, ...]] = None  # explicit per-part kinds
    grid: Optional[tuple[int, int]] = None  # (rows, cols), each <= 5
    drawer_fraction: float = 0.5
    body_width: tuple[float, float] = (0.4, 1.5)
    body_height: tuple[float, float] = (0.5, 2.0)
    body_depth: tuple[float, float] = (0.25, 0.6)
    handle_length: tuple[float, float] = (0.06, 0.15)
    handle_thickness: tuple[float, float] = (0.01, 0.03)
    handle_depth: tuple[float, float] = (0.02, 0.05)
    posture_flip_prob: float = 0.2
    recolor_palette: bool = False
    max_retries: int = 100

    @staticmethod
    def single(kind: str = DRAWER) -> "GenerationConstraints":
        return GenerationConstraints(n_parts=1, kinds=(kind,), grid=(1, 1))

    @staticmethod
    def grid_mixed(rows: int, cols: int) -> "GenerationConstraints":
        return GenerationConstraints(n_parts=rows * cols, grid=(rows, cols))


MIN_CELL_W = 0.12
MIN_CELL_H = 0.14
FACE_MARGIN = 0.08  # fraction of the cell kept as frame around each part


def _sample_grid(rng, n: int, constraints: GenerationConstraints) -> tuple[int, int]:
    if constraints.grid is not None:
        rows, cols = constraints.grid
        if rows > 5 or cols > 5 or rows * cols < n:
            raise GenerationFailed(f"grid {rows}x{cols} cannot host {n} parts")
        return rows, cols
    cands = [(r, k) for r in range(1, 6) for k in range(1, 6) if r * k >= n]
    cands.sort(key=lambda rc: (rc[0] * rc[1], rc[0]))
    # prefer compact grids but allow sparse ones occasionally
    idx = min(int(rng.integers(0, 3)), len(cands) - 1) if len(cands) > 1 else 0
    return cands[idx]


def _make_part(rng, pid: int, kind: str, cell, front_x: float, body_depth: float,
               constraints: GenerationConstraints) -> Part:
    cy, cz, cw, ch = cell
    my, mz = FACE_MARGIN * cw, FACE_MARGIN * ch
    rect = (cy + my, cz + mz, cw - 2 * my, ch - 2 * mz)
    ry, rz, rw, rh = rect
    center_y, center_z = ry + rw / 2, rz + rh / 2

    posture = HORIZONTAL if kind == DRAWER else VERTICAL
    if rng.random() < constraints.posture_flip_prob:
        posture = VERTICAL if posture == HORIZONTAL else HORIZONTAL

    lo, hi = constraints.handle_length
    max_len = 0.8 * (rw if posture == HORIZONTAL else rh)
    length = float(rng.uniform(lo, max(lo, min(hi, max_len))))
    length = min(length, max_len)
    thickness = float(rng.uniform(*constraints.handle_thickness))
    thickness = min(thickness, 0.8 * length)
    depth = float(rng.uniform(*constraints.handle_depth))
    center = (front_x - PANEL_THICKNESS - depth, center_y, center_z)
    color = DEFAULT_HANDLE_COLOR
    handle = Handle(center, posture, length, thickness, depth, color)

    if kind == DRAWER:
        joint = Joint(PRISMATIC, (-1.0, 0.0, 0.0), (front_x, center_y, center_z),
                      limit=round(body_depth - 0.02, 6))
    else:
        hinge_left = bool(rng.random() < 0.5)
        hinge_y = ry if hinge_left else ry + rw
        axis = (0.0, 0.0, 1.0) if hinge_left else (0.0, 0.0, -1.0)
        joint = Joint(REVOLUTE, axis, (front_x, hinge_y, center_z), limit=float(np.pi))
    return Part(pid, kind, joint, handle, rect)


def _generate_once(rng, cabinet_id: int, constraints: GenerationConstraints, split: str) -> Cabinet:
    if constraints.kinds is not None:
        kinds = list(constraints.kinds)
        n = len(kinds)
    else:
        n = constraints.n_parts if constraints.n_parts is not None else int(rng.integers(1, 7))
        kinds = [DRAWER if rng.random() < constraints.drawer_fraction else DOOR for _ in range(n)]
    rows, cols = _sample_grid(rng, n, constraints)

    wlo, whi = constraints.body_width
    hlo, hhi = constraints.body_height
    width = float(rng.uniform(max(wlo, cols * MIN_CELL_W), max(whi, cols * MIN_CELL_W)))
    height = float(rng.uniform(max(hlo, rows * MIN_CELL_H), max(hhi, rows * MIN_CELL_H)))
    depth = float(rng.uniform(*constraints.body_depth))
    front_x = 0.0

    cell_w, cell_h = width / cols, height / rows
    order = rng.permutation(rows * cols)[:n]
    order.sort()
    parts = []
    for pid, cell_idx in enumerate(order):
        r, k = divmod(int(cell_idx), cols)
        cell = (-width / 2 + k * cell_w, (rows - 1 - r) * cell_h, cell_w, cell_h)
        parts.append(_make_part(rng, pid, kinds[pid], cell, front_x, depth, constraints))
    return Cabinet(cabinet_id, (round(width, 6), round(height, 6), round(depth, 6)),
                   front_x, tuple(parts), split)


def generate_cabinet(seed: int, constraints: GenerationConstraints = GenerationConstraints(),
                     cabinet_id: int = 0, split: str = "train") -> Cabinet:
    """Deterministically generate a cabinet that validates and describes cleanly."""
    from . import instruct  # local import: instruct depends on scene types

    for attempt in range(constraints.max_retries):
        rng = np.random.default_rng([int(seed), attempt])
        try:
            cab = _generate_once(rng, cabinet_id, constraints, split)
        except GenerationFailed:
            raise
        if validate_cabinet(cab):
            continue
        try:
            instruct.describe_parts(cab)
        except instruct.InvalidCabinet:
            continue
        return cab
    raise GenerationFailed(f"no valid cabinet for seed={seed} within {constraints.max_retries} retries")


# ---------------------------------------------------------------------------
# scene files


def cabinet_to_dict(c: Cabinet) -> dict:
    return {
        "format": SCENE_FORMAT,
        "id": c.id,
        "split": c.split,
        "body": {"width": c.body_dims[0], "height": c.body_dims[1], "depth": c.body_dims[2],
                 "front_x": c.front_x},
        "parts": [
            {
                "id": p.id,
                "kind": p.kind,
                "face_rect": list(p.face_rect),
                "joint": {"kind": p.joint.kind, "axis": list(p.joint.axis),
                          "origin": list(p.joint.origin), "limit": p.joint.limit,
                          "value": p.joint.value},
                "handle": {"center": list(p.handle.center), "posture": p.handle.posture,
                           "length": p.handle.length, "thickness": p.handle.thickness,
                           "depth": p.handle.depth, "color": list(p.handle.color)},
            }
            for p in c.parts
        ],
    }


def cabinet_from_dict(d: dict) -> Cabinet:
    if d.get("format") != SCENE_FORMAT:
        raise ParseError(f"unsupported scene format {d.get('format')!r}", field="format")
    try:
        body = d["body"]
        parts = []
        for pd in d["parts"]:
            jd = pd["joint"]
            if jd["kind"] not in JOINT_KINDS:
                raise ParseError(f"unknown joint kind {jd['kind']!r}", field="joint.kind")
            hd = pd["handle"]
            if hd["posture"] not in POSTURES:
                raise ParseError(f"unknown posture {hd['posture']!r}", field="handle.posture")
            if pd["kind"] not in PART_KINDS:
                raise ParseError(f"unknown part kind {pd['kind']!r}", field="part.kind")
            joint = Joint(jd["kind"], tuple(jd["axis"]), tuple(jd["origin"]),
                          float(jd["limit"]), float(jd["value"]))
            handle = Handle(tuple(hd["center"]), hd["posture"], float(hd["length"]),
                            float(hd["thickness"]), float(hd["depth"]), tuple(hd["color"]))
            parts.append(Part(int(pd["id"]), pd["kind"], joint, handle, tuple(pd["face_rect"])))
        return Cabinet(int(d["id"]), (body["width"], body["height"], body["depth"]),
                       float(body["front_x"]), tuple(parts), d.get("split", "train"))
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"malformed scene: {e}", field=str(e)) from e


def scene_bytes(c: Cabinet) -> bytes:
    return (json.dumps(cabinet_to_dict(c), indent=1, sort_keys=True) + "\n").encode()


def save_scene(c: Cabinet, path) -> None:
    with open(path, "wb") as f:
        f.write(scene_bytes(c))


def load_scene(path) -> Cabinet:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", line=e.lineno) from e
    return cabinet_from_dict(d)
