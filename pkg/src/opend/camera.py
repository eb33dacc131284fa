"""Pinhole RGB+D sensing over the box-world scene.

The camera always looks along +x.  Image u grows with world +y and image v
grows downward (decreasing z).  Depth is the Euclidean distance along the
pixel ray to the first surface hit, with +inf for background, so that
``recover_world`` is the exact inverse of projection at a sampled pixel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from . import scene

RESOLUTION = 256
DEFAULT_FOCAL = 256.0
FRAME_FILL = 0.9  # nominal projected extent of the cabinet, fraction of frame
JITTER_RANGE = 0.10  # meters per axis
BACKGROUND_COLOR = (203, 206, 210)
BODY_COLOR = (126, 104, 80)

INF_DEPTH = np.float32(np.inf)


class BehindCamera(Exception):
    pass


class OutsideFrame(Exception):
    pass


class NoDepth(Exception):
    """Depth unavailable around the queried pixel."""


@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float]
    f: float = DEFAULT_FOCAL
    cx: float = RESOLUTION / 2.0
    cy: float = RESOLUTION / 2.0
    resolution: int = RESOLUTION
    look_dir: tuple[float, float, float] = (1.0, 0.0, 0.0)


@dataclass(frozen=True)
class BBox:
    y0: float
    z0: float
    y1: float
    z1: float

    @property
    def width(self) -> float:
        return self.y1 - self.y0

    @property
    def height(self) -> float:
        return self.z1 - self.z0

    def contains(self, u: float, v: float) -> bool:
        return self.y0 <= u <= self.y1 and self.z0 <= v <= self.z1

    def as_list(self) -> list[float]:
        return [self.y0, self.z0, self.y1, self.z1]


@dataclass
class Observation:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32, +inf background
    camera: CameraPose


def camera_to_dict(pose: CameraPose) -> dict:
    return {"position": list(pose.position), "f": pose.f, "cx": pose.cx, "cy": pose.cy,
            "resolution": pose.resolution, "look_dir": list(pose.look_dir)}


def camera_from_dict(d: dict) -> CameraPose:
    return CameraPose(tuple(d["position"]), float(d["f"]), float(d["cx"]), float(d["cy"]),
                      int(d["resolution"]), tuple(d.get("look_dir", (1.0, 0.0, 0.0))))


# ---------------------------------------------------------------------------
# placement


def _scene_corners(c: scene.Cabinet) -> np.ndarray:
    boxes = [scene.body_obb(c)]
    for p in c.parts:
        boxes.append(scene.panel_obb_world(p, c.front_x))
        boxes.append(scene.handle_obb_world(p))
    corners = []
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    for center, half, rot in boxes:
        corners.append(center + (signs * half) @ rot.T)
    return np.vstack(corners)


def _project_points(pose: CameraPose, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rel = pts - np.asarray(pose.position)
    x = rel[:, 0]
    u = pose.cx + pose.f * rel[:, 1] / x
    v = pose.cy - pose.f * rel[:, 2] / x
    return u, v, x


def nominal_standoff(c: scene.Cabinet) -> float:
    """Distance from the front plane at which the whole scene projects into
    90% of the frame; the front-face corners normally bind, giving
    f * max_dim / (0.9 * resolution)."""
    _, h, _ = c.body_dims
    half_frame = 0.5 * FRAME_FILL * RESOLUTION
    corners = _scene_corners(c)
    extent = np.maximum(np.abs(corners[:, 1]), np.abs(corners[:, 2] - h / 2.0))
    return float(np.max((c.front_x - corners[:, 0]) + DEFAULT_FOCAL * extent / half_frame))


def place_camera(c: scene.Cabinet, seed: int) -> CameraPose:
    """Center the camera on the cabinet front, back off to fit 90% of frame,
    then apply per-axis uniform jitter (shrunk if the frame would be left)."""
    w, h, _ = c.body_dims
    cy_w, cz_w = 0.0, h / 2.0
    corners = _scene_corners(c)
    standoff = nominal_standoff(c)
    nominal = np.array([c.front_x - standoff, cy_w, cz_w])

    rng = np.random.default_rng([int(seed), 0x0CA1])
    jitter = rng.uniform(-JITTER_RANGE, JITTER_RANGE, 3)
    margin = 1.0  # px kept from the frame border after jitter
    for _ in range(24):
        pose = CameraPose(tuple(nominal + jitter))
        u, v, x = _project_points(pose, corners)
        if np.all(x > 0.05) and np.all(u >= margin) and np.all(u <= RESOLUTION - margin) \
                and np.all(v >= margin) and np.all(v <= RESOLUTION - margin):
            return pose
        jitter = jitter * 0.5
    return CameraPose(tuple(nominal))


# ---------------------------------------------------------------------------
# rendering


def _ray_dirs(pose: CameraPose) -> np.ndarray:
    n = pose.resolution
    us = (np.arange(n) + 0.5 - pose.cx) / pose.f
    vs = -(np.arange(n) + 0.5 - pose.cy) / pose.f
    dirs = np.empty((n, n, 3))
    dirs[:, :, 0] = 1.0
    dirs[:, :, 1] = us[None, :]
    dirs[:, :, 2] = vs[:, None]
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    return dirs


def _part_panel_color(pid: int) -> tuple[int, int, int]:
    base = 142 + 16 * (pid % 5)
    return (base, base - 22, base - 46)


def handle_render_colors(c: scene.Cabinet, recolor_seed: int) -> list[tuple[int, int, int]]:
    """Per-handle render color; each handle is repainted with probability 0.5."""
    rng = np.random.default_rng([int(recolor_seed), 0x0C01])
    out = []
    for p in c.parts:
        flip = rng.random() < 0.5
        color = tuple(int(x) for x in rng.integers(0, 256, 3))
        out.append(color if flip else tuple(p.handle.color))
    return out


def render(pose: CameraPose, c: Optional[scene.Cabinet], recolor_seed: int = 0) -> Observation:
    n = pose.resolution
    rgb = np.empty((n, n, 3), dtype=np.uint8)
    rgb[:] = BACKGROUND_COLOR
    depth = np.full((n, n), INF_DEPTH, dtype=np.float32)
    if c is None:
        return Observation(rgb, depth, pose)

    boxes = [(*scene.body_obb(c), BODY_COLOR)]
    colors = handle_render_colors(c, recolor_seed)
    for p, hcolor in zip(c.parts, colors):
        boxes.append((*scene.panel_obb_world(p, c.front_x), _part_panel_color(p.id)))
        boxes.append((*scene.handle_obb_world(p), hcolor))

    origin = np.asarray(pose.position)
    dirs = _ray_dirs(pose)
    zbuf = np.full((n, n), np.inf)
    color_buf = np.zeros((n, n, 3), dtype=np.uint8)
    color_buf[:] = BACKGROUND_COLOR
    for center, half, rot, color in boxes:
        o_local = rot.T @ (origin - center)
        d_local = dirs @ rot  # row-vector transform by rot^T
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d_local
            t1 = (-half - o_local) * inv
            t2 = (half - o_local) * inv
        near = np.nanmax(np.minimum(t1, t2), axis=2)
        far = np.nanmin(np.maximum(t1, t2), axis=2)
        hit = (far >= near) & (near > 1e-9) & (near < zbuf)
        zbuf[hit] = near[hit]
        color_buf[hit] = color
    solid = np.isfinite(zbuf)
    depth[solid] = zbuf[solid].astype(np.float32)
    rgb[:] = color_buf
    return Observation(rgb, depth, pose)


# ---------------------------------------------------------------------------
# projection and recovery


def project_point(pose: CameraPose, p) -> tuple[float, float]:
    rel = np.asarray(p, dtype=float) - np.asarray(pose.position)
    if rel[0] <= 1e-9:
        raise BehindCamera(f"point {p} not in front of camera")
    return (pose.cx + pose.f * rel[1] / rel[0], pose.cy - pose.f * rel[2] / rel[0])


def project_bbox(pose: CameraPose, part_or_handle) -> BBox:
    """Tight axis-aligned image box over the handle cuboid's 8 corners."""
    if isinstance(part_or_handle, scene.Part):
        center, half, rot = scene.handle_obb_world(part_or_handle)
    else:
        c0, half = part_or_handle.obb()
        center, rot = c0, np.eye(3)
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
    corners = center + (signs * half) @ rot.T
    us, vs = [], []
    for corner in corners:
        u, v = project_point(pose, corner)
        us.append(u)
        vs.append(v)
    hi = pose.resolution - 1e-6
    y0, y1 = max(0.0, min(us)), min(hi, max(us))
    z0, z1 = max(0.0, min(vs)), min(hi, max(vs))
    if y0 >= y1 or z0 >= z1:
        raise OutsideFrame("handle projects outside the frame")
    return BBox(y0, z0, y1, z1)


def bbox_center_posture(b: BBox) -> tuple[tuple[float, float], str]:
    center = ((b.y0 + b.y1) / 2.0, (b.z0 + b.z1) / 2.0)
    posture = scene.VERTICAL if (b.z1 - b.z0) > (b.y1 - b.y0) else scene.HORIZONTAL
    return center, posture


def depth_at(obs: Observation, u: float, v: float) -> float:
    """Depth at a pixel; median of the finite 3x3 neighborhood when the
    center pixel is background."""
    n = obs.camera.resolution
    col = int(np.clip(np.floor(u), 0, n - 1))
    row = int(np.clip(np.floor(v), 0, n - 1))
    d = float(obs.depth[row, col])
    if np.isfinite(d):
        return d
    patch = obs.depth[max(0, row - 1):row + 2, max(0, col - 1):col + 2]
    finite = patch[np.isfinite(patch)]
    if finite.size == 0:
        raise NoDepth(f"no finite depth around pixel ({u:.1f}, {v:.1f})")
    return float(np.median(finite))


FACE_DEPTH_TOL = 0.002  # planar depth spread treated as one frontal surface


def _planar_depths(obs: Observation, rows, cols) -> np.ndarray:
    """Sensed ray distances converted to planar x-distances per pixel."""
    pose = obs.camera
    au = (np.asarray(cols) + 0.5 - pose.cx) / pose.f
    av = -(np.asarray(rows) + 0.5 - pose.cy) / pose.f
    return obs.depth[rows, cols] / np.sqrt(1.0 + au * au + av * av)


def _front_span_mid(obs: Observation, lo: float, hi: float, fixed: int, x_front: float,
                    along_u: bool) -> Optional[float]:
    """Midpoint (in continuous px) of the bbox pixels lying on the frontal
    surface at planar depth x_front, scanned along one image axis."""
    n = obs.camera.resolution
    a = int(np.clip(np.floor(lo), 0, n - 1))
    z = int(np.clip(np.floor(hi), 0, n - 1))
    idx = np.arange(a, z + 1)
    if along_u:
        planar = _planar_depths(obs, np.full_like(idx, fixed), idx)
    else:
        planar = _planar_depths(obs, idx, np.full_like(idx, fixed))
    on_face = np.isfinite(planar) & (planar <= x_front + FACE_DEPTH_TOL)
    if not on_face.any():
        return None
    hits = idx[on_face]
    return 0.5 * (float(hits.min()) + float(hits.max())) + 0.5


def recover_world(b: BBox, obs: Observation) -> np.ndarray:
    """Inverse pinhole projection of the bbox center using sensed depth.

    Two depth-map corrections keep the inversion accurate for protruding
    handles: the sampled ray distance is converted through its own pixel's
    obliquity to a planar x-distance (exact for frontal surfaces), and the
    center is re-balanced onto the frontal-depth span of the box, since the
    corner-projected bbox is one-sidedly widened by the cuboid's visible
    side face and would otherwise bias the center by half that width.
    """
    (u, v), _ = bbox_center_posture(b)
    dist = depth_at(obs, u, v)
    pose = obs.camera
    n = pose.resolution
    col = int(np.clip(np.floor(u), 0, n - 1))
    row = int(np.clip(np.floor(v), 0, n - 1))
    au = (col + 0.5 - pose.cx) / pose.f
    av = -(row + 0.5 - pose.cy) / pose.f
    x_front = dist / float(np.sqrt(1.0 + au * au + av * av))

    u_mid = _front_span_mid(obs, b.y0, b.y1, row, x_front, along_u=True)
    v_mid = _front_span_mid(obs, b.z0, b.z1, col, x_front, along_u=False)
    if u_mid is not None:
        u = u_mid
    if v_mid is not None:
        v = v_mid
    ray = np.array([1.0, (u - pose.cx) / pose.f, -(v - pose.cy) / pose.f])
    return np.asarray(pose.position) + x_front * ray


# ---------------------------------------------------------------------------
# observation export


def rgb_png_bytes(obs: Observation) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(obs.rgb).save(buf, format="PNG")
    return buf.getvalue()


def depth_raw_bytes(obs: Observation) -> bytes:
    return obs.depth.astype("<f4").tobytes()


def save_observation(obs: Observation, stem: str) -> None:
    with open(f"{stem}.png", "wb") as f:
        f.write(rgb_png_bytes(obs))
    with open(f"{stem}.depth.f32", "wb") as f:
        f.write(depth_raw_bytes(obs))
    with open(f"{stem}.camera.json", "w", encoding="utf-8") as f:
        json.dump(camera_to_dict(obs.camera), f, indent=1, sort_keys=True)


def load_observation(stem: str) -> Observation:
    rgb = np.asarray(Image.open(f"{stem}.png").convert("RGB"))
    with open(f"{stem}.camera.json", "r", encoding="utf-8") as f:
        pose = camera_from_dict(json.load(f))
    with open(f"{stem}.depth.f32", "rb") as f:
        depth = np.frombuffer(f.read(), dtype="<f4").reshape(pose.resolution, pose.resolution)
    return Observation(rgb.astype(np.uint8), depth.copy(), pose)
