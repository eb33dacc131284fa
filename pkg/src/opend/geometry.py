"""Small rigid-transform helpers shared by the kinematics and simulation code.

Quaternions are stored as (w, x, y, z) numpy arrays.  The world frame is
+x from the camera toward the cabinet, +y to the cabinet's right as seen
from the camera, +z up.
"""

from __future__ import annotations

import numpy as np

X_AXIS = np.array([1.0, 0.0, 0.0])
Y_AXIS = np.array([0.0, 1.0, 0.0])
Z_AXIS = np.array([0.0, 0.0, 1.0])


def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return quat_identity()
    half = 0.5 * angle
    q = np.empty(4)
    q[0] = np.cos(half)
    q[1:] = axis / n * np.sin(half)
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        return quat_identity()
    return q / n


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_rotate(q: np.ndarray, v) -> np.ndarray:
    return quat_to_matrix(q) @ np.asarray(v, dtype=float)


def quat_slerp(a: np.ndarray, b: np.ndarray, s: float) -> np.ndarray:
    a = quat_normalize(a)
    b = quat_normalize(b)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    if dot > 1.0 - 1e-10:
        return quat_normalize(a + s * (b - a))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    return (np.sin((1 - s) * theta) * a + np.sin(s * theta) * b) / np.sin(theta)


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix about a unit axis."""
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return np.eye(3)
    ux, uy, uz = axis / n
    c, s = np.cos(angle), np.sin(angle)
    k = np.array([[0.0, -uz, uy], [uz, 0.0, -ux], [-uy, ux, 0.0]])
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def angle_between(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return 0.0
    return float(np.arccos(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)))


def obb_signed_distance(point, center, half, rot=None) -> float:
    """Signed distance from a point to an oriented box (negative inside)."""
    p = np.asarray(point, dtype=float) - np.asarray(center, dtype=float)
    if rot is not None:
        p = np.asarray(rot).T @ p
    q = np.abs(p) - np.asarray(half, dtype=float)
    outside = np.maximum(q, 0.0)
    d_out = float(np.linalg.norm(outside))
    d_in = float(min(q.max(), 0.0))
    return d_out + d_in


def obb_face_normal(point, center, half, rot=None) -> np.ndarray:
    """Outward normal of the box face nearest to `point` (world frame).

    Axis ties resolve in x, y, z order, which keeps contact attribution
    deterministic for points landing exactly on an edge.
    """
    p = np.asarray(point, dtype=float) - np.asarray(center, dtype=float)
    r = np.eye(3) if rot is None else np.asarray(rot)
    p_local = r.T @ p
    q = np.abs(p_local) - np.asarray(half, dtype=float)
    axis = int(np.argmax(q))
    sign = 1.0 if p_local[axis] >= 0.0 else -1.0
    normal_local = np.zeros(3)
    normal_local[axis] = sign
    return r @ normal_local
