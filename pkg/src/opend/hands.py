"""Kinematic hand models: four hands, forward kinematics, joint interpolation.

Link geometry, joint limits, rest poses and the per-hand grasp reach all come
from the bundled ``opend-hand/1`` spec file; nothing downstream hard-codes
hand dimensions.  The palm frame has +x as the palm normal (the approach
axis), multi-finger chains attach near the +z palm edge with the thumb
mirrored at -z, and every chain extends along +x at rest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources

import numpy as np

from .geometry import quat_normalize, quat_to_matrix, rotation_about_axis

HAND_FORMAT = "opend-hand/1"

FRANKA = "franka"
ALLEGRO = "allegro"
SHADOW = "shadow"
SKELETON = "skeleton"
HAND_KINDS = (FRANKA, ALLEGRO, SHADOW, SKELETON)

PRISMATIC = "prismatic"
REVOLUTE = "revolute"
D6 = "d6"


class JointOutOfRange(Exception):
    pass


class LengthMismatch(Exception):
    pass


@dataclass(frozen=True)
class HandJoint:
    kind: str
    axes: tuple[tuple[float, float, float], ...]  # one axis, two for d6
    limits: tuple[tuple[float, float], ...]  # per dof slot
    link: tuple[float, float, float]  # offset to the next frame

    @property
    def dof(self) -> int:
        return len(self.axes)


@dataclass(frozen=True)
class Finger:
    name: str
    base: tuple[float, float, float]
    joints: tuple[HandJoint, ...]
    d_start: int  # first slot in the hand's joint vector

    @property
    def dof(self) -> int:
        return sum(j.dof for j in self.joints)


@dataclass(frozen=True)
class HandModel:
    kind: str
    fingers: tuple[Finger, ...]
    dof: int
    open_rest: np.ndarray
    curl_closed: np.ndarray
    limits_lo: np.ndarray
    limits_hi: np.ndarray
    curl_mask: np.ndarray  # True for slots driven by the curl parameter
    grasp_reach: float
    rest_fingertips: np.ndarray

    @property
    def max_gap(self) -> float:
        """Widest fingertip separation for prismatic (gripper) hands."""
        pris = [j for f in self.fingers for j in f.joints if j.kind == PRISMATIC]
        return float(sum(j.limits[0][1] for j in pris))

    def joint_counts(self) -> dict[str, int]:
        counts = {PRISMATIC: 0, REVOLUTE: 0, D6: 0}
        for f in self.fingers:
            for j in f.joints:
                counts[j.kind] += 1
        return counts


@dataclass
class HandState:
    p: np.ndarray
    r: np.ndarray  # unit quaternion (w, x, y, z)
    d: np.ndarray

    def copy(self) -> "HandState":
        return HandState(self.p.copy(), self.r.copy(), self.d.copy())


@dataclass
class FKResult:
    fingertips: np.ndarray  # (n_fingers, 3)
    frames: list[list[tuple[np.ndarray, np.ndarray]]]  # per finger, per joint (R, p)


def _load_raw() -> dict:
    with resources.files("opend.data").joinpath("hand_specs.json").open("r") as f:
        raw = json.load(f)
    if raw.get("format") != HAND_FORMAT:
        raise ValueError(f"unsupported hand spec format {raw.get('format')!r}")
    return raw


@lru_cache(maxsize=None)
def hand_spec(kind: str) -> HandModel:
    raw = _load_raw()
    if kind not in raw["hands"]:
        raise KeyError(f"unknown hand kind {kind!r}; have {sorted(raw['hands'])}")
    spec = raw["hands"][kind]
    fingers = []
    slot = 0
    lo, hi, curl = [], [], []
    for fd in spec["fingers"]:
        joints = []
        for jd in fd["joints"]:
            if jd["type"] == D6:
                axes = tuple(tuple(a) for a in jd["axes"])
                limits = tuple(tuple(l) for l in jd["limits"])
            else:
                axes = (tuple(jd["axis"]),)
                limits = (tuple(jd["limits"]),)
            joints.append(HandJoint(jd["type"], axes, limits, tuple(jd["link"])))
            for lim in limits:
                lo.append(lim[0])
                hi.append(lim[1])
                curl.append(jd["type"] != D6)
        fingers.append(Finger(fd["name"], tuple(fd["base"]), tuple(joints), slot))
        slot += fingers[-1].dof
    model = HandModel(
        kind=kind,
        fingers=tuple(fingers),
        dof=slot,
        open_rest=np.array(spec["open_rest"], dtype=float),
        curl_closed=np.array(spec["curl_closed"], dtype=float),
        limits_lo=np.array(lo),
        limits_hi=np.array(hi),
        curl_mask=np.array(curl, dtype=bool),
        grasp_reach=float(spec["grasp_reach"]),
        rest_fingertips=np.array(spec["rest_fingertips"], dtype=float),
    )
    if model.dof != int(spec["dof"]):
        raise ValueError(f"{kind}: spec dof {spec['dof']} != layout dof {model.dof}")
    return model


def check_joints(m: HandModel, d: np.ndarray, tol: float = 1e-9) -> None:
    d = np.asarray(d, dtype=float)
    if d.shape != (m.dof,):
        raise LengthMismatch(f"expected {m.dof} joints, got {d.shape}")
    bad = (d < m.limits_lo - tol) | (d > m.limits_hi + tol)
    if bad.any():
        idx = int(np.argmax(bad))
        raise JointOutOfRange(f"joint {idx} value {d[idx]} outside [{m.limits_lo[idx]}, {m.limits_hi[idx]}]")


def forward_kinematics(m: HandModel, s: HandState) -> FKResult:
    check_joints(m, s.d)
    rot_pose = quat_to_matrix(s.r)
    tips = np.empty((len(m.fingers), 3))
    frames: list[list[tuple[np.ndarray, np.ndarray]]] = []
    for fi, finger in enumerate(m.fingers):
        r_cur = rot_pose
        p_cur = np.asarray(s.p, dtype=float) + rot_pose @ np.asarray(finger.base)
        slot = finger.d_start
        chain = []
        for joint in finger.joints:
            if joint.kind == PRISMATIC:
                p_cur = p_cur + r_cur @ (np.asarray(joint.axes[0]) * s.d[slot])
                slot += 1
            elif joint.kind == REVOLUTE:
                r_cur = r_cur @ rotation_about_axis(joint.axes[0], s.d[slot])
                slot += 1
            else:  # d6: y-spin then z-spin, x locked
                r_cur = r_cur @ rotation_about_axis(joint.axes[0], s.d[slot])
                r_cur = r_cur @ rotation_about_axis(joint.axes[1], s.d[slot + 1])
                slot += 2
            p_cur = p_cur + r_cur @ np.asarray(joint.link)
            chain.append((r_cur, p_cur))
        tips[fi] = p_cur
        frames.append(chain)
    return FKResult(tips, frames)


def fingertips(m: HandModel, s: HandState) -> np.ndarray:
    return forward_kinematics(m, s).fingertips


def interpolate_joints(d_init, d_final, s: float) -> np.ndarray:
    a = np.asarray(d_init, dtype=float)
    b = np.asarray(d_final, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"{a.shape} vs {b.shape}")
    return a + (b - a) * float(s)


def clamp_state(m: HandModel, s: HandState) -> HandState:
    d = np.clip(np.asarray(s.d, dtype=float), m.limits_lo, m.limits_hi)
    return HandState(np.asarray(s.p, dtype=float).copy(), quat_normalize(s.r), d)


def open_rest_state(m: HandModel, p=None, r=None) -> HandState:
    p = np.zeros(3) if p is None else np.asarray(p, dtype=float)
    r = np.array([1.0, 0.0, 0.0, 0.0]) if r is None else np.asarray(r, dtype=float)
    return HandState(p.copy(), r.copy(), m.open_rest.copy())


def curl_joints(m: HandModel, base: np.ndarray, gamma_per_finger) -> np.ndarray:
    """Joint vector with each finger's curlable slots blended toward closed."""
    d = np.asarray(base, dtype=float).copy()
    for finger, gamma in zip(m.fingers, gamma_per_finger):
        sl = slice(finger.d_start, finger.d_start + finger.dof)
        mask = m.curl_mask[sl]
        d[sl] = np.where(mask,
                         m.open_rest[sl] + (m.curl_closed[sl] - m.open_rest[sl]) * float(gamma),
                         d[sl])
    return d
