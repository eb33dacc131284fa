"""Joint-space grasp search against the simplified cuboid handle.

The planner only sees the handle's center, posture and coarse dims.  Fingers
curl independently (chains do not interact), each freezing at first surface
contact; closure then requires two contacts on opposing faces whose normals
are anti-parallel within the friction cone.  The whole search runs in a
handle-centered frame, which makes plans exactly translation-equivariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hands, scene
from .geometry import (
    angle_between,
    obb_face_normal,
    obb_signed_distance,
    quat_from_axis_angle,
    quat_rotate,
)

STANDOFF_CLEARANCE = 0.01  # palm sits grasp_reach + this in front of the handle center
CONTACT_TOL = 1e-3  # |signed distance| accepted as contact by the closure test
FREEZE_LO, FREEZE_HI = -2e-4, 0.0  # curl freezes inside this signed-distance band
GAMMA_STEP = 0.05
BISECT_ITERS = 20
ROLL_OFFSETS_DEG = (0.0, 15.0, -15.0)
LATERAL_FRACS = (0.0, 0.25, -0.25)  # palm z offsets as fractions of handle length
DEFAULT_MU = 0.5


class NoGrasp(Exception):
    pass


@dataclass(frozen=True)
class HandleCuboid:
    center: tuple[float, float, float]
    posture: str
    dims: tuple[float, float, float]  # (depth, length, thickness)

    @staticmethod
    def from_part(part: scene.Part) -> "HandleCuboid":
        h = part.handle
        return HandleCuboid(tuple(h.center), h.posture, (h.depth, h.length, h.thickness))

    @property
    def depth(self) -> float:
        return self.dims[0]

    @property
    def length(self) -> float:
        return self.dims[1]

    @property
    def thickness(self) -> float:
        return self.dims[2]

    def thickness_axis(self) -> np.ndarray:
        return np.array([0.0, 0.0, 1.0]) if self.posture == scene.HORIZONTAL else np.array([0.0, 1.0, 0.0])

    def obb(self) -> tuple[np.ndarray, np.ndarray]:
        """Axis-aligned box: front face centered on `center`, bar extends +x."""
        c = np.asarray(self.center) + np.array([self.depth * 0.5, 0.0, 0.0])
        if self.posture == scene.HORIZONTAL:
            half = np.array([self.depth, self.length, self.thickness]) * 0.5
        else:
            half = np.array([self.depth, self.thickness, self.length]) * 0.5
        return c, half


@dataclass
class Contact:
    point: np.ndarray
    normal: np.ndarray
    finger: str


@dataclass
class GraspPlan:
    pregrasp: hands.HandState
    final_joints: np.ndarray
    contacts: list[Contact]
    closure_quality: float


def _posture_roll(posture: str) -> float:
    return 0.0 if posture == scene.HORIZONTAL else np.pi / 2.0


def pregrasp_pose(h: HandleCuboid, m: hands.HandModel) -> hands.HandState:
    """Palm on the -x side of the handle at grasp_reach + clearance, joints open."""
    standoff = m.grasp_reach + STANDOFF_CLEARANCE
    p = np.asarray(h.center) - np.array([standoff, 0.0, 0.0])
    r = quat_from_axis_angle([1.0, 0.0, 0.0], _posture_roll(h.posture))
    return hands.HandState(p, r, m.open_rest.copy())


def closure_against_obb(m: hands.HandModel, s: hands.HandState, box_center, box_half,
                        box_rot, thickness_axis, mu: float = DEFAULT_MU) -> tuple[bool, list[Contact]]:
    """Closure predicate against an arbitrarily oriented handle box.

    Contacts are fingertips within CONTACT_TOL of the surface; closure needs
    two of them on opposing faces (normals anti-parallel within the friction
    cone).  The parallel gripper is stricter: exactly its two fingertips on
    the two thickness faces.
    """
    tips = hands.fingertips(m, s)
    contacts = []
    for finger, tip in zip(m.fingers, tips):
        sd = obb_signed_distance(tip, box_center, box_half, box_rot)
        if abs(sd) <= CONTACT_TOL:
            contacts.append(Contact(tip.copy(), obb_face_normal(tip, box_center, box_half, box_rot),
                                    finger.name))
    cone = np.arctan(mu)
    ok = False
    for i in range(len(contacts)):
        for j in range(i + 1, len(contacts)):
            if angle_between(contacts[i].normal, -contacts[j].normal) <= cone:
                ok = True
    if m.kind == hands.FRANKA:
        signs = {round(float(np.dot(c.normal, thickness_axis))) for c in contacts}
        ok = len(contacts) == 2 and signs == {1, -1}
    return ok, contacts


def closure_test(m: hands.HandModel, s: hands.HandState, h: HandleCuboid,
                 mu: float = DEFAULT_MU) -> tuple[bool, list[Contact]]:
    """Closure predicate against a rest-pose (axis-aligned) handle cuboid."""
    box_c, box_h = h.obb()
    return closure_against_obb(m, s, box_c, box_h, None, h.thickness_axis(), mu)


def _closure_quality(contacts: list[Contact], mu: float) -> float:
    best = 0.0
    for i in range(len(contacts)):
        for j in range(i + 1, len(contacts)):
            a = angle_between(contacts[i].normal, -contacts[j].normal)
            if a <= np.arctan(mu):
                best = max(best, float(np.cos(a)))
    return best


def _tip_sd(m: hands.HandModel, state: hands.HandState, fi: int, gamma: float,
            d_base: np.ndarray, box_c, box_h) -> float:
    gammas = np.zeros(len(m.fingers))
    gammas[fi] = gamma
    d = hands.curl_joints(m, d_base, gammas)
    s = hands.HandState(state.p, state.r, d)
    tip = hands.fingertips(m, s)[fi]
    return obb_signed_distance(tip, box_c, box_h)


def _curl_finger(m, state, fi, d_base, box_c, box_h) -> float | None:
    """Advance one finger's curl until first surface contact; returns gamma.

    Contact must be reached from outside the cuboid: a fingertip that starts
    embedded (the bar is wider than the finger span) never freezes, so the
    graspable range ends exactly at the joint limits.
    """
    prev_g = 0.0
    prev_sd = _tip_sd(m, state, fi, 0.0, d_base, box_c, box_h)
    if -1e-12 <= prev_sd <= FREEZE_HI:
        return 0.0
    was_outside = prev_sd > FREEZE_HI
    g = 0.0
    while g < 1.0 - 1e-12:
        g = min(1.0, g + GAMMA_STEP)
        sd = _tip_sd(m, state, fi, g, d_base, box_c, box_h)
        if was_outside and FREEZE_LO <= sd <= FREEZE_HI:
            return g
        if was_outside and sd < FREEZE_LO and prev_sd > FREEZE_HI:
            a, b = prev_g, g
            for _ in range(BISECT_ITERS):
                mid = 0.5 * (a + b)
                sd_mid = _tip_sd(m, state, fi, mid, d_base, box_c, box_h)
                if FREEZE_LO <= sd_mid <= FREEZE_HI:
                    return mid
                if sd_mid > FREEZE_HI:
                    a = mid
                else:
                    b = mid
            return b
        was_outside = was_outside or sd > FREEZE_HI
        prev_g, prev_sd = g, sd
    return None


def _search_at(m: hands.HandModel, h: HandleCuboid, state: hands.HandState, mu: float):
    box_c, box_h = h.obb()
    gammas = np.zeros(len(m.fingers))
    for fi, finger in enumerate(m.fingers):
        g = _curl_finger(m, state, fi, state.d, box_c, box_h)
        gammas[fi] = 1.0 if g is None else g
    d_final = hands.curl_joints(m, state.d, gammas)
    closed = hands.HandState(state.p, state.r, d_final)
    ok, contacts = closure_test(m, closed, h, mu)
    return ok, d_final, contacts


def search_grasp(m: hands.HandModel, h: HandleCuboid, mu: float = DEFAULT_MU) -> GraspPlan:
    """Deterministic curl search with wrist-roll and lateral-offset retries."""
    center = np.asarray(h.center, dtype=float)
    local = HandleCuboid((0.0, 0.0, 0.0), h.posture, h.dims)
    base_roll = _posture_roll(h.posture)
    standoff = m.grasp_reach + STANDOFF_CLEARANCE
    for roll_deg in ROLL_OFFSETS_DEG:
        for frac in LATERAL_FRACS:
            r = quat_from_axis_angle([1.0, 0.0, 0.0], base_roll + np.deg2rad(roll_deg))
            offset = np.array([0.0, 0.0, frac * h.length])
            p = -np.array([standoff, 0.0, 0.0]) + quat_rotate(r, offset)
            state = hands.HandState(p, r, m.open_rest.copy())
            ok, d_final, contacts = _search_at(m, local, state, mu)
            if ok:
                pregrasp = hands.HandState(state.p + center, state.r.copy(), m.open_rest.copy())
                world_contacts = [Contact(c.point + center, c.normal, c.finger) for c in contacts]
                return GraspPlan(pregrasp, d_final, world_contacts, _closure_quality(contacts, mu))
    raise NoGrasp(f"{m.kind} found no closure on {h.dims} {h.posture} handle")
