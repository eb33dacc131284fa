"""Episode state machine: locate -> approach -> close -> pull, plus the task checker.

The world is quasi-static and kinematic.  The hand teleports to each clamped
command; while a part is held, hand displacement couples into the joint
(straight for drawers, projected onto the arc tangent for doors) and a
maintenance check drops the grasp when the handle drifts from the grip point
or the grip axis misaligns.  Everything is a pure function of its inputs, so
episodes are bitwise reproducible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import camera, detect, grasp, hands, instruct, scene
from .geometry import angle_between, quat_slerp, quat_to_matrix

NONE = "none"
NO_DETECTION = "NoDetection"
NO_MATCH = "NoMatch"
NO_GRASP = "NoGrasp"
DETACHED = "Detached"
WRONG_PART = "WrongPart"
TIMEOUT = "Timeout"
FAILURES = (NONE, NO_DETECTION, NO_MATCH, NO_GRASP, DETACHED, WRONG_PART, TIMEOUT)

SUCCESS_RATIO = 0.2  # open ratio must strictly exceed this

TRAJ_FORMAT = "opend-traj/1"


@dataclass(frozen=True)
class ExecConfig:
    step_rate: float = 60.0  # physics update frequency, Hz
    approach_speed: float = 0.5  # m/s
    pull_speed: float = 0.1  # m/s
    approach_steps: int = 600
    close_steps: int = 120
    pull_steps: int = 600
    mu: float = 0.5
    rho_detach: float = 0.02  # m
    beta_max_deg: float = 30.0
    handle_depth_default: float = 0.035  # assumed bar depth when only a bbox is known
    spawn_back_off: float = 0.5  # m behind the pregrasp along -x
    seed: int = 0

    @property
    def dt(self) -> float:
        return 1.0 / self.step_rate


@dataclass(frozen=True)
class Attachment:
    part_id: int
    grip_local: np.ndarray  # handle center in the hand frame at attach time
    axis_local: np.ndarray  # handle length axis in the hand frame at attach time


@dataclass
class WorldState:
    cabinet: scene.Cabinet
    hand_model: hands.HandModel
    hand: hands.HandState
    attachment: Optional[Attachment]
    t: int = 0
    phase: str = "init"
    detached: bool = False


@dataclass
class EpisodeResult:
    success: bool
    open_ratio: float
    target_part: int
    opened_part: Optional[int]
    failure: str
    trace: list = field(default_factory=list)
    initial_hand: Optional[dict] = None  # pre-episode hand state, for replay

    def as_dict(self) -> dict:
        return {"success": self.success, "open_ratio": self.open_ratio,
                "target_part": self.target_part, "opened_part": self.opened_part,
                "failure": self.failure}

    @staticmethod
    def from_dict(d: dict) -> "EpisodeResult":
        return EpisodeResult(bool(d["success"]), float(d["open_ratio"]), int(d["target_part"]),
                             d["opened_part"], d["failure"])

    def same_outcome(self, other: "EpisodeResult") -> bool:
        return self.as_dict() == other.as_dict()


# ---------------------------------------------------------------------------
# stepping


def _try_attach(w: WorldState, cfg: ExecConfig) -> Optional[Attachment]:
    m = w.hand_model
    near = False
    for p in w.cabinet.parts:
        hc = scene.handle_center_world(p)
        if np.linalg.norm(hc - w.hand.p) <= m.grasp_reach + 0.15:
            near = True
            break
    if not near:
        return None
    for p in w.cabinet.parts:
        center, half, rot = scene.handle_obb_world(p)
        thickness_axis = rot @ p.handle.thickness_axis()
        ok, _ = grasp.closure_against_obb(m, w.hand, center, half, rot, thickness_axis, cfg.mu)
        if ok:
            r_hand = quat_to_matrix(w.hand.r)
            grip_local = r_hand.T @ (scene.handle_center_world(p) - w.hand.p)
            axis_local = r_hand.T @ scene.handle_axis_world(p)
            return Attachment(p.id, grip_local, axis_local)
    return None


def step_world(w: WorldState, hand_cmd: hands.HandState, cfg: ExecConfig) -> WorldState:
    """Advance one physics step: move the hand, couple the held joint, re-check grip."""
    cmd = hands.clamp_state(w.hand_model, hand_cmd)
    delta = cmd.p - w.hand.p
    cab = w.cabinet
    att = w.attachment
    detached = w.detached

    if att is not None:
        part = cab.part(att.part_id)
        j = part.joint
        if j.kind == scene.PRISMATIC:
            value = float(np.clip(j.value - delta[0], 0.0, j.limit))
        else:
            hc = scene.handle_center_world(part)
            origin = np.array(j.origin)
            axis = np.array(j.axis)
            rho = hc - origin
            rho_perp = rho - np.dot(rho, axis) * axis
            r_hinge = float(np.linalg.norm(rho_perp))
            if r_hinge < 1e-9:
                value = j.value
            else:
                tangent = np.cross(axis, rho_perp / r_hinge)
                value = float(np.clip(j.value + np.dot(delta, tangent) / r_hinge, 0.0, j.limit))
        cab = scene.with_joint_value(cab, part.id, value)
        part_now = cab.part(att.part_id)
        r_hand = quat_to_matrix(cmd.r)
        grip_world = cmd.p + r_hand @ att.grip_local
        axis_world = r_hand @ att.axis_local
        drift = float(np.linalg.norm(scene.handle_center_world(part_now) - grip_world))
        misalign = angle_between(axis_world, scene.handle_axis_world(part_now))
        if drift > cfg.rho_detach or misalign > np.deg2rad(cfg.beta_max_deg):
            att = None
            detached = True
    elif not detached:
        w_probe = WorldState(cab, w.hand_model, cmd, None, w.t, w.phase, detached)
        att = _try_attach(w_probe, cfg)

    return WorldState(cab, w.hand_model, cmd, att, w.t + 1, w.phase, detached)


def grasp_maintained(w: WorldState, cfg: ExecConfig = ExecConfig()) -> bool:
    """Whether the current grip still tracks the handle (attachment required)."""
    if w.attachment is None:
        raise ValueError("grasp_maintained requires an attached world state")
    att = w.attachment
    part = w.cabinet.part(att.part_id)
    r_hand = quat_to_matrix(w.hand.r)
    grip_world = w.hand.p + r_hand @ att.grip_local
    axis_world = r_hand @ att.axis_local
    drift = float(np.linalg.norm(scene.handle_center_world(part) - grip_world))
    misalign = angle_between(axis_world, scene.handle_axis_world(part))
    return drift <= cfg.rho_detach and misalign <= np.deg2rad(cfg.beta_max_deg)


# ---------------------------------------------------------------------------
# task checker


def check_success(c: scene.Cabinet, target_part: int, instruction: str = "") -> tuple[bool, float]:
    """Success iff the instructed part's open ratio strictly exceeds 20%."""
    ratio = scene.open_ratio(c.part(target_part))
    return ratio > SUCCESS_RATIO, ratio


def _opened_part(c: scene.Cabinet) -> Optional[int]:
    best, best_ratio = None, SUCCESS_RATIO
    for p in c.parts:
        r = scene.open_ratio(p)
        if r > best_ratio:
            best, best_ratio = p.id, r
    return best


def _classify(c: scene.Cabinet, target: int, phase_failure: str) -> EpisodeResult:
    success, ratio = check_success(c, target)
    opened = _opened_part(c)
    if success:
        failure = NONE
    elif opened is not None and opened != target:
        failure = WRONG_PART
    else:
        failure = phase_failure
    return EpisodeResult(success, ratio, target, opened, failure)


# ---------------------------------------------------------------------------
# episode driver


def _record(trace: list, w: WorldState) -> None:
    trace.append({
        "t": w.t,
        "phase": w.phase,
        "p": [float(v) for v in w.hand.p],
        "r": [float(v) for v in w.hand.r],
        "d": [float(v) for v in w.hand.d],
        "joints": [float(p.joint.value) for p in w.cabinet.parts],
        "attached": -1 if w.attachment is None else w.attachment.part_id,
    })


CLOSE_OVERDRIVE = 1.3  # squeeze up to 30% past the planned stop, contact permitting


def _contact_clamped_finals(w: WorldState, plan: grasp.GraspPlan, cfg: ExecConfig) -> np.ndarray:
    """Effective close targets: each finger squeezes along its planned path
    until it first touches a real handle surface.

    The planner's stops come from an estimated cuboid, so executing them
    verbatim either under-closes (estimate too wide) or punches through
    (estimate too narrow).  Over-driving the path slightly and halting at
    the first true-surface crossing is the kinematic stand-in for closing
    with force until contact.
    """
    from .geometry import obb_signed_distance

    m = w.hand_model
    obbs = [scene.handle_obb_world(p) for p in w.cabinet.parts]

    def scene_sd(fi: int, d: np.ndarray) -> float:
        tip = hands.fingertips(m, hands.HandState(plan.pregrasp.p, plan.pregrasp.r, d))[fi]
        return min(obb_signed_distance(tip, c, h, r) for c, h, r in obbs)

    finals = plan.final_joints.copy()
    lo_band = -0.5 * grasp.CONTACT_TOL
    for fi, finger in enumerate(m.fingers):
        sl = slice(finger.d_start, finger.d_start + finger.dof)

        def at(t: float) -> np.ndarray:
            d = m.open_rest.copy()
            d[sl] = np.clip(m.open_rest[sl] + (plan.final_joints[sl] - m.open_rest[sl]) * t,
                            m.limits_lo[sl], m.limits_hi[sl])
            return d

        prev_t, prev_sd = 0.0, scene_sd(fi, at(0.0))
        if prev_sd <= 0.0:
            continue
        hit = None
        t = 0.0
        while t < CLOSE_OVERDRIVE - 1e-12:
            t = min(CLOSE_OVERDRIVE, t + 0.05)
            sd = scene_sd(fi, at(t))
            if lo_band <= sd <= 0.0:
                hit = t
                break
            if sd < lo_band:
                a, b = prev_t, t
                for _ in range(24):
                    mid = 0.5 * (a + b)
                    sd_mid = scene_sd(fi, at(mid))
                    if lo_band <= sd_mid <= 0.0:
                        a = b = mid
                        break
                    if sd_mid > 0.0:
                        a = mid
                    else:
                        b = mid
                hit = b
                break
            prev_t, prev_sd = t, sd
        finals[sl] = at(hit if hit is not None else CLOSE_OVERDRIVE)[sl]
    return finals


def _execute_plan(w: WorldState, plan: grasp.GraspPlan, cfg: ExecConfig, trace: list) -> tuple[WorldState, str]:
    m = w.hand_model
    # approach: straight line at fixed speed, orientation slerped over the path
    w.phase = "approach"
    start = w.hand.copy()
    dist = float(np.linalg.norm(plan.pregrasp.p - start.p))
    steps_needed = max(1, int(np.ceil(dist / (cfg.approach_speed * cfg.dt))))
    for k in range(1, min(steps_needed, cfg.approach_steps) + 1):
        s = k / steps_needed
        cmd = hands.HandState(start.p + (plan.pregrasp.p - start.p) * s,
                              quat_slerp(start.r, plan.pregrasp.r, s),
                              m.open_rest.copy())
        w = step_world(w, cmd, cfg)
        _record(trace, w)
    if steps_needed > cfg.approach_steps:
        return w, TIMEOUT

    w.phase = "close"
    finals = _contact_clamped_finals(w, plan, cfg)
    for k in range(1, cfg.close_steps + 1):
        d = hands.interpolate_joints(m.open_rest, finals, k / cfg.close_steps)
        cmd = hands.HandState(plan.pregrasp.p.copy(), plan.pregrasp.r.copy(), d)
        w = step_world(w, cmd, cfg)
        _record(trace, w)
    if w.attachment is None:
        return w, NO_GRASP

    w.phase = "pull"
    pull_step = np.array([-cfg.pull_speed * cfg.dt, 0.0, 0.0])
    for _ in range(cfg.pull_steps):
        cmd = hands.HandState(w.hand.p + pull_step, w.hand.r.copy(), w.hand.d.copy())
        w = step_world(w, cmd, cfg)
        _record(trace, w)
        if w.attachment is None:
            break
    return w, DETACHED if w.detached else TIMEOUT


def _spawn_state(m: hands.HandModel, plan: grasp.GraspPlan, cfg: ExecConfig) -> hands.HandState:
    p = plan.pregrasp.p + np.array([-cfg.spawn_back_off, 0.0, 0.0])
    return hands.HandState(p, np.array([1.0, 0.0, 0.0, 0.0]), m.open_rest.copy())


def run_episode(c: scene.Cabinet, instruction: str, hand: hands.HandModel,
                detector, cfg: ExecConfig = ExecConfig()) -> EpisodeResult:
    """Full vision-driven episode; the detector maps (obs, instruction) to a bbox."""
    target = instruct.ground_instruction(instruction, c)
    trace: list = []
    pose = camera.place_camera(c, cfg.seed * 4 + 1)
    obs = camera.render(pose, c, cfg.seed * 4 + 2)
    try:
        bbox = detector.locate(obs, instruction, c)
    except detect.NoDetection:
        return _classify(c, target, NO_DETECTION)
    except (detect.NoMatchingBox, detect.InvalidLayout):
        return _classify(c, target, NO_MATCH)
    try:
        anchor = camera.recover_world(bbox, obs)
        (u, v), posture = camera.bbox_center_posture(bbox)
        dist = camera.depth_at(obs, u, v)
    except camera.NoDepth:
        return _classify(c, target, NO_DETECTION)
    length_est = max(bbox.width, bbox.height) * dist / pose.f
    thickness_est = min(bbox.width, bbox.height) * dist / pose.f
    cuboid = grasp.HandleCuboid(tuple(float(x) for x in anchor), posture,
                                (cfg.handle_depth_default, length_est, thickness_est))
    return _finish_with_cuboid(c, target, hand, cuboid, cfg, trace)


def run_grasp_episode(c: scene.Cabinet, part_id: int, hand: hands.HandModel,
                      cfg: ExecConfig = ExecConfig()) -> EpisodeResult:
    """Ground-truth-position protocol: skip sensing, plan on the true handle."""
    cuboid = grasp.HandleCuboid.from_part(c.part(part_id))
    return _finish_with_cuboid(c, part_id, hand, cuboid, cfg, [])


def hand_state_dict(s: hands.HandState) -> dict:
    return {"p": [float(v) for v in s.p], "r": [float(v) for v in s.r],
            "d": [float(v) for v in s.d]}


def _finish_with_cuboid(c, target, hand, cuboid, cfg, trace) -> EpisodeResult:
    try:
        plan = grasp.search_grasp(hand, cuboid, cfg.mu)
    except grasp.NoGrasp:
        return _classify(c, target, NO_GRASP)
    spawn = _spawn_state(hand, plan, cfg)
    w = WorldState(c, hand, spawn, None)
    w, phase_failure = _execute_plan(w, plan, cfg, trace)
    result = _classify(w.cabinet, target, phase_failure)
    result.trace = trace
    result.initial_hand = hand_state_dict(spawn)
    return result


# ---------------------------------------------------------------------------
# trajectory logs


def trajectory_lines(c: scene.Cabinet, result: EpisodeResult, hand_kind: str,
                     instruction: Optional[str], mode: str = "agent",
                     dataset_ref: Optional[dict] = None,
                     cfg: ExecConfig = ExecConfig()) -> list[str]:
    header = {
        "format": TRAJ_FORMAT,
        "mode": mode,
        "hand": hand_kind,
        "instruction": instruction,
        "target_part": result.target_part,
        "initial_hand": result.initial_hand,
        "cfg": {"step_rate": cfg.step_rate, "mu": cfg.mu, "rho_detach": cfg.rho_detach,
                "beta_max_deg": cfg.beta_max_deg},
        "scene": scene.cabinet_to_dict(c),
        "dataset": dataset_ref,
    }
    lines = [json.dumps(header, sort_keys=True)]
    lines.extend(json.dumps(step, sort_keys=True) for step in result.trace)
    lines.append(json.dumps({"result": result.as_dict()}, sort_keys=True))
    return lines


def write_trajectory(path, c: scene.Cabinet, result: EpisodeResult, hand_kind: str,
                     instruction: Optional[str], mode: str = "agent",
                     dataset_ref: Optional[dict] = None, cfg: ExecConfig = ExecConfig()) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for line in trajectory_lines(c, result, hand_kind, instruction, mode, dataset_ref, cfg):
            f.write(line + "\n")
