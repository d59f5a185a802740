"""Synthetic tabletop scenes, scripted two-object demonstrations and
ground-truth flow extraction.

World frame: x to the right, y away from the robot bases, z up; the table
is the plane z = 0.  Object poses are ``(x, y, z, roll, pitch, yaw)`` of the
box centre.  Every scripted carry is expressed through the object's grasp
point (top-face centre) so that tilting motions pivot about the gripper.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .geometry import CameraModel, OrientedBox, rpy_to_matrix

TEMPLATES = ("put_into_pot", "packing", "pouring", "drawer_place")
EPISODE_VERSION = 1

COLORS = ("red", "green", "blue", "yellow", "purple", "orange", "white", "black", "gray", "pink")
ITEM_LABELS = ("cube", "ball", "block")
DISTRACTOR_LABELS = ("cube", "ball", "block", "bottle", "bowl")
LABELS = ("cube", "ball", "block", "bottle", "bowl", "lid", "pot", "box", "cup", "can", "drawer", "cabinet")

HALF = {
    "cube": (0.025, 0.025, 0.025),
    "ball": (0.025, 0.025, 0.025),
    "block": (0.03, 0.02, 0.025),
    "bottle": (0.025, 0.025, 0.07),
    "bowl": (0.045, 0.045, 0.03),
    "box": (0.12, 0.07, 0.04),
    "pot": (0.08, 0.08, 0.05),
    "lid": (0.085, 0.085, 0.01),
    "cup": (0.03, 0.03, 0.045),
    "can": (0.03, 0.03, 0.06),
    "cabinet": (0.10, 0.08, 0.06),
    "drawer": (0.10, 0.08, 0.008),
}
RECEPTACLES = {"box", "pot", "cabinet"}

FRAME_DT = 0.1
V_MAX = 0.5
LIFT, MOVE, LOWER, HOLD = 8, 18, 8, 2
TILT = 16
SLIDE = 14
POUR_ANGLE = 1.2
POUR_CLEARANCE = 0.30  # grasp height above the work position while pouring
SLOT_OFFSET = 0.06
LID_PARK_X = (-0.30, -0.24)
LID_PARK_Y = (0.18, 0.26)
DRAWER_SLIDE = 0.18
LEFT_REGION = ((-0.33, -0.16), (0.12, 0.30))
RIGHT_REGION = ((0.16, 0.33), (0.12, 0.30))
DISTRACTOR_REGION = ((-0.42, 0.42), (0.04, 0.62))
CAMERA_EYE = (0.0, -0.35, 0.95)
CAMERA_TARGET = (0.0, 0.33, 0.0)


class PlacementError(RuntimeError):
    pass


class GroundingError(ValueError):
    pass


class UnknownNoun(GroundingError):
    pass


class AmbiguousGrounding(GroundingError):
    pass


@dataclass
class SceneObject:
    id: int
    label: str
    color: str
    position: np.ndarray
    yaw: float
    half_extents: np.ndarray
    graspable: bool = True
    receptacle: bool = False

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.half_extents = np.asarray(self.half_extents, dtype=float)
        if np.any(self.half_extents <= 0):
            raise ValueError("half extents must be positive")

    def to_dict(self) -> dict:
        return {"id": self.id, "label": self.label, "color": self.color, "position": self.position.tolist(),
                "yaw": self.yaw, "half_extents": self.half_extents.tolist(), "graspable": self.graspable,
                "receptacle": self.receptacle}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneObject":
        return cls(d["id"], d["label"], d["color"], np.array(d["position"]), d["yaw"],
                   np.array(d["half_extents"]), d["graspable"], d.get("receptacle", False))


def object_box(obj: SceneObject, pose) -> OrientedBox:
    pose = np.asarray(pose, dtype=float)
    return OrientedBox(pose[:3].copy(), rpy_to_matrix(*pose[3:]), obj.half_extents)


@dataclass
class EpisodeRecord:
    task: str
    instruction: str
    camera: CameraModel
    objects: list[SceneObject]
    frames: np.ndarray  # (T, n_objects, 6)
    targets: tuple[int, int]
    gripper_events: list[tuple[int, str, int]] = field(default_factory=list)  # (arm, close/open, frame)
    segment_roles: dict[str, tuple[int, int]] = field(default_factory=dict)  # role -> (stream, index)
    precedence: list[tuple[str, str]] = field(default_factory=list)  # (before role, after role)
    segments_per_stream: tuple[int, int] = (1, 1)
    occlusions: list[tuple[int, int, int]] = field(default_factory=list)  # (object id, first, last)
    seed: int = 0
    frame_dt: float = FRAME_DT

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    def object(self, oid: int) -> SceneObject:
        return self.objects[oid]

    def pose(self, oid: int, frame: int) -> np.ndarray:
        return self.frames[frame, oid]

    def boxes(self, frame: int) -> list[OrientedBox]:
        return [object_box(o, self.frames[frame, o.id]) for o in self.objects]

    def occluded(self, oid: int, frame: int) -> bool:
        return any(o == oid and a <= frame <= b for o, a, b in self.occlusions)

    def to_dict(self) -> dict:
        return {
            "version": EPISODE_VERSION,
            "task": self.task,
            "instruction": self.instruction,
            "seed": self.seed,
            "frame_dt": self.frame_dt,
            "camera": self.camera.to_dict(),
            "objects": [o.to_dict() for o in self.objects],
            "frames": self.frames.tolist(),
            "targets": list(self.targets),
            "gripper_events": [list(e) for e in self.gripper_events],
            "segment_roles": {k: list(v) for k, v in self.segment_roles.items()},
            "precedence": [list(p) for p in self.precedence],
            "segments_per_stream": list(self.segments_per_stream),
            "occlusions": [list(o) for o in self.occlusions],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeRecord":
        if d.get("version") != EPISODE_VERSION:
            raise ValueError(f"unsupported episode version {d.get('version')}")
        return cls(
            task=d["task"], instruction=d["instruction"], camera=CameraModel.from_dict(d["camera"]),
            objects=[SceneObject.from_dict(o) for o in d["objects"]], frames=np.array(d["frames"], dtype=float),
            targets=tuple(d["targets"]), gripper_events=[tuple(e) for e in d["gripper_events"]],
            segment_roles={k: tuple(v) for k, v in d["segment_roles"].items()},
            precedence=[tuple(p) for p in d["precedence"]], segments_per_stream=tuple(d["segments_per_stream"]),
            occlusions=[tuple(o) for o in d["occlusions"]], seed=d.get("seed", 0),
            frame_dt=d.get("frame_dt", FRAME_DT),
        )


def default_camera() -> CameraModel:
    return CameraModel.look_at(CAMERA_EYE, CAMERA_TARGET)


# ---------------------------------------------------------------- scripting


def min_jerk(tau: np.ndarray) -> np.ndarray:
    return 10 * tau ** 3 - 15 * tau ** 4 + 6 * tau ** 5


@dataclass
class _Motion:
    obj: int
    f0: int
    f1: int
    g0: np.ndarray  # grasp point + rpy at start
    g1: np.ndarray
    noise: np.ndarray  # xy amplitude vector


class _Script:
    """Accumulates grasp-point motions per object on a shared frame clock."""

    def __init__(self, objects: list[SceneObject], rng: np.random.Generator):
        self.objects = objects
        self.rng = rng
        self.motions: list[_Motion] = []
        self.grasp = {o.id: self._grasp_of(o, np.r_[o.position, 0, 0, o.yaw]) for o in objects}
        self.clock = {o.id: 0 for o in objects}

    @staticmethod
    def _grasp_of(obj: SceneObject, pose) -> np.ndarray:
        R = rpy_to_matrix(*pose[3:])
        return np.r_[pose[:3] + R @ np.array([0, 0, obj.half_extents[2]]), pose[3:]]

    def wait(self, oid: int, frames: int) -> None:
        self.clock[oid] += frames

    def sync(self, *oids: int) -> int:
        f = max(self.clock[o] for o in oids)
        for o in oids:
            self.clock[o] = f
        return f

    def move(self, oid: int, target, frames: int, noisy: bool = True) -> None:
        g0 = self.grasp[oid].copy()
        g1 = np.asarray(target, dtype=float)
        amp = self.rng.uniform(0.0, 0.002) if noisy else 0.0
        phi = self.rng.uniform(0, 2 * np.pi)
        f0 = self.clock[oid]
        self.motions.append(_Motion(oid, f0, f0 + frames, g0, g1, amp * np.array([math.cos(phi), math.sin(phi)])))
        self.grasp[oid] = g1
        self.clock[oid] = f0 + frames

    def set_xyz(self, oid: int, xyz, frames: int) -> None:
        g = self.grasp[oid].copy()
        g[:3] = xyz
        self.move(oid, g, frames)

    def pick_place(self, oid: int, goal_xy, goal_grasp_z: float, carry_grasp_z: float) -> None:
        g = self.grasp[oid]
        self.wait(oid, HOLD)
        self.set_xyz(oid, [g[0], g[1], carry_grasp_z], LIFT)
        self.wait(oid, HOLD)
        self.set_xyz(oid, [goal_xy[0], goal_xy[1], carry_grasp_z], MOVE)
        self.wait(oid, HOLD)
        self.set_xyz(oid, [goal_xy[0], goal_xy[1], goal_grasp_z], LOWER)

    def render(self, T: int) -> np.ndarray:
        frames = np.zeros((T, len(self.objects), 6))
        for o in self.objects:
            frames[:, o.id] = np.r_[o.position, 0.0, 0.0, o.yaw]
        for o in self.objects:
            ms = sorted((m for m in self.motions if m.obj == o.id), key=lambda m: m.f0)
            grasp = self._grasp_of(o, frames[0, o.id])
            last = 0
            for m in ms:
                frames[last:m.f0 + 1, o.id] = self._pose_from_grasp(o, grasp)
                tau = np.arange(0, m.f1 - m.f0 + 1) / (m.f1 - m.f0)
                s = min_jerk(tau)
                for k, f in enumerate(range(m.f0, m.f1 + 1)):
                    g = m.g0 + s[k] * (m.g1 - m.g0)
                    g[:2] += m.noise * math.sin(math.pi * tau[k])
                    frames[f, o.id] = self._pose_from_grasp(o, g)
                grasp = m.g1
                last = m.f1
            frames[last:, o.id] = self._pose_from_grasp(o, grasp)
        return frames

    @staticmethod
    def _pose_from_grasp(obj: SceneObject, g) -> np.ndarray:
        R = rpy_to_matrix(*g[3:])
        return np.r_[g[:3] - R @ np.array([0, 0, obj.half_extents[2]]), g[3:]]


# ---------------------------------------------------------------- generation


def _uniform_xy(rng, region):
    (x0, x1), (y0, y1) = region
    return np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])


def _aabb_gap(a: OrientedBox, b: OrientedBox) -> float:
    lo_a, hi_a = a.aabb()
    lo_b, hi_b = b.aabb()
    gap = np.maximum(lo_a - hi_b, lo_b - hi_a)
    return float(gap.max())


def _pick_colors(rng, n):
    idx = rng.permutation(len(COLORS))[:n]
    return [COLORS[i] for i in idx]


def generate_episode(task: str, seed: int) -> EpisodeRecord:
    """Scripted two-object demonstration of ``task``; deterministic in ``seed``."""
    if task not in TEMPLATES:
        raise ValueError(f"unknown task template {task!r}")
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, TEMPLATES.index(task)])
    builder = {"packing": _packing, "put_into_pot": _put_into_pot, "pouring": _pouring,
               "drawer_place": _drawer_place}[task]
    objects, script_fn, meta = builder(rng)
    script = _Script(objects, rng)
    T = script_fn(script)
    frames = script.render(T)
    _add_distractors(objects, frames, rng, meta["phrases"])
    frames = script_frames_with_static(objects, frames)
    cam = default_camera()
    ep = EpisodeRecord(
        task=task, instruction=meta["instruction"], camera=cam, objects=objects, frames=frames,
        targets=meta["targets"], segment_roles=meta["roles"], precedence=meta["precedence"],
        segments_per_stream=meta["m"], seed=seed,
    )
    ep.gripper_events = _gripper_events(script, meta["targets"])
    _check_visible(ep)
    return ep


def script_frames_with_static(objects, frames):
    if frames.shape[1] == len(objects):
        return frames
    T = frames.shape[0]
    out = np.zeros((T, len(objects), 6))
    out[:, :frames.shape[1]] = frames
    for o in objects[frames.shape[1]:]:
        out[:, o.id] = np.r_[o.position, 0.0, 0.0, o.yaw]
    return out


def _gripper_events(script: _Script, targets) -> list[tuple[int, str, int]]:
    events = []
    for arm, oid in enumerate(targets):
        ms = [m for m in script.motions if m.obj == oid]
        if ms:
            events.append((arm, "close", min(m.f0 for m in ms)))
            events.append((arm, "open", max(m.f1 for m in ms)))
    return events


def _add_distractors(objects: list[SceneObject], frames: np.ndarray, rng, phrases) -> None:
    n = int(rng.integers(2, 4))
    moving = [o for o in objects if np.ptp(frames[:, o.id, :3], axis=0).max() > 1e-9]
    taken = set(phrases)
    for _ in range(n):
        for attempt in range(1000):
            label = DISTRACTOR_LABELS[int(rng.integers(len(DISTRACTOR_LABELS)))]
            color = COLORS[int(rng.integers(len(COLORS)))]
            if (color, label) in taken:
                continue
            half = np.array(HALF[label])
            xy = _uniform_xy(rng, DISTRACTOR_REGION)
            cand = SceneObject(len(objects), label, color, np.r_[xy, half[2]], float(rng.uniform(-0.5, 0.5)), half)
            cbox = object_box(cand, np.r_[cand.position, 0, 0, cand.yaw])
            if any(_aabb_gap(cbox, object_box(o, np.r_[o.position, 0, 0, o.yaw])) < 0.03 for o in objects):
                continue
            if any(_aabb_gap(cbox, object_box(o, frames[f, o.id])) < 0.05
                   for o in moving for f in range(frames.shape[0])):
                continue
            objects.append(cand)
            taken.add((color, label))
            break
        else:
            raise PlacementError("could not place distractor after 1000 samples")


def _check_visible(ep: EpisodeRecord) -> None:
    for o in ep.objects:
        uv, z = ep.camera.project(object_box(o, ep.frames[0, o.id]).corners())
        if np.any(z <= 0) or not ep.camera.in_image(uv).all():
            raise PlacementError(f"object {o.id} not fully visible in frame 0")


def _obj(oid, label, color, xy, z=None, yaw=0.0, graspable=True):
    half = np.array(HALF[label])
    zc = half[2] if z is None else z
    return SceneObject(oid, label, color, np.r_[xy, zc], yaw, half, graspable, label in RECEPTACLES)


def _packing(rng):
    c = _pick_colors(rng, 3)
    l1, l2 = (ITEM_LABELS[int(i)] for i in rng.integers(0, len(ITEM_LABELS), 2))
    box_xy = np.array([rng.uniform(-0.02, 0.02), rng.uniform(0.40, 0.44)])
    o1 = _obj(0, l1, c[0], _uniform_xy(rng, LEFT_REGION), yaw=float(rng.uniform(-0.4, 0.4)))
    o2 = _obj(1, l2, c[1], _uniform_xy(rng, RIGHT_REGION), yaw=float(rng.uniform(-0.4, 0.4)))
    box = _obj(2, "box", c[2], box_xy, graspable=False)
    carry = 0.16

    def script(s: _Script) -> int:
        for o, sign in ((o1, -1), (o2, 1)):
            goal = box_xy + [sign * SLOT_OFFSET, 0.0]
            s.pick_place(o.id, goal, 2 * o.half_extents[2], carry + 2 * o.half_extents[2])
        return s.sync(0, 1) + 2 * HOLD

    meta = dict(
        instruction=f"pack the {c[0]} {l1} and the {c[1]} {l2} into the box",
        targets=(0, 1), roles={"pack_1": (1, 0), "pack_2": (2, 0)}, precedence=[], m=(1, 1),
        phrases=[(c[0], l1), (c[1], l2)],
    )
    return [o1, o2, box], script, meta


def _put_into_pot(rng):
    c = _pick_colors(rng, 3)
    l2 = ITEM_LABELS[int(rng.integers(len(ITEM_LABELS)))]
    pot_xy = np.array([rng.uniform(-0.03, 0.03), rng.uniform(0.40, 0.44)])
    pot = _obj(2, "pot", c[2], pot_xy, graspable=False)
    lid = _obj(0, "lid", c[0], pot_xy, z=2 * HALF["pot"][2] + HALF["lid"][2])
    item = _obj(1, l2, c[1], _uniform_xy(rng, RIGHT_REGION), yaw=float(rng.uniform(-0.4, 0.4)))
    park = np.array([rng.uniform(*LID_PARK_X), rng.uniform(*LID_PARK_Y)])
    lid_top_on = 2 * HALF["pot"][2] + 2 * HALF["lid"][2]

    def script(s: _Script) -> int:
        s.pick_place(lid.id, park, 2 * HALF["lid"][2], 0.22)
        s.wait(lid.id, HOLD)
        s.sync(0, 1)
        s.pick_place(item.id, pot_xy, 2 * item.half_extents[2], 0.23)
        s.wait(item.id, HOLD)
        s.sync(0, 1)
        s.pick_place(lid.id, pot_xy, lid_top_on, 0.22)
        return s.sync(0, 1) + 2 * HOLD

    meta = dict(
        instruction=f"remove the {c[0]} lid, put the {c[1]} {l2} into the pot and close it",
        targets=(0, 1), roles={"lid_off": (1, 0), "lid_on": (1, 1), "item_in": (2, 0)},
        precedence=[("lid_off", "item_in"), ("item_in", "lid_on")], m=(2, 1),
        phrases=[(c[0], "lid"), (c[1], l2)],
    )
    return [lid, item, pot], script, meta


def _pouring(rng):
    c = _pick_colors(rng, 2)
    work = np.array([rng.uniform(-0.02, 0.02), rng.uniform(0.34, 0.38)])
    cup = _obj(0, "cup", c[0], _uniform_xy(rng, LEFT_REGION))
    can = _obj(1, "can", c[1], _uniform_xy(rng, ((0.18, 0.30), (0.25, 0.40))))
    cup_h = 2 * HALF["cup"][2]
    can_h = 2 * HALF["can"][2]
    pour_grasp = np.r_[work + [0.11, 0.0], POUR_CLEARANCE]

    def script(s: _Script) -> int:
        s.pick_place(cup.id, work, cup_h, 0.16 + cup_h)
        s.wait(cup.id, HOLD)
        s.sync(0, 1)
        start = s.grasp[can.id].copy()
        s.wait(can.id, HOLD)
        s.set_xyz(can.id, [start[0], start[1], POUR_CLEARANCE], LIFT)
        s.wait(can.id, HOLD)
        s.set_xyz(can.id, pour_grasp, MOVE)
        s.wait(can.id, HOLD)
        tilted = s.grasp[can.id].copy()
        tilted[4] = POUR_ANGLE
        s.move(can.id, tilted, TILT, noisy=False)
        s.wait(can.id, 2 * HOLD)
        upright = tilted.copy()
        upright[4] = 0.0
        s.move(can.id, upright, TILT, noisy=False)
        s.wait(can.id, HOLD)
        s.set_xyz(can.id, [start[0], start[1], POUR_CLEARANCE], MOVE)
        s.wait(can.id, HOLD)
        s.set_xyz(can.id, [start[0], start[1], can_h], LOWER)
        s.wait(can.id, HOLD)
        s.sync(0, 1)
        s.pick_place(cup.id, cup.position[:2], cup_h, 0.16 + cup_h)
        return s.sync(0, 1) + 2 * HOLD

    meta = dict(
        instruction=f"bring the {c[0]} cup over and pour the {c[1]} can into it",
        targets=(0, 1), roles={"cup_to_work": (1, 0), "cup_return": (1, 1), "can_pour": (2, 0),
                               "can_return": (2, 1)},
        precedence=[("cup_to_work", "can_pour"), ("can_return", "cup_return")], m=(2, 2),
        phrases=[(c[0], "cup"), (c[1], "can")], work=work,
    )
    return [cup, can], script, meta


def _drawer_place(rng):
    c = _pick_colors(rng, 3)
    l2 = ITEM_LABELS[int(rng.integers(len(ITEM_LABELS)))]
    cab_xy = np.array([rng.uniform(-0.02, 0.02), rng.uniform(0.44, 0.48)])
    cab = _obj(2, "cabinet", c[2], cab_xy, graspable=False)
    drawer = _obj(0, "drawer", c[0], cab_xy, z=2 * HALF["cabinet"][2] + HALF["drawer"][2])
    item = _obj(1, l2, c[1], _uniform_xy(rng, RIGHT_REGION), yaw=float(rng.uniform(-0.4, 0.4)))

    def script(s: _Script) -> int:
        g = s.grasp[drawer.id].copy()
        s.wait(drawer.id, HOLD)
        s.set_xyz(drawer.id, [g[0], g[1] - DRAWER_SLIDE, g[2]], SLIDE)
        s.wait(drawer.id, HOLD)
        s.sync(0, 1)
        s.pick_place(item.id, cab_xy, 2 * item.half_extents[2], 0.25)
        s.wait(item.id, HOLD)
        s.sync(0, 1)
        s.set_xyz(drawer.id, g[:3], SLIDE)
        return s.sync(0, 1) + 2 * HOLD

    meta = dict(
        instruction=f"open the {c[0]} drawer, place the {c[1]} {l2} inside and close it",
        targets=(0, 1), roles={"drawer_open": (1, 0), "drawer_close": (1, 1), "item_place": (2, 0)},
        precedence=[("drawer_open", "item_place"), ("item_place", "drawer_close")], m=(2, 1),
        phrases=[(c[0], "drawer"), (c[1], l2)],
    )
    return [drawer, item, cab], script, meta


# ---------------------------------------------------------------- grounding


@dataclass(frozen=True)
class BBox:
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    object_id: int | None = None

    def as_array(self) -> np.ndarray:
        return np.array([self.u_min, self.v_min, self.u_max, self.v_max])

    @property
    def area(self) -> float:
        return max(0.0, self.u_max - self.u_min) * max(0.0, self.v_max - self.v_min)


class GroundingLexicon:
    """Exact (color, label) phrase matcher over the generator vocabulary."""

    def __init__(self, colors: Iterable[str] = COLORS, labels: Iterable[str] = LABELS):
        self.colors = tuple(colors)
        self.labels = tuple(labels)

    def phrases(self, instruction: str) -> list[tuple[str, str]]:
        words = re.findall(r"[a-z]+", instruction.lower())
        out = []
        for i, w in enumerate(words):
            if w in self.colors:
                if i + 1 >= len(words) or words[i + 1] not in self.labels:
                    nxt = words[i + 1] if i + 1 < len(words) else "<end>"
                    raise UnknownNoun(f"{w} {nxt}")
                out.append((w, words[i + 1]))
        return out

    def match(self, phrase: tuple[str, str], objects: list[SceneObject]) -> SceneObject:
        hits = [o for o in objects if (o.color, o.label) == phrase]
        if not hits:
            raise UnknownNoun(" ".join(phrase))
        if len(hits) > 1:
            raise AmbiguousGrounding(f"{len(hits)} objects match '{' '.join(phrase)}'")
        return hits[0]


def project_bbox(camera: CameraModel, obj: SceneObject, pose) -> BBox:
    uv, _ = camera.project(object_box(obj, pose).corners())
    return BBox(float(uv[:, 0].min()), float(uv[:, 1].min()), float(uv[:, 0].max()), float(uv[:, 1].max()), obj.id)


def ground_instruction(episode: EpisodeRecord, instruction: str | None = None,
                       lexicon: GroundingLexicon | None = None) -> tuple[BBox, BBox]:
    """Frame-0 pixel boxes of the two objects named in ``instruction``."""
    lexicon = lexicon or GroundingLexicon()
    instruction = episode.instruction if instruction is None else instruction
    phrases = lexicon.phrases(instruction)
    if len(phrases) != 2:
        raise GroundingError(f"expected two object phrases, found {len(phrases)}")
    objs = [lexicon.match(p, episode.objects) for p in phrases]
    b1, b2 = (project_bbox(episode.camera, o, episode.frames[0, o.id]) for o in objs)
    return b1, b2


# ---------------------------------------------------------------- flows


def query_grid(bbox: BBox, G: int) -> np.ndarray:
    """(G, G, 2) pixel grid uniformly inside ``bbox``; [i, j] = (u_j, v_i)."""
    if G < 2:
        raise ValueError("grid size must be >= 2")
    if bbox.area <= 0:
        raise ValueError("degenerate bounding box")
    s = (np.arange(G) + 0.5) / G
    u = bbox.u_min + s * (bbox.u_max - bbox.u_min)
    v = bbox.v_min + s * (bbox.v_max - bbox.v_min)
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def _match_object(episode: EpisodeRecord, bbox: BBox) -> int:
    if bbox.object_id is not None:
        return bbox.object_id
    best, best_iou = None, 0.0
    for o in episode.objects:
        b = project_bbox(episode.camera, o, episode.frames[0, o.id])
        iw = max(0.0, min(b.u_max, bbox.u_max) - max(b.u_min, bbox.u_min))
        ih = max(0.0, min(b.v_max, bbox.v_max) - max(b.v_min, bbox.v_min))
        inter = iw * ih
        iou = inter / (b.area + bbox.area - inter) if inter > 0 else 0.0
        if iou > best_iou:
            best, best_iou = o.id, iou
    if best is None:
        raise ValueError("bounding box does not overlap any object")
    return best


def grid_anchors(episode: EpisodeRecord, bbox: BBox, G: int) -> tuple[int, np.ndarray]:
    """Object id and (G, G, 3) query points in that object's local frame."""
    oid = _match_object(episode, bbox)
    obj = episode.object(oid)
    box = object_box(obj, episode.frames[0, oid])
    grid = query_grid(bbox, G)
    local = np.zeros((G, G, 3))
    for i in range(G):
        for j in range(G):
            o, d = episode.camera.ray(grid[i, j])
            hit = box.ray_hit(o, d)
            if hit is None:
                hit = float(np.dot(box.center - o, d))
            p = o + hit * d
            local[i, j] = box.R.T @ (p - box.center)
    return oid, local


def anchor_world(episode: EpisodeRecord, oid: int, local: np.ndarray, frame: int) -> np.ndarray:
    box = object_box(episode.object(oid), episode.frames[frame, oid])
    return local @ box.R.T + box.center


def track_flows(episode: EpisodeRecord, O1: BBox, O2: BBox, G: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth (3, T, G, G) flows: normalised (u, v) and visibility."""
    return tuple(_track_one(episode, b, G) for b in (O1, O2))


def _track_one(episode: EpisodeRecord, bbox: BBox, G: int) -> np.ndarray:
    cam = episode.camera
    oid, local = grid_anchors(episode, bbox, G)
    F = np.zeros((3, episode.T, G, G))
    last = None
    for t in range(episode.T):
        uv, z = cam.project(anchor_world(episode, oid, local, t))
        norm = np.stack([uv[..., 0] / cam.width, uv[..., 1] / cam.height])
        vis = (z > 0) & cam.in_image(uv) & (not episode.occluded(oid, t))
        if last is None:
            last = norm.copy()
        held = np.where(vis[None], norm, last)
        F[:2, t] = held
        F[2, t] = vis.astype(float)
        last = held
    return F


# ---------------------------------------------------------------- depth


FAR_DEPTH = 10.0


def render_depth(episode: EpisodeRecord, frame: int, pixel) -> float:
    """Camera-frame depth of the first surface (object or table) hit by the pixel ray."""
    cam = episode.camera
    if not cam.in_image(np.asarray(pixel)):
        raise ValueError("pixel outside image")
    o, d = cam.ray(pixel)
    best = np.inf
    if d[2] < -1e-12:
        best = -o[2] / d[2]
    for box in episode.boxes(frame):
        hit = box.ray_hit(o, d)
        if hit is not None and hit < best:
            best = hit
    if not np.isfinite(best):
        return FAR_DEPTH
    return float(cam.to_camera(o + best * d)[2])


# ---------------------------------------------------------------- files


def write_episodes(path: str | Path, episodes: Iterable[EpisodeRecord]) -> None:
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_dict(), sort_keys=True, separators=(",", ":")) + "\n")


def read_episodes(path: str | Path) -> list[EpisodeRecord]:
    with open(path) as fh:
        return [EpisodeRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


FLOW_MAGIC = b"SFDF"


def write_flows(path: str | Path, F1: np.ndarray, F2: np.ndarray) -> None:
    Path(path).write_bytes(flows_to_bytes(F1, F2))


def flows_to_bytes(F1: np.ndarray, F2: np.ndarray) -> bytes:
    if F1.shape != F2.shape or F1.ndim != 4 or F1.shape[0] != 3:
        raise ValueError("flows must both have shape (3, T, G, G)")
    _, T, G, _ = F1.shape
    data = np.stack([F1, F2]).astype("<f4").tobytes()
    return FLOW_MAGIC + struct.pack("<IIII", 1, 2, T, G) + data


def read_flows(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    return flows_from_bytes(Path(path).read_bytes())


def flows_from_bytes(buf: bytes) -> tuple[np.ndarray, np.ndarray]:
    if buf[:4] != FLOW_MAGIC:
        raise ValueError("not an SFDF flow file")
    version, streams, T, G = struct.unpack("<IIII", buf[4:20])
    if version != 1 or streams != 2:
        raise ValueError(f"unsupported flow file (version {version}, streams {streams})")
    arr = np.frombuffer(buf[20:], dtype="<f4")
    if arr.size != 2 * 3 * T * G * G:
        raise ValueError("flow file size mismatch")
    arr = arr.reshape(2, 3, T, G, G).astype(np.float64)
    return arr[0], arr[1]
