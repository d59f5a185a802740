"""Kinematic two-arm simulator: point grippers, rigid grasps, proximity-based collision events."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .allocator import Schedule, Segment
from .geometry import OrientedBox, box_distance, link_box_distance, matrix_to_rpy, rpy_to_matrix, segment_distances
from .lift3d import Trajectory3D
from .robot import ARM_BASES, ARM_HOMES, REACH, V_MAX
from .scene import RECEPTACLES, EpisodeRecord, SceneObject

GRASP_EPS = 0.01
D_COLLIDE = 0.02
CAPSULE_CELL = 0.01
DT = 0.02
POUR_TILT = 0.8
MAX_TICKS_PER_SLOT = 200_000
OBJECT_MATCH = 0.05  # how far a trajectory start may sit from the object it moves


@dataclass
class ArmState:
    base: np.ndarray
    gripper: np.ndarray
    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    closed: bool = False
    attached: int | None = None
    v_max: float = V_MAX
    reach: float = REACH
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))  # attached centre in gripper frame


@dataclass
class WorldState:
    task: str
    objects: list[SceneObject]
    positions: np.ndarray  # (n, 3) object centres
    rotations: np.ndarray  # (n, 3, 3)
    arms: list[ArmState]
    tick: int = 0
    events: list[dict] = field(default_factory=list)
    contacts: set = field(default_factory=set)

    @classmethod
    def from_episode(cls, ep: EpisodeRecord, v_max: float = V_MAX) -> "WorldState":
        f0 = ep.frames[0]
        arms = [ArmState(ARM_BASES[i].copy(), ARM_HOMES[i].copy(), v_max=v_max) for i in range(2)]
        return cls(ep.task, ep.objects, f0[:, :3].copy(), np.array([rpy_to_matrix(*p[3:]) for p in f0]), arms)

    def pose(self, oid: int) -> np.ndarray:
        return np.r_[self.positions[oid], matrix_to_rpy(self.rotations[oid])]

    def box(self, oid: int) -> OrientedBox:
        return OrientedBox(self.positions[oid], self.rotations[oid], self.objects[oid].half_extents)

    def grasp_point(self, oid: int) -> np.ndarray:
        return self.positions[oid] + self.rotations[oid] @ [0, 0, self.objects[oid].half_extents[2]]

    def log(self, kind: str, **data) -> None:
        self.events.append({"tick": self.tick, "type": kind, "data": data})

    def snapshot(self) -> list[list[float]]:
        return self.positions.tolist()


@dataclass(frozen=True)
class Command:
    target: np.ndarray | None = None
    R: np.ndarray | None = None
    grip: str | None = None  # "open", "close" or None


IDLE = Command()


# ---------------------------------------------------------------- stepping


def _clamp_reach(arm: ArmState, p: np.ndarray) -> np.ndarray:
    d = p - arm.base
    n = float(np.linalg.norm(d))
    return p if n <= arm.reach else arm.base + d * (arm.reach / n)


def _tilt(R: np.ndarray) -> float:
    return math.acos(max(-1.0, min(1.0, float(R[2, 2]))))


def step(world: WorldState, commands: list[Command], dt: float = DT) -> WorldState:
    """Advance one tick in place and return the world."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    for i, (arm, cmd) in enumerate(zip(world.arms, commands)):
        if cmd.target is not None:
            _move(arm, cmd, dt)
        if arm.attached is not None:
            oid = arm.attached
            was = _tilt(world.rotations[oid])
            world.rotations[oid] = arm.R
            world.positions[oid] = arm.gripper + arm.R @ arm.offset
            now = _tilt(arm.R)
            if was <= POUR_TILT < now:
                world.log("pour_start", arm=i, object=oid, positions=world.snapshot())
            elif now <= POUR_TILT < was:
                world.log("pour_end", arm=i, object=oid)
        if cmd.grip == "close" and not arm.closed:
            arm.closed = True
            _try_attach(world, i)
        elif cmd.grip == "open" and arm.closed:
            arm.closed = False
            if arm.attached is not None:
                world.log("release", arm=i, object=arm.attached, positions=world.snapshot())
                arm.attached = None
    world.tick += 1
    _check_collisions(world)
    return world


def _move(arm: ArmState, cmd: Command, dt: float) -> None:
    target = _clamp_reach(arm, np.asarray(cmd.target, float))
    dp = target - arm.gripper
    lever = float(np.linalg.norm(arm.offset)) if arm.attached is not None else 0.0
    rotvec = np.zeros(3)
    if cmd.R is not None:
        rotvec = Rotation.from_matrix(arm.R.T @ cmd.R).as_rotvec()
    cost = float(np.linalg.norm(dp)) + lever * float(np.linalg.norm(rotvec))
    budget = arm.v_max * dt
    if cost <= budget:
        arm.gripper = target
        if cmd.R is not None:
            arm.R = np.array(cmd.R, dtype=float)
        return
    frac = budget / cost
    arm.gripper = arm.gripper + frac * dp
    if cmd.R is not None:
        arm.R = arm.R @ Rotation.from_rotvec(frac * rotvec).as_matrix()


def _try_attach(world: WorldState, i: int) -> None:
    arm = world.arms[i]
    held = {a.attached for a in world.arms}
    best = None
    for o in world.objects:
        if not o.graspable or o.id in held:
            continue
        d = float(np.linalg.norm(world.grasp_point(o.id) - arm.gripper))
        if d <= GRASP_EPS and (best is None or d < best[0]):
            best = (d, o.id)
    if best is None:
        world.log("grasp_miss", arm=i, gripper=arm.gripper.tolist())
        return
    oid = best[1]
    arm.attached = oid
    arm.R = world.rotations[oid].copy()
    arm.offset = arm.R.T @ (world.positions[oid] - arm.gripper)
    world.log("grasp", arm=i, object=oid, positions=world.snapshot())


def _contained(world: WorldState, oid: int) -> bool:
    """Receptacles and anything resting inside or on one are not obstacles."""
    if world.objects[oid].label in RECEPTACLES:
        return True
    p = world.positions[oid]
    for o in world.objects:
        if o.label in RECEPTACLES:
            c, h = world.positions[o.id], o.half_extents
            if abs(p[0] - c[0]) <= h[0] and abs(p[1] - c[1]) <= h[1]:
                return True
    return False


def _check_collisions(world: WorldState) -> None:
    arms = world.arms
    attached = {a.attached: i for i, a in enumerate(arms) if a.attached is not None}
    boxes = {oid: world.box(oid) for oid in attached}
    found: dict[tuple, float] = {}
    d = float(segment_distances(arms[0].base, arms[0].gripper, arms[1].base, arms[1].gripper))
    if d < D_COLLIDE:
        found[("link0", "link1")] = d
    for oid, owner in attached.items():
        other = 1 - owner
        d = link_box_distance(arms[other].base, arms[other].gripper, boxes[oid], cell=CAPSULE_CELL)
        if d < D_COLLIDE:
            found[(f"link{other}", f"obj{oid}")] = d
    ids = sorted(attached)
    if len(ids) == 2:
        d = box_distance(boxes[ids[0]], boxes[ids[1]], CAPSULE_CELL)
        if d < D_COLLIDE:
            found[(f"obj{ids[0]}", f"obj{ids[1]}")] = d
    if ids:
        for o in world.objects:
            if o.id in attached or _contained(world, o.id):
                continue
            sbox = world.box(o.id)
            for oid in ids:
                d = box_distance(boxes[oid], sbox, CAPSULE_CELL)
                if d < D_COLLIDE:
                    found[tuple(sorted((f"obj{oid}", f"obj{o.id}")))] = d
    for pair in sorted(set(found) - world.contacts):
        world.log("collision", pair=list(pair), distance=found[pair])
    world.contacts = set(found)


# ---------------------------------------------------------------- schedule execution


class UnknownSegment(KeyError):
    pass


def _stream_object(world: WorldState, tr: Trajectory3D) -> int | None:
    """Graspable object whose centre is nearest the trajectory start."""
    best = None
    for o in world.objects:
        if not o.graspable:
            continue
        d = float(np.linalg.norm(world.positions[o.id] - tr.positions[0]))
        if d <= OBJECT_MATCH and (best is None or d < best[0]):
            best = (d, o.id)
    return None if best is None else best[1]


def _segment_plan(world: WorldState, arm_idx: int, seg: Segment, tr: Trajectory3D, nxt: Segment | None,
                  oid: int | None) -> list[Command]:
    if not seg.carry:
        return []
    arm = world.arms[arm_idx]
    plan: list[Command] = []
    holding = arm.attached is not None
    if not holding and oid is not None and oid not in {a.attached for a in world.arms}:
        plan.append(Command(world.grasp_point(oid), None))
        plan.append(Command(grip="close"))
        holding = True
    hz = world.objects[oid].half_extents[2] if (holding and oid is not None) else 0.0
    for w in tr.waypoints[seg.start:seg.end]:
        R = rpy_to_matrix(*w[3:])
        plan.append(Command(w[:3] + R @ [0, 0, hz], R if holding else None))
    if nxt is None or not nxt.carry:
        plan.append(Command(grip="open"))
        plan.append(Command(ARM_HOMES[arm_idx].copy(), None))
    return plan


def execute_schedule(world: WorldState, schedule: Schedule, segments: list[Segment],
                     trajectories: dict[int, Trajectory3D], dt: float = DT) -> tuple[WorldState, list[dict]]:
    """Run slots in order; a slot ends once every member's plan is exhausted."""
    by_id = {s.id: s for s in segments}
    for slot in schedule.slots:
        for sid in slot:
            if sid is not None and sid not in by_id:
                raise UnknownSegment(f"schedule references unknown segment {sid}")
    nxt = {}
    for s in segments:
        later = [t for t in segments if t.stream == s.stream and t.index == s.index + 1]
        nxt[s.id] = later[0] if later else None
    objects = {s: _stream_object(world, tr) for s, tr in trajectories.items()}
    for k, slot in enumerate(schedule.slots):
        members = [sid for sid in slot if sid is not None]
        world.log("slot_start", slot=k, segments=members)
        plans = [[], []]
        for arm_idx, sid in enumerate(slot):
            if sid is not None:
                seg = by_id[sid]
                plans[arm_idx] = _segment_plan(world, arm_idx, seg, trajectories[seg.stream], nxt[sid],
                                               objects[seg.stream])
        ticks = 0
        while plans[0] or plans[1]:
            cmds = [p[0] if p else IDLE for p in plans]
            step(world, cmds, dt)
            for arm_idx, p in enumerate(plans):
                if p and (p[0].target is None or _reached(world.arms[arm_idx], p[0])):
                    p.pop(0)
            ticks += 1
            if ticks > MAX_TICKS_PER_SLOT:
                raise RuntimeError(f"slot {k} did not finish")
        world.log("slot_end", slot=k)
    return world, world.events


def _reached(arm: ArmState, cmd: Command) -> bool:
    if not np.array_equal(arm.gripper, _clamp_reach(arm, np.asarray(cmd.target, float))):
        return False
    return cmd.R is None or np.array_equal(arm.R, cmd.R)


def write_events(path: str | Path, events: list[dict]) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True, separators=(",", ":")) + "\n")


def read_events(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def collision_count(events: list[dict]) -> int:
    return sum(e["type"] == "collision" for e in events)


# ---------------------------------------------------------------- task goals

POSE_TOL = 0.02


@dataclass(frozen=True)
class TaskGoal:
    task: str
    inside: tuple[tuple[int, int], ...] = ()  # (object, receptacle)
    final: tuple[tuple[int, tuple[float, float, float]], ...] = ()  # (object, position)
    release_checks: tuple[tuple[int, int, tuple[float, float], float], ...] = ()
    # (released object, other object, reference xy, minimum xy distance) at that object's last release
    pour: tuple[int, int, tuple[float, float]] | None = None  # (poured object, container, work xy)

    @classmethod
    def from_episode(cls, ep: EpisodeRecord) -> "TaskGoal":
        a, b = ep.targets
        last = ep.frames[-1]
        final = tuple((oid, tuple(map(float, last[oid, :3]))) for oid in (a, b))
        if ep.task == "packing":
            return cls(ep.task, inside=((a, 2), (b, 2)))
        if ep.task == "put_into_pot":
            pot_xy = tuple(map(float, ep.frames[0, 2, :2]))
            return cls(ep.task, inside=((b, 2),), final=final[:1],
                       release_checks=((b, a, pot_xy, float(ep.objects[2].half_extents[0])),))
        if ep.task == "drawer_place":
            closed = tuple(map(float, ep.frames[0, a, :2]))
            return cls(ep.task, inside=((b, 2),), final=final[:1], release_checks=((b, a, closed, 0.12),))
        if ep.task == "pouring":
            k = int(np.argmax(np.abs(ep.frames[:, b, 4])))
            return cls(ep.task, final=final, pour=(b, a, tuple(map(float, ep.frames[k, a, :2]))))
        raise ValueError(f"unknown task template {ep.task!r}")


def evaluate_task(world: WorldState, events: list[dict], goal: TaskGoal) -> dict:
    if goal.task != world.task:
        raise ValueError(f"goal is for {goal.task!r} but the world runs {world.task!r}")
    reasons = []
    for oid, rec in goal.inside:
        p, c, h = world.positions[oid], world.positions[rec], world.objects[rec].half_extents
        if not (abs(p[0] - c[0]) <= h[0] and abs(p[1] - c[1]) <= h[1] and p[2] <= c[2] + h[2]):
            reasons.append(f"object {oid} is not inside object {rec}")
    for oid, target in goal.final:
        if np.linalg.norm(world.positions[oid] - target) > POSE_TOL:
            reasons.append(f"object {oid} is not at its goal pose")
    for oid, other, ref, min_dist in goal.release_checks:
        rel = [e for e in events if e["type"] == "release" and e["data"]["object"] == oid]
        if not rel:
            reasons.append(f"object {oid} was never released")
            continue
        xy = np.array(rel[-1]["data"]["positions"][other][:2])
        if np.linalg.norm(xy - ref) < min_dist:
            reasons.append(f"ordering: object {oid} released before object {other} was moved clear")
    if goal.pour is not None:
        src, container, work = goal.pour
        pours = [e for e in events if e["type"] == "pour_start" and e["data"]["object"] == src]
        if not pours:
            reasons.append(f"object {src} never poured")
        else:
            xy = np.array(pours[0]["data"]["positions"][container][:2])
            if np.linalg.norm(xy - work) > POSE_TOL:
                reasons.append(f"ordering: pour began before object {container} reached the work position")
    n = collision_count(events)
    if n:
        reasons.append(f"{n} collision event(s)")
    return {"success": not reasons, "reasons": reasons}
