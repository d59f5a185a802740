import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import dualflow.dualsim as sim
from dualflow.allocator import (
    PrecedenceDag, Schedule, Segment, assign_arms, detect_conflicts, role_precedence, schedule_bnb,
    schedule_exhaustive, schedule_violations, segment_streams,
)
from dualflow.dualsim import (
    ArmState, Command, IDLE, TaskGoal, UnknownSegment, WorldState, collision_count, evaluate_task,
    execute_schedule, read_events, step, write_events,
)
from dualflow.geometry import min_seg_distance
from dualflow.lift3d import AnchorDepth, Trajectory3D, initial_pose_of, lift_trajectory
from dualflow.robot import ARM_BASES, ARM_HOMES
from dualflow.scene import TEMPLATES, generate_episode, ground_instruction, track_flows


def empty_world():
    arms = [ArmState(ARM_BASES[i].copy(), ARM_HOMES[i].copy()) for i in range(2)]
    return WorldState("packing", [], np.zeros((0, 3)), np.zeros((0, 3, 3)), arms)


def lifted(ep):
    boxes = ground_instruction(ep)
    flows = track_flows(ep, *boxes, G=8)
    return [lift_trajectory(flows[s], ep.camera, AnchorDepth(ep, boxes[s], 8),
                            reference=initial_pose_of(ep, boxes[s]), stream=s + 1) for s in range(2)]


def planned(ep, schedule_fn=schedule_bnb):
    trs = lifted(ep)
    asg = assign_arms(trs)
    segs = segment_streams(trs, ep.segments_per_stream)
    dag = PrecedenceDag.build(segs, role_precedence(segs, ep.segment_roles, ep.precedence))
    g = detect_conflicts(segs, trs, 0.10, asg)
    return trs, asg, segs, dag, g, schedule_fn(segs, g, dag, asg)


# ---------------------------------------------------------------- distance kernel


def test_segment_distance_examples():
    assert min_seg_distance([0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0]) == pytest.approx(1.0)
    assert min_seg_distance([0, -1, 0], [0, 1, 0], [-1, 0, 0], [1, 0, 0]) == 0.0
    assert min_seg_distance([0, 0, 0], [1, 0, 0], [0.5, 1, 1], [0.5, 1, -1]) == pytest.approx(1.0, abs=1e-12)


def test_skew_distance_matches_dense_grid():
    p1, q1 = np.zeros(3), np.array([1.0, 0, 0])
    p2, q2 = np.array([0.5, 1, 1]), np.array([0.5, 1, -1])
    t = np.linspace(0, 1, 10_001)
    # coordinates separate, so the grid minimum factorises per axis
    a = p1 + t[:, None] * (q1 - p1)
    b = p2 + t[:, None] * (q2 - p2)
    dx = np.min(np.abs(a[:, 0][:, None] - b[:, 0][None]))
    dz = np.min(np.abs(a[:, 2][:, None] - b[:, 2][None]))
    oracle = np.sqrt(dx ** 2 + 1.0 + dz ** 2)
    assert abs(min_seg_distance(p1, q1, p2, q2) - oracle) < 1e-3


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2, 2, allow_nan=False), min_size=12, max_size=12))
def test_segment_distance_symmetric(v):
    p1, q1, p2, q2 = np.array(v).reshape(4, 3)
    d = min_seg_distance(p1, q1, p2, q2)
    assert d >= 0
    assert d == pytest.approx(min_seg_distance(p2, q2, p1, q1), abs=1e-12)
    assert d == pytest.approx(min_seg_distance(q1, p1, q2, p2), abs=1e-12)


# ---------------------------------------------------------------- stepping


def test_idle_step_only_advances_tick():
    ep = generate_episode("packing", 0)
    w = WorldState.from_episode(ep)
    before = (w.positions.copy(), w.rotations.copy(), [a.gripper.copy() for a in w.arms])
    step(w, [IDLE, IDLE], 0.1)
    assert w.tick == 1 and w.events == []
    assert np.array_equal(w.positions, before[0]) and np.array_equal(w.rotations, before[1])
    assert all(np.array_equal(a.gripper, g) for a, g in zip(w.arms, before[2]))


def test_advance_is_exactly_speed_times_dt():
    w = empty_world()
    w.arms[0].reach = 10.0
    start = w.arms[0].gripper.copy()
    direction = np.array([0.6, 0.0, 0.8])
    step(w, [Command(start + direction), IDLE], 0.1)
    moved = w.arms[0].gripper - start
    assert np.linalg.norm(moved) == pytest.approx(0.05, abs=1e-12)
    assert np.allclose(moved / np.linalg.norm(moved), direction)


def test_target_beyond_reach_is_clamped():
    w = empty_world()
    for _ in range(200):
        step(w, [Command(np.array([-5.0, 0.4, 0.4])), IDLE], 0.1)
    assert np.linalg.norm(w.arms[0].gripper - w.arms[0].base) == pytest.approx(w.arms[0].reach)


def test_rejects_non_positive_dt():
    with pytest.raises(ValueError):
        step(empty_world(), [IDLE, IDLE], 0.0)


def test_grasp_within_tolerance_and_release():
    ep = generate_episode("packing", 0)
    w = WorldState.from_episode(ep)
    oid = ep.targets[0]
    gp = w.grasp_point(oid)
    w.arms[0].gripper = gp + [0, 0, 0.009]
    step(w, [Command(grip="close"), IDLE])
    assert w.arms[0].attached == oid and w.events[-1]["type"] == "grasp"
    step(w, [Command(gp + [0, 0, 0.1]), IDLE])
    assert w.positions[oid][2] > ep.frames[0, oid, 2]
    step(w, [Command(grip="open"), IDLE])
    assert w.arms[0].attached is None and w.events[-1]["type"] == "release"
    w.arms[1].gripper = w.grasp_point(ep.targets[1]) + [0, 0, 0.02]
    step(w, [IDLE, Command(grip="close")])
    assert w.arms[1].attached is None and w.events[-1]["type"] == "grasp_miss"


def test_grippers_through_same_point_collide():
    w = empty_world()
    meet = np.array([0.0, 0.35, 0.3])
    for _ in range(100):
        step(w, [Command(meet), Command(meet)])
    kinds = [e["type"] for e in w.events]
    assert kinds.count("collision") == 1  # logged once at contact onset
    assert w.events[0]["data"]["pair"] == ["link0", "link1"]


# ---------------------------------------------------------------- schedule execution


def test_empty_schedule_changes_nothing():
    ep = generate_episode("packing", 1)
    w = WorldState.from_episode(ep)
    execute_schedule(w, Schedule((), {}), [], {})
    assert w.events == [] and np.array_equal(w.positions, ep.frames[0][:, :3])


def test_unknown_segment_rejected():
    w = empty_world()
    with pytest.raises(UnknownSegment):
        execute_schedule(w, Schedule(((3, None),), {3: 1.0}), [], {})


def test_ground_truth_packing_run():
    ep = generate_episode("packing", 0)
    trs, asg, segs, dag, g, sched = planned(ep)
    w, events = execute_schedule(WorldState.from_episode(ep), sched, segs, {1: trs[0], 2: trs[1]})
    assert collision_count(events) == 0
    box = w.box(2)
    for oid in ep.targets:
        p = w.positions[oid]
        assert abs(p[0] - box.center[0]) <= box.half[0] and abs(p[1] - box.center[1]) <= box.half[1]
    assert evaluate_task(w, events, TaskGoal.from_episode(ep)) == {"success": True, "reasons": []}
    kinds = [e["type"] for e in events]
    assert kinds.count("grasp") == 2 and kinds.count("release") == 2
    assert kinds.count("slot_start") == len(sched.slots) == kinds.count("slot_end")


def test_unallocated_conflicting_pair_collides():
    w = empty_world()
    a = Trajectory3D(np.c_[np.linspace([-0.3, 0.3, 0.3], [0.3, 0.3, 0.3], 13), np.zeros((13, 3))],
                     np.arange(13) * 0.1, 1)
    b = Trajectory3D(np.c_[np.linspace([0.3, 0.3, 0.3], [-0.3, 0.3, 0.3], 13), np.zeros((13, 3))],
                     np.arange(13) * 0.1, 2)
    segs = segment_streams([a, b], (1, 1))
    g = detect_conflicts(segs, [a, b], 0.1, {1: 0, 2: 1})
    assert g.conflicts(0, 1)
    _, events = execute_schedule(w, Schedule(((0, 1),), {0: 1.0, 1: 1.0}), segs, {1: a, 2: b})
    assert collision_count(events) >= 1
    serial = schedule_exhaustive(segs, g, PrecedenceDag.build(segs), {1: 0, 2: 1})
    assert len(serial.slots) == 2


def test_execution_is_deterministic(tmp_path):
    ep = generate_episode("pouring", 3)
    trs, asg, segs, dag, g, sched = planned(ep)
    logs = []
    for k in range(2):
        _, events = execute_schedule(WorldState.from_episode(ep), sched, segs, {1: trs[0], 2: trs[1]})
        write_events(tmp_path / f"{k}.jsonl", events)
        logs.append((tmp_path / f"{k}.jsonl").read_bytes())
    assert logs[0] == logs[1]
    assert read_events(tmp_path / "0.jsonl") == [dict(e) for e in read_events(tmp_path / "1.jsonl")]


def test_attached_objects_never_teleport(monkeypatch):
    ep = generate_episode("pouring", 1)
    trs, asg, segs, dag, g, sched = planned(ep)
    moves = []
    real_step = sim.step

    def recording(world, commands, dt=sim.DT):
        before = world.positions.copy()
        out = real_step(world, commands, dt)
        moves.append(np.linalg.norm(world.positions - before, axis=1).max())
        for arm in world.arms:
            assert np.linalg.norm(arm.gripper - arm.base) <= arm.reach + 1e-12
        return out

    monkeypatch.setattr(sim, "step", recording)
    execute_schedule(WorldState.from_episode(ep), sched, segs, {1: trs[0], 2: trs[1]})
    assert moves and max(moves) <= 0.5 * sim.DT + 1e-9


# ---------------------------------------------------------------- goals


def test_packing_goal_predicates():
    ep = generate_episode("packing", 2)
    w = WorldState.from_episode(ep)
    goal = TaskGoal.from_episode(ep)
    res = evaluate_task(w, [], goal)
    assert not res["success"] and len(res["reasons"]) == 2
    for oid in ep.targets:
        w.positions[oid] = w.positions[2] + [0, 0, -0.01]
    assert evaluate_task(w, [], goal) == {"success": True, "reasons": []}
    collided = [{"tick": 3, "type": "collision", "data": {"pair": ["link0", "link1"], "distance": 0.0}}]
    res = evaluate_task(w, collided, goal)
    assert not res["success"] and res["reasons"] == ["1 collision event(s)"]


def test_pour_before_placement_is_an_ordering_failure():
    ep = generate_episode("pouring", 0)
    goal = TaskGoal.from_episode(ep)
    w = WorldState.from_episode(ep)
    cup, can = ep.targets
    last = ep.frames[-1]
    w.positions[cup] = last[cup, :3]
    w.positions[can] = last[can, :3]
    early = ep.frames[0][:, :3].tolist()  # cup still at its start when pouring begins
    events = [{"tick": 1, "type": "pour_start", "data": {"arm": 1, "object": can, "positions": early}}]
    res = evaluate_task(w, events, goal)
    assert not res["success"] and any(r.startswith("ordering") for r in res["reasons"])
    placed = early
    placed[cup] = [*goal.pour[2], 0.0]
    events[0]["data"]["positions"] = placed
    assert evaluate_task(w, events, goal)["success"]


def test_template_mismatch_raises():
    w = WorldState.from_episode(generate_episode("packing", 0))
    with pytest.raises(ValueError):
        evaluate_task(w, [], TaskGoal.from_episode(generate_episode("pouring", 0)))


@pytest.mark.parametrize("task", TEMPLATES)
def test_valid_schedules_are_collision_free(task):
    for seed in range(10):
        ep = generate_episode(task, seed)
        trs, asg, segs, dag, g, sched = planned(ep)
        assert schedule_violations(sched.slots, segs, g.pairs(), dag.pairs(), asg) == []
        w, events = execute_schedule(WorldState.from_episode(ep), sched, segs, {1: trs[0], 2: trs[1]})
        assert collision_count(events) == 0, (task, seed, [e for e in events if e["type"] == "collision"])
        assert evaluate_task(w, events, TaskGoal.from_episode(ep))["success"], (task, seed)
