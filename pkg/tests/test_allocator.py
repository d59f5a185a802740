import itertools
import json
import random
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualflow.allocator import (
    ConflictGraph, Infeasible, PrecedenceDag, Schedule, Segment, VlmConfig, assign_arms, detect_conflicts,
    render_overlay, schedule_bnb, schedule_exhaustive, schedule_greedy, schedule_violations, segment_polyline,
    segment_streams, segment_trajectory, vlm_allocate,
)
from dualflow.allocator.segments import quantize_duration
from dualflow.lift3d import Trajectory3D
from dualflow.scene import default_camera

from scheduling_cases import random_instance, seg
from vlm_stub import KINDS, StubServer, behaviour, pouring_instance


def traj(points, dt=0.1, stream=1):
    pts = np.asarray(points, float)
    return Trajectory3D(np.c_[pts, np.zeros((len(pts), 3))], np.arange(len(pts)) * dt, stream)


# ---------------------------------------------------------------- segmentation


def test_straight_line_is_one_segment():
    segs = segment_trajectory(traj(np.outer(np.linspace(0, 0.5, 32), [1, 0, 0])))
    assert [(s.start, s.end) for s in segs] == [(0, 32)]
    assert segs[0].carry


def test_pause_in_the_middle_splits_there():
    x = np.r_[np.linspace(0, 0.3, 14), np.full(5, 0.3), np.linspace(0.3, 0.6, 14)[1:]]
    tr = traj(np.c_[x, np.zeros((len(x), 2))])
    segs = segment_trajectory(tr)
    assert len(segs) == 2
    cut = segs[1].start
    assert 14 <= cut <= 18  # inside the stationary run of waypoints 13..17


def test_turn_is_a_breakpoint():
    pts = [[0.02 * k, 0, 0] for k in range(10)] + [[0.18, 0.02 * k, 0] for k in range(1, 10)]
    segs = segment_trajectory(traj(pts))
    assert [(s.start, s.end) for s in segs] == [(0, 10), (10, 19)]


def test_explicit_count_partitions_range():
    rng = np.random.default_rng(0)
    tr = traj(np.cumsum(rng.normal(size=(32, 3)) * 0.01, axis=0))
    segs = segment_trajectory(tr, 3)
    assert len(segs) == 3
    assert segs[0].start == 0 and segs[-1].end == 32
    assert all(a.end == b.start for a, b in zip(segs, segs[1:]))
    for bad in (0, 32):
        with pytest.raises(ValueError):
            segment_trajectory(tr, bad)


def test_stationary_slice_is_not_carry():
    tr = traj([[0, 0, 0]] * 5 + [[0.01 * k, 0, 0] for k in range(1, 10)])
    segs = segment_trajectory(tr, 2)
    assert [s.carry for s in segs] == [False, True]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 40), st.data())
def test_segments_always_partition(seed, P, data):
    rng = np.random.default_rng(seed)
    tr = traj(np.cumsum(rng.normal(size=(P, 3)) * rng.uniform(0, 0.02), axis=0))
    m = data.draw(st.one_of(st.none(), st.integers(1, P - 1)))
    segs = segment_trajectory(tr, m)
    assert segs[0].start == 0 and segs[-1].end == P
    assert all(a.end == b.start and a.start < a.end for a, b in zip(segs, segs[1:]))
    assert all(s.duration > 0 and (s.duration * 64).is_integer() for s in segs)
    if m is None:
        assert 1 <= len(segs) <= 6
    else:
        assert len(segs) == m


def test_duration_quantum():
    assert quantize_duration(0.0) == 2 ** -6
    assert quantize_duration(1.0) == 1.0
    assert quantize_duration(1.0001) == 1.0 + 2 ** -6


# ---------------------------------------------------------------- conflicts


def _two_lines(offset):
    a = traj([[0, 0, 0], [1, 0, 0]], stream=1)
    b = traj([[0, offset, 0], [1, offset, 0]], stream=2)
    segs = segment_streams([a, b], (1, 1))
    return segs, [a, b]


def test_conflict_distance_rules():
    segs, trs = _two_lines(1.0)
    assert detect_conflicts(segs, trs, 0.1).edges == {}
    segs, trs = _two_lines(0.1)
    assert detect_conflicts(segs, trs, 0.1).edges == {}  # strict inequality
    segs, trs = _two_lines(0.0999)
    assert detect_conflicts(segs, trs, 0.1).edges == {(0, 1): pytest.approx(0.0999)}
    a = traj([[0, -1, 0], [0, 1, 0]], stream=1)
    b = traj([[-1, 0, 0], [1, 0, 0]], stream=2)
    g = detect_conflicts(segment_streams([a, b], (1, 1)), [a, b], 0.1)
    assert g.edges == {(0, 1): 0.0}


def test_same_stream_never_conflicts():
    tr = traj(np.outer(np.linspace(0, 0.01, 10), [1, 0, 0]))
    segs = segment_trajectory(tr, 3)
    assert detect_conflicts(segs, {1: tr}, 1.0).edges == {}


def test_link_corridors_add_conflicts():
    # waypoints far apart, but one arm's link passes over the other's path
    a = traj([[-0.1, 0.5, 0.0], [-0.1, 0.6, 0.0]], stream=1)
    b = traj([[0.2, 0.55, 0.05], [0.25, 0.55, 0.05]], stream=2)
    segs = segment_streams([a, b], (1, 1))
    bases = np.array([[-0.5, 0.55, 0.0], [0.5, 0.55, 0.0]])
    assert detect_conflicts(segs, [a, b], 0.1).edges == {}
    assert detect_conflicts(segs, [a, b], 0.1, {1: 1, 2: 0}, bases).edges  # crossed links


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_conflicts_symmetric_under_stream_swap(seed):
    rng = np.random.default_rng(seed)
    t1 = traj(rng.uniform(-0.3, 0.3, (8, 3)), stream=1)
    t2 = traj(rng.uniform(-0.3, 0.3, (8, 3)), stream=2)
    m = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    segs = segment_streams([t1, t2], m)
    g = detect_conflicts(segs, [t1, t2], 0.15, {1: 0, 2: 1})
    s1 = traj(t2.positions, stream=1)
    s2 = traj(t1.positions, stream=2)
    swapped = segment_streams([s1, s2], m[::-1])
    gs = detect_conflicts(swapped, [s1, s2], 0.15, {1: 1, 2: 0})
    # relabel swapped ids back to the original ones
    relabel = {}
    for s in swapped:
        orig = next(o for o in segs if o.stream == 3 - s.stream and o.index == s.index)
        relabel[s.id] = orig.id
    mapped = {tuple(sorted((relabel[a], relabel[b]))): d for (a, b), d in gs.edges.items()}
    assert mapped.keys() == g.edges.keys()
    for k in mapped:
        assert mapped[k] == pytest.approx(g.edges[k], abs=1e-12)


# ---------------------------------------------------------------- assignment


def test_assignment_cases():
    left = traj([[-0.4, 0.3, 0.1], [-0.3, 0.3, 0.1]])
    right = traj([[0.4, 0.3, 0.1], [0.3, 0.3, 0.1]])
    assert assign_arms([right, left]) == {1: 1, 2: 0}
    assert assign_arms([left, right]) == {1: 0, 2: 1}
    mid = traj([[0, 0.3, 0.1], [0, 0.4, 0.1]])
    assert assign_arms([mid, mid]) == {1: 0, 2: 1}  # tie goes to identity
    far = traj([[0, 3.0, 0], [0, 3.1, 0]])
    with pytest.raises(Infeasible):
        assign_arms([far, left])


# ---------------------------------------------------------------- scheduling


IDENT = {1: 0, 2: 1}


def _instance(durations, conflicts=(), cross=()):
    segs = [seg(0, 1, 0, durations[0]), seg(1, 2, 0, durations[1])]
    g = ConflictGraph([0, 1], {tuple(c): 0.0 for c in conflicts})
    return segs, g, PrecedenceDag.build(segs, cross)


def test_two_segments_parallel_or_serial():
    segs, g, dag = _instance((2.0, 3.0))
    s = schedule_exhaustive(segs, g, dag, IDENT)
    assert s.slots == ((0, 1),) and s.makespan == 3.0
    segs, g, dag = _instance((2.0, 3.0), conflicts=[(0, 1)])
    s = schedule_exhaustive(segs, g, dag, IDENT)
    assert len(s.slots) == 2 and s.makespan == 5.0
    assert schedule_bnb(segs, g, dag, IDENT).makespan == 5.0


def test_pouring_style_precedence_respected():
    # stream 1: place container (0), return it (1); stream 2: pour (2), return (3)
    segs = [seg(0, 1, 0, 1.0), seg(1, 1, 1, 1.0), seg(2, 2, 0, 0.5), seg(3, 2, 1, 0.5)]
    dag = PrecedenceDag.build(segs, [(0, 2), (3, 1)])
    g = ConflictGraph([0, 1, 2, 3])
    for sched in (schedule_exhaustive(segs, g, dag, IDENT), schedule_bnb(segs, g, dag, IDENT)):
        pos = {i: k for k, slot in enumerate(sched.slots) for i in slot if i is not None}
        assert pos[0] < pos[2] and pos[3] < pos[1]
        assert not schedule_violations(sched.slots, segs, [], dag.pairs(), IDENT)


def test_cyclic_precedence_is_infeasible():
    segs = [seg(0, 1, 0, 1.0), seg(1, 2, 0, 1.0)]
    with pytest.raises(Infeasible):
        PrecedenceDag.build(segs, [(0, 1), (1, 0)])


def test_exhaustive_limit():
    segs = [seg(i, 1 + i % 2, i // 2, 1.0) for i in range(11)]
    with pytest.raises(ValueError):
        schedule_exhaustive(segs, ConflictGraph(list(range(11))), PrecedenceDag.build(segs), IDENT)


def test_bnb_matches_exhaustive_on_random_instances():
    rng = random.Random(7)
    for _ in range(200):
        segs, g, dag, asg = random_instance(rng)
        ex = schedule_exhaustive(segs, g, dag, asg)
        bb = schedule_bnb(segs, g, dag, asg)
        gr = schedule_greedy(segs, g, dag, asg)
        assert bb.makespan == ex.makespan
        assert bb.slots == ex.slots  # same tie-break
        assert gr.makespan >= ex.makespan
        for s in (ex, bb, gr):
            assert schedule_violations(s.slots, segs, g.pairs(), dag.pairs(), asg) == []


def test_bnb_bound_cases():
    rng = random.Random(3)
    for _ in range(20):
        segs, _, _, asg = random_instance(rng)
        dag = PrecedenceDag.build(segs)
        free = schedule_bnb(segs, ConflictGraph([s.id for s in segs]), dag, asg)
        per_stream = [sum(s.duration for s in segs if s.stream == k) for k in (1, 2)]
        # slots are synchronous, so the busier arm is only a lower bound
        assert free.makespan >= max(per_stream)
        assert free.makespan == schedule_exhaustive(segs, ConflictGraph([s.id for s in segs]), dag, asg).makespan
        even = [Segment(s.id, s.stream, s.index, s.start, s.end, 1.0, True) for s in segs]
        assert schedule_bnb(even, ConflictGraph([s.id for s in segs]), dag, asg).makespan == max(
            sum(1 for s in segs if s.stream == k) for k in (1, 2))
        every = {(a.id, b.id): 0.0 for a, b in itertools.combinations(segs, 2) if a.stream != b.stream}
        full = schedule_bnb(segs, ConflictGraph([s.id for s in segs], every), dag, asg)
        assert full.makespan == sum(s.duration for s in segs)


def test_bnb_handles_larger_instances():
    rng = random.Random(11)
    segs = [seg(i, 1 + (i >= 7), i if i < 7 else i - 7, rng.randint(1, 16) / 4) for i in range(14)]
    g = ConflictGraph(list(range(14)), {(a, b): 0.0 for a in range(7) for b in range(7, 14) if (a + b) % 3 == 0})
    dag = PrecedenceDag.build(segs, [(2, 9), (10, 5)])
    s = schedule_bnb(segs, g, dag, IDENT)
    assert schedule_violations(s.slots, segs, g.pairs(), dag.pairs(), IDENT) == []
    assert s.makespan <= schedule_greedy(segs, g, dag, IDENT).makespan


def test_validator_catches_each_rule():
    segs = [seg(0, 1, 0, 1.0), seg(1, 1, 1, 1.0), seg(2, 2, 0, 1.0)]
    pairs = [(0, 2)]
    prec = [(0, 1)]
    assert schedule_violations([(0, None), (1, 2)], segs, pairs, prec, IDENT) == []
    assert any("conflicting" in m for m in schedule_violations([(0, 2), (1, None)], segs, pairs, prec, IDENT))
    assert any("never" in m for m in schedule_violations([(0, None), (1, None)], segs, pairs, prec, IDENT))
    assert any("times" in m for m in schedule_violations([(0, 2), (1, 2)], segs, [], prec, IDENT))
    assert any("arm" in m for m in schedule_violations([(2, 0), (1, None)], segs, [], prec, IDENT))
    assert any("after" in m for m in schedule_violations([(1, 2), (0, None)], segs, [], prec, IDENT))
    assert any("unknown" in m for m in schedule_violations([(0, 2), (1, 9)], segs, [], prec, IDENT))


# ---------------------------------------------------------------- overlay


def _overlay_inputs(n):
    segs = [Segment(i, 1 + i % 2, i // 2, 0, 4, 1.0, True) for i in range(n)]
    lines = {i: np.array([[0.05 * i - 0.1, 0.3, 0.0], [0.05 * i - 0.1, 0.4, 0.05], [0.05 * i, 0.45, 0.1]])
             for i in range(n)}
    return segs, lines


def test_overlay_empty_and_three_segments():
    cam = default_camera()
    root = ET.fromstring(render_overlay(cam, [], {}))
    assert root.tag.endswith("svg") and root.get("viewBox") == f"0 0 {cam.width * 8} {cam.height * 8}"
    segs, lines = _overlay_inputs(3)
    svg = render_overlay(cam, segs, lines, {1: 0, 2: 1})
    root = ET.fromstring(svg)
    ns = "{http://www.w3.org/2000/svg}"
    polys = root.findall(f"{ns}polyline")
    labels = [t for t in root.findall(f"{ns}text") if t.get("class") == "label"]
    assert len(polys) == 3 and sorted(t.text for t in labels) == ["0", "1", "2"]
    assert len({p.get("stroke") for p in polys}) == 3
    legend = [t.text for t in root.findall(f"{ns}text") if t.get("class") == "legend"]
    assert legend == ["stream 1 -> left arm: segments 0,2", "stream 2 -> right arm: segments 1"]
    assert svg == render_overlay(cam, segs, lines, {1: 0, 2: 1})


# ---------------------------------------------------------------- external slot service


@pytest.fixture
def stub():
    s = StubServer()
    yield s
    s.close()


def _ask(url, timeout=2.0):
    segs, dag, g, lines = pouring_instance()
    return vlm_allocate(VlmConfig(url, timeout), "<svg/>", segs, lines, "pour it", dag, g, IDENT), (segs, dag, g)


def test_no_endpoint_uses_rules():
    out, (segs, dag, g) = _ask(None)
    assert out.source == "rule" and out.schedule == schedule_bnb(segs, g, dag, IDENT)


def test_unreachable_endpoint_falls_back():
    out, (segs, dag, g) = _ask("http://127.0.0.1:9/none", timeout=0.5)
    assert out.source == "fallback" and "transport" in out.reason
    assert out.schedule.slots == schedule_bnb(segs, g, dag, IDENT).slots


def test_stub_echoing_oracle_is_accepted(stub):
    segs, dag, g, _ = pouring_instance()
    oracle = schedule_exhaustive(segs, g, dag, IDENT)
    stub.reply = lambda req: (200, json.dumps({"version": 1, "slots": oracle.id_slots()}).encode(), 0)
    out, _ = _ask(stub.url)
    assert out.source == "vlm" and out.schedule == oracle
    req = stub.requests[0]
    assert req["version"] == 1 and req["instruction"] == "pour it" and req["overlay_svg"] == "<svg/>"
    assert req["precedence"] == [[0, 1], [0, 2], [2, 3], [3, 1]] and req["conflicts"] == [[0, 3]]
    assert [s["arm"] for s in req["segments"]] == [0, 0, 1, 1]


def test_conflicting_pair_is_rejected(stub):
    stub.reply = lambda req: (200, json.dumps({"version": 1, "slots": [[0], [1, 2], [3]]}).encode(), 0)
    out, _ = _ask(stub.url)
    assert out.source == "fallback" and "invalid" in out.reason


def test_randomised_stub_behaviours(stub):
    segs, dag, g, _ = pouring_instance()
    oracle = schedule_exhaustive(segs, g, dag, IDENT)
    rng = random.Random(5)
    kinds = list(KINDS) + [rng.choice(KINDS) for _ in range(50 - len(KINDS))]
    rng.shuffle(kinds)
    for kind in kinds:
        stub.reply = lambda req, kind=kind: behaviour(kind, rng, oracle.id_slots())
        out, _ = _ask(stub.url, timeout=0.3)
        if kind.startswith("valid"):
            assert out.source == "vlm", kind
            expected = oracle.id_slots() if kind == "valid" else [[0], [2], [3], [1]]
            assert out.schedule.id_slots() == expected
        else:
            assert out.source == "fallback", kind
            assert out.reason
            assert out.schedule.slots == oracle.slots
        assert schedule_violations(out.schedule.slots, segs, g.pairs(), dag.pairs(), IDENT) == []
