"""Trajectory segmentation, spatial conflicts, precedence and arm assignment."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from ..geometry import segment_distances
from ..lift3d import Trajectory3D
from ..robot import ARM_BASES, REACH, V_MAX

PAUSE_SPEED = 0.01  # m/s
PAUSE_STEPS = 3
TURN_ANGLE = math.radians(60)
CARRY_DISPLACEMENT = 0.01
M_MAX = 6
TIME_QUANTUM = 2.0 ** -6


class Infeasible(ValueError):
    pass


@dataclass(frozen=True)
class Segment:
    id: int
    stream: int  # 1 or 2
    index: int
    start: int
    end: int  # exclusive
    duration: float
    carry: bool

    def to_dict(self) -> dict:
        return {"id": self.id, "stream": self.stream, "index": self.index, "start": self.start, "end": self.end,
                "duration": self.duration, "carry": self.carry}

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        return cls(d["id"], d["stream"], d["index"], d["start"], d["end"], d["duration"], d["carry"])


def quantize_duration(seconds: float) -> float:
    """Round up to a multiple of 2**-6 s so that sums of durations are exact."""
    return max(1, math.ceil(seconds / TIME_QUANTUM - 1e-9)) * TIME_QUANTUM


def breakpoint_scores(traj: Trajectory3D) -> tuple[np.ndarray, list[int]]:
    """Score every interior waypoint and list the detected breakpoints.

    A pause (at least three consecutive slow steps) scores pi plus its length
    in steps at the middle waypoint of the run; every other waypoint scores
    its heading change in radians.
    """
    pos = traj.positions
    steps = np.diff(pos, axis=0)
    lengths = np.linalg.norm(steps, axis=1)
    speed = lengths / np.diff(traj.timestamps)
    P = traj.P
    scores = np.zeros(P)
    detected: list[int] = []
    for k in range(1, P - 1):
        a, b = lengths[k - 1], lengths[k]
        if a > 1e-9 and b > 1e-9:
            c = float(steps[k - 1] @ steps[k]) / (a * b)
            scores[k] = math.acos(max(-1.0, min(1.0, c)))
            if scores[k] > TURN_ANGLE:
                detected.append(k)
    slow = speed < PAUSE_SPEED
    k = 0
    while k < len(slow):
        if not slow[k]:
            k += 1
            continue
        j = k
        while j < len(slow) and slow[j]:
            j += 1
        n = j - k
        if n >= PAUSE_STEPS:
            mid = k + n // 2  # steps k..j-1 join waypoints k..j
            if 0 < mid < P - 1:
                scores[mid] = math.pi + n
                # turns inside the pause are noise
                detected = [d for d in detected if not k <= d <= j]
                detected.append(mid)
        k = j
    return scores, sorted(set(detected))


def segment_trajectory(traj: Trajectory3D, m: int | None = None, *, stream: int | None = None,
                       first_id: int = 0, v_max: float = V_MAX, m_max: int = M_MAX) -> list[Segment]:
    """Split ``traj`` into contiguous waypoint slices.

    A breakpoint at waypoint k ends a slice there, so the next slice starts
    at k + 1.
    """
    P = traj.P
    scores, detected = breakpoint_scores(traj)
    if m is None:
        m = min(max(len(detected) + 1, 1), m_max)
        cuts = detected
        if len(cuts) > m - 1:
            cuts = _top(scores, cuts, m - 1)
    else:
        if not 1 <= m <= P - 1:
            raise ValueError(f"m={m} outside [1, {P - 1}]")
        cuts = _top(scores, list(range(1, P - 1)), m - 1)
        if len(cuts) < m - 1:  # only reachable for P == 2, where m == 1 anyway
            raise ValueError("not enough interior waypoints")
    bounds = [0] + [c + 1 for c in sorted(cuts)] + [P]
    stream = traj.stream if stream is None else stream
    out = []
    pos = traj.positions
    for i in range(len(bounds) - 1):
        s, e = bounds[i], bounds[i + 1]
        path = pos[max(s - 1, 0):e]
        length = float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum())
        carry = bool(np.linalg.norm(path - path[0], axis=1).max() > CARRY_DISPLACEMENT)
        out.append(Segment(first_id + i, stream, i, s, e, quantize_duration(length / v_max), carry))
    return out


def _top(scores: np.ndarray, candidates: list[int], n: int) -> list[int]:
    ranked = sorted(candidates, key=lambda k: (-scores[k], k))
    return sorted(ranked[:n])


def segment_streams(trajs: list[Trajectory3D], counts: tuple[int | None, int | None] = (None, None),
                    v_max: float = V_MAX, m_max: int = M_MAX) -> list[Segment]:
    """Segment both streams with globally unique ids (stream 1 first)."""
    segs: list[Segment] = []
    for s, (tr, m) in enumerate(zip(trajs, counts), start=1):
        segs += segment_trajectory(tr, m, stream=s, first_id=len(segs), v_max=v_max, m_max=m_max)
    return segs


def segment_polyline(seg: Segment, traj: Trajectory3D) -> np.ndarray:
    """Swept positions of a segment, including the step in from the previous slice."""
    return traj.positions[max(seg.start - 1, 0):seg.end]


# ---------------------------------------------------------------- conflicts


@dataclass
class ConflictGraph:
    nodes: list[int]
    edges: dict[tuple[int, int], float] = field(default_factory=dict)  # (a < b) -> distance

    def conflicts(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.edges

    def pairs(self) -> list[list[int]]:
        return [list(e) for e in sorted(self.edges)]


def _corridor(poly: np.ndarray, base: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Segment endpoints of a polyline plus the base-to-waypoint link fan."""
    if len(poly) > 1:
        P, Q = poly[:-1], poly[1:]
    else:
        P, Q = poly, poly
    if base is not None:
        P = np.vstack([P, np.repeat(base[None], len(poly), axis=0)])
        Q = np.vstack([Q, poly])
    return P, Q


def corridor_distance(poly_a: np.ndarray, poly_b: np.ndarray, base_a=None, base_b=None) -> float:
    pa, qa = _corridor(np.asarray(poly_a, float), None if base_a is None else np.asarray(base_a, float))
    pb, qb = _corridor(np.asarray(poly_b, float), None if base_b is None else np.asarray(base_b, float))
    d = segment_distances(pa[:, None], qa[:, None], pb[None], qb[None])
    return float(d.min())


def detect_conflicts(segments: list[Segment], trajs: dict[int, Trajectory3D] | list[Trajectory3D],
                     d_safe: float = 0.10, assignment: dict[int, int] | None = None,
                     bases: np.ndarray | None = ARM_BASES) -> ConflictGraph:
    """Cross-stream pairs whose swept corridors come closer than ``d_safe``.

    ``trajs`` maps stream id to trajectory (a list is taken as streams 1, 2).
    Link fans are included when both an assignment and arm bases are given.
    """
    if isinstance(trajs, list):
        trajs = {i + 1: t for i, t in enumerate(trajs)}
    graph = ConflictGraph(sorted(s.id for s in segments))
    use_links = assignment is not None and bases is not None
    for a, b in itertools.combinations(sorted(segments, key=lambda s: s.id), 2):
        if a.stream == b.stream:
            continue
        base_a = bases[assignment[a.stream]] if use_links else None
        base_b = bases[assignment[b.stream]] if use_links else None
        d = corridor_distance(segment_polyline(a, trajs[a.stream]), segment_polyline(b, trajs[b.stream]),
                              base_a, base_b)
        if d < d_safe:
            graph.edges[(a.id, b.id)] = d
    return graph


# ---------------------------------------------------------------- precedence


@dataclass
class PrecedenceDag:
    edges: set[tuple[int, int]] = field(default_factory=set)

    @classmethod
    def build(cls, segments: list[Segment], cross: list[tuple[int, int]] = ()) -> "PrecedenceDag":
        by_stream: dict[int, list[Segment]] = {}
        for s in segments:
            by_stream.setdefault(s.stream, []).append(s)
        edges = set()
        for segs in by_stream.values():
            segs = sorted(segs, key=lambda s: s.index)
            edges |= {(x.id, y.id) for x, y in zip(segs, segs[1:])}
        edges |= {tuple(e) for e in cross}
        dag = cls(edges)
        ids = {s.id for s in segments}
        if any(a not in ids or b not in ids for a, b in dag.edges):
            raise ValueError("precedence edge references an unknown segment")
        if dag.has_cycle(ids):
            raise Infeasible("precedence constraints are cyclic")
        return dag

    def preds(self, node: int) -> set[int]:
        return {a for a, b in self.edges if b == node}

    def has_cycle(self, nodes) -> bool:
        indeg = {n: 0 for n in nodes}
        for _, b in self.edges:
            indeg[b] += 1
        ready = [n for n, d in indeg.items() if d == 0]
        seen = 0
        while ready:
            n = ready.pop()
            seen += 1
            for a, b in self.edges:
                if a == n:
                    indeg[b] -= 1
                    if indeg[b] == 0:
                        ready.append(b)
        return seen != len(indeg)

    def pairs(self) -> list[list[int]]:
        return [list(e) for e in sorted(self.edges)]


def role_precedence(segments: list[Segment], roles: dict[str, tuple[int, int]],
                    order: list[tuple[str, str]]) -> list[tuple[int, int]]:
    """Translate (before role, after role) pairs into segment-id edges."""
    lookup = {(s.stream, s.index): s.id for s in segments}
    edges = []
    for before, after in order:
        try:
            edges.append((lookup[tuple(roles[before])], lookup[tuple(roles[after])]))
        except KeyError as exc:
            raise ValueError(f"role {exc} has no matching segment") from None
    return edges


# ---------------------------------------------------------------- arm assignment


def assign_arms(trajs: list[Trajectory3D], bases: np.ndarray = ARM_BASES, reach: float = REACH) -> dict[int, int]:
    """Map stream (1, 2) to arm index (0 = left, 1 = right)."""
    if len(trajs) != 2 or len(bases) != 2:
        raise ValueError("exactly two streams and two arms are supported")
    best = None
    for perm in ((0, 1), (1, 0)):
        cost = 0.0
        ok = True
        for tr, arm in zip(trajs, perm):
            base = np.asarray(bases[arm], float)
            if np.linalg.norm(tr.positions - base, axis=1).max() > reach:
                ok = False
                break
            cost += float(np.linalg.norm(tr.positions.mean(axis=0) - base))
        if ok and (best is None or cost < best[0] - 1e-12):
            best = (cost, perm)
    if best is None:
        raise Infeasible("no arm assignment keeps every waypoint within reach")
    return {1: best[1][0], 2: best[1][1]}
