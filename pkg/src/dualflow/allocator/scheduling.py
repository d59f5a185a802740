"""Slot schedules for two arms: exhaustive oracle, branch-and-bound and a greedy list scheduler.

A slot runs at most one segment per arm; the next slot starts when every
member of the current one has finished.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

from .segments import ConflictGraph, Infeasible, PrecedenceDag, Segment

EXHAUSTIVE_LIMIT = 10


@dataclass(frozen=True)
class Schedule:
    slots: tuple[tuple[int | None, int | None], ...]  # (left arm segment, right arm segment)
    durations: dict[int, float]

    @property
    def makespan(self) -> float:
        return sum(self.slot_duration(s) for s in self.slots)

    def slot_duration(self, slot) -> float:
        return max((self.durations[i] for i in slot if i is not None), default=0.0)

    def order(self) -> tuple[int, ...]:
        return flat_order(self.slots)

    def id_slots(self) -> list[list[int]]:
        return [sorted(i for i in s if i is not None) for s in self.slots]

    def to_dict(self) -> dict:
        return {"slots": [list(s) for s in self.slots], "makespan": self.makespan}


def flat_order(slots) -> tuple[int, ...]:
    return tuple(i for s in slots for i in sorted(x for x in s if x is not None))


@dataclass(frozen=True)
class Problem:
    """Everything a scheduler needs, with arms already resolved per segment."""

    segments: tuple[Segment, ...]
    arm: dict[int, int]
    duration: dict[int, float]
    preds: dict[int, frozenset[int]]
    conflicts: frozenset[tuple[int, int]]

    @classmethod
    def build(cls, segments: list[Segment], conflicts: ConflictGraph, precedence: PrecedenceDag,
              assignment: dict[int, int]) -> "Problem":
        segs = tuple(sorted(segments, key=lambda s: s.id))
        ids = {s.id for s in segs}
        if len(ids) != len(segs):
            raise ValueError("duplicate segment ids")
        if precedence.has_cycle(ids):
            raise Infeasible("precedence constraints are cyclic")
        return cls(
            segments=segs,
            arm={s.id: assignment[s.stream] for s in segs},
            duration={s.id: s.duration for s in segs},
            preds={s.id: frozenset(precedence.preds(s.id)) for s in segs},
            conflicts=frozenset(conflicts.edges),
        )

    def conflicting(self, a: int, b: int) -> bool:
        return (min(a, b), max(a, b)) in self.conflicts

    def candidate_slots(self, done: frozenset[int]) -> Iterator[tuple[int | None, int | None]]:
        """Every admissible next slot, in a fixed order."""
        ready = [s.id for s in self.segments if s.id not in done and self.preds[s.id] <= done]
        left = [i for i in ready if self.arm[i] == 0]
        right = [i for i in ready if self.arm[i] == 1]
        for a in left:
            for b in right:
                if not self.conflicting(a, b):
                    yield (a, b)
        for a in left:
            yield (a, None)
        for b in right:
            yield (None, b)

    def schedule(self, slots) -> Schedule:
        return Schedule(tuple(slots), dict(self.duration))


def _key(makespan: float, slots) -> tuple:
    return (makespan, flat_order(slots), tuple(sum(i is not None for i in s) for s in slots))


def schedule_exhaustive(segments: list[Segment], conflicts: ConflictGraph, precedence: PrecedenceDag,
                        assignment: dict[int, int]) -> Schedule:
    """Enumerate every valid slot sequence and keep the best one."""
    if len(segments) > EXHAUSTIVE_LIMIT:
        raise ValueError(f"exhaustive search is limited to {EXHAUSTIVE_LIMIT} segments")
    pb = Problem.build(segments, conflicts, precedence, assignment)
    total = len(pb.segments)
    best: list = [None]

    def walk(done: frozenset[int], slots: list, elapsed: float) -> None:
        if len(done) == total:
            k = _key(elapsed, slots)
            if best[0] is None or k < best[0][0]:
                best[0] = (k, list(slots))
            return
        for slot in pb.candidate_slots(done):
            ids = [i for i in slot if i is not None]
            slots.append(slot)
            walk(done | frozenset(ids), slots, elapsed + max(pb.duration[i] for i in ids))
            slots.pop()

    walk(frozenset(), [], 0.0)
    if best[0] is None:
        raise Infeasible("no valid schedule")
    return pb.schedule(best[0][1])


def schedule_greedy(segments: list[Segment], conflicts: ConflictGraph, precedence: PrecedenceDag,
                    assignment: dict[int, int]) -> Schedule:
    """List scheduler: longest ready segment first, then the longest compatible partner."""
    pb = Problem.build(segments, conflicts, precedence, assignment)
    return pb.schedule(_greedy(pb, frozenset()))


def _greedy(pb: Problem, done: frozenset[int]) -> list:
    slots = []
    total = len(pb.segments)
    while len(done) < total:
        ready = [s.id for s in pb.segments if s.id not in done and pb.preds[s.id] <= done]
        if not ready:
            raise Infeasible("no valid schedule")
        first = min(ready, key=lambda i: (-pb.duration[i], i))
        partners = [i for i in ready if pb.arm[i] != pb.arm[first] and not pb.conflicting(i, first)]
        slot = [None, None]
        slot[pb.arm[first]] = first
        if partners:
            other = min(partners, key=lambda i: (-pb.duration[i], i))
            slot[pb.arm[other]] = other
        slots.append(tuple(slot))
        done = done | {i for i in slot if i is not None}
    return slots


def _tails(pb: Problem) -> dict[int, float]:
    """Longest duration path starting at each segment."""
    succ: dict[int, list[int]] = {s.id: [] for s in pb.segments}
    for b, ps in pb.preds.items():
        for a in ps:
            succ[a].append(b)
    memo: dict[int, float] = {}

    def tail(i: int) -> float:
        if i not in memo:
            memo[i] = pb.duration[i] + max((tail(j) for j in succ[i]), default=0.0)
        return memo[i]

    for s in pb.segments:
        tail(s.id)
    return memo


def schedule_bnb(segments: list[Segment], conflicts: ConflictGraph, precedence: PrecedenceDag,
                 assignment: dict[int, int]) -> Schedule:
    """Optimal makespan by depth-first branch-and-bound.

    Bound: elapsed time plus the larger of the heaviest arm's remaining work
    and the longest remaining precedence chain.  Ties are resolved the same
    way as in the exhaustive search.
    """
    pb = Problem.build(segments, conflicts, precedence, assignment)
    if not pb.segments:
        return pb.schedule([])
    tails = _tails(pb)
    total = len(pb.segments)
    inc_slots = _greedy(pb, frozenset())
    inc_ms = sum(max(pb.duration[i] for i in s if i is not None) for s in inc_slots)
    best = [_key(inc_ms, inc_slots), inc_slots]
    seen: dict[frozenset[int], float] = {}

    def bound(done: frozenset[int], elapsed: float) -> float:
        work = [0.0, 0.0]
        chain = 0.0
        for s in pb.segments:
            if s.id not in done:
                work[pb.arm[s.id]] += pb.duration[s.id]
                chain = max(chain, tails[s.id])
        return elapsed + max(work[0], work[1], chain)

    def walk(done: frozenset[int], slots: list, elapsed: float) -> None:
        if len(done) == total:
            k = _key(elapsed, slots)
            if k < best[0]:
                best[0], best[1] = k, list(slots)
            return
        if bound(done, elapsed) > best[0][0]:
            return
        prefix = flat_order(slots)
        if prefix > best[0][1][:len(prefix)] and bound(done, elapsed) >= best[0][0]:
            return  # cannot beat the incumbent on makespan nor on the tie-break
        # reaching the same set later than before cannot help: its completions
        # are the same and the earlier visit's prefix sorts first or equal
        prev = seen.get(done)
        if prev is not None and prev < elapsed:
            return
        seen[done] = elapsed if prev is None else min(prev, elapsed)
        for slot in pb.candidate_slots(done):
            ids = [i for i in slot if i is not None]
            slots.append(slot)
            walk(done | frozenset(ids), slots, elapsed + max(pb.duration[i] for i in ids))
            slots.pop()

    walk(frozenset(), [], 0.0)
    return pb.schedule(best[1])
