"""Schedule checker kept apart from the schedulers so it can audit them."""

from __future__ import annotations

from collections import Counter

from .segments import Segment


def schedule_violations(slots, segments: list[Segment], conflict_pairs, precedence_pairs,
                        assignment: dict[int, int]) -> list[str]:
    """Every broken schedule rule, as readable messages; empty means valid.

    ``slots`` is a sequence of per-arm entries (segment id or None).
    """
    problems: list[str] = []
    by_id = {s.id: s for s in segments}
    seen = Counter()
    slot_of: dict[int, int] = {}
    bad_pairs = {frozenset(p) for p in conflict_pairs}
    for k, slot in enumerate(slots):
        if len(slot) != 2:
            problems.append(f"slot {k} does not have one entry per arm")
            continue
        members = []
        for arm, sid in enumerate(slot):
            if sid is None:
                continue
            if sid not in by_id:
                problems.append(f"slot {k} names unknown segment {sid}")
                continue
            if assignment[by_id[sid].stream] != arm:
                problems.append(f"segment {sid} placed on arm {arm} but its stream runs on arm "
                                f"{assignment[by_id[sid].stream]}")
            seen[sid] += 1
            slot_of[sid] = k
            members.append(sid)
        if not members:
            problems.append(f"slot {k} is empty")
        if len(members) == 2 and frozenset(members) in bad_pairs:
            problems.append(f"slot {k} runs conflicting segments {members[0]} and {members[1]}")
    for sid in by_id:
        if seen[sid] == 0:
            problems.append(f"segment {sid} is never scheduled")
        elif seen[sid] > 1:
            problems.append(f"segment {sid} is scheduled {seen[sid]} times")
    for before, after in precedence_pairs:
        if before in slot_of and after in slot_of and not slot_of[before] < slot_of[after]:
            problems.append(f"segment {after} does not run after {before}")
    return problems
