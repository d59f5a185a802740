"""Client for an external slot-ordering service, with validation and a local fallback."""

from __future__ import annotations

import json
import logging
import urllib.error
import urllib.request
from dataclasses import dataclass

import numpy as np

from .scheduling import Schedule, schedule_bnb
from .segments import ConflictGraph, PrecedenceDag, Segment
from .validate import schedule_violations

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 30.0


@dataclass(frozen=True)
class VlmConfig:
    endpoint: str | None = None
    timeout_s: float = DEFAULT_TIMEOUT


@dataclass(frozen=True)
class AllocationOutcome:
    schedule: Schedule
    source: str  # "vlm", "rule" or "fallback"
    reason: str | None = None

    def to_dict(self) -> dict:
        return {"source": self.source, "reason": self.reason, **self.schedule.to_dict()}


class InvalidResponse(ValueError):
    pass


def build_request(instruction: str, overlay_svg: str, segments: list[Segment], polylines: dict[int, np.ndarray],
                  assignment: dict[int, int], precedence: PrecedenceDag, conflicts: ConflictGraph) -> dict:
    return {
        "version": PROTOCOL_VERSION,
        "instruction": instruction,
        "overlay_svg": overlay_svg,
        "segments": [
            {"id": s.id, "stream": s.stream, "arm": assignment[s.stream],
             "polyline": np.round(np.asarray(polylines[s.id], float), 6).tolist(),
             "duration_s": s.duration, "carry": s.carry}
            for s in sorted(segments, key=lambda s: s.id)
        ],
        "precedence": precedence.pairs(),
        "conflicts": conflicts.pairs(),
    }


def parse_response(body: bytes, segments: list[Segment], assignment: dict[int, int],
                   precedence: PrecedenceDag, conflicts: ConflictGraph) -> Schedule:
    try:
        msg = json.loads(body)
    except (ValueError, UnicodeDecodeError) as exc:
        raise InvalidResponse(f"response is not JSON: {exc}") from None
    if not isinstance(msg, dict) or msg.get("version") != PROTOCOL_VERSION:
        raise InvalidResponse("missing or unsupported protocol version")
    raw = msg.get("slots")
    if not isinstance(raw, list):
        raise InvalidResponse("slots must be a list")
    by_id = {s.id: s for s in segments}
    slots = []
    for k, entry in enumerate(raw):
        if not isinstance(entry, list) or not all(type(i) is int for i in entry):
            raise InvalidResponse(f"slot {k} is not a list of integer ids")
        slot = [None, None]
        for sid in entry:
            if sid not in by_id:
                raise InvalidResponse(f"slot {k} names unknown segment {sid}")
            arm = assignment[by_id[sid].stream]
            if slot[arm] is not None:
                raise InvalidResponse(f"slot {k} gives arm {arm} two segments")
            slot[arm] = sid
        slots.append(tuple(slot))
    problems = schedule_violations(slots, segments, conflicts.pairs(), precedence.pairs(), assignment)
    if problems:
        raise InvalidResponse("; ".join(problems))
    return Schedule(tuple(slots), {s.id: s.duration for s in segments})


def vlm_allocate(config: VlmConfig, overlay_svg: str, segments: list[Segment], polylines: dict[int, np.ndarray],
                 instruction: str, precedence: PrecedenceDag, conflicts: ConflictGraph,
                 assignment: dict[int, int]) -> AllocationOutcome:
    """Ask the configured service for a slot ordering; fall back to branch-and-bound on any problem."""
    if not config.endpoint:
        return AllocationOutcome(schedule_bnb(segments, conflicts, precedence, assignment), "rule")
    payload = build_request(instruction, overlay_svg, segments, polylines, assignment, precedence, conflicts)
    data = json.dumps(payload, sort_keys=True).encode()
    req = urllib.request.Request(config.endpoint, data=data, headers={"Content-Type": "application/json"},
                                 method="POST")
    try:
        with urllib.request.urlopen(req, timeout=config.timeout_s) as resp:
            body = resp.read()
        return AllocationOutcome(parse_response(body, segments, assignment, precedence, conflicts), "vlm")
    except InvalidResponse as exc:
        reason = f"invalid response: {exc}"
    except (urllib.error.URLError, OSError, TimeoutError) as exc:
        reason = f"transport failure: {exc}"
    log.warning("slot service rejected, using branch-and-bound (%s)", reason)
    return AllocationOutcome(schedule_bnb(segments, conflicts, precedence, assignment), "fallback", reason)
