from .overlay import render_overlay
from .scheduling import Schedule, schedule_bnb, schedule_exhaustive, schedule_greedy
from .segments import (
    ConflictGraph, Infeasible, PrecedenceDag, Segment, assign_arms, breakpoint_scores, detect_conflicts,
    role_precedence, segment_polyline, segment_streams, segment_trajectory,
)
from .validate import schedule_violations
from .vlm import AllocationOutcome, InvalidResponse, VlmConfig, build_request, parse_response, vlm_allocate

__all__ = [
    "render_overlay", "Schedule", "schedule_bnb", "schedule_exhaustive", "schedule_greedy", "ConflictGraph",
    "Infeasible", "PrecedenceDag", "Segment", "assign_arms", "breakpoint_scores", "detect_conflicts",
    "role_precedence", "segment_polyline", "segment_streams", "segment_trajectory", "schedule_violations",
    "AllocationOutcome", "InvalidResponse", "VlmConfig", "build_request", "parse_response", "vlm_allocate",
]
