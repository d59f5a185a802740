"""SVG overlay of segmented trajectories on the initial camera frame."""

from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

from ..geometry import CameraModel
from ..robot import ARM_NAMES
from .segments import Segment

PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6", "#9a6324",
           "#808000", "#000075", "#469990", "#800000")
SCALE = 8


def _f(x: float) -> str:
    return f"{x:.2f}"


def render_overlay(camera: CameraModel, segments: list[Segment], polylines: dict[int, np.ndarray],
                   assignment: dict[int, int] | None = None) -> str:
    """One coloured polyline per segment with its id at the midpoint, plus a legend.

    ``polylines`` maps segment id to world-frame points.
    """
    W, H = camera.width * SCALE, camera.height * SCALE
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect x="0" y="0" width="{W}" height="{H}" fill="#f4f4f4" stroke="#333333"/>']
    for n, seg in enumerate(sorted(segments, key=lambda s: s.id)):
        color = PALETTE[n % len(PALETTE)]
        uv, _ = camera.project(np.asarray(polylines[seg.id], float))
        uv = uv * SCALE
        pts = " ".join(f"{_f(u)},{_f(v)}" for u, v in uv)
        mid = uv[len(uv) // 2]
        out.append(f'<polyline class="segment" data-id="{seg.id}" points="{pts}" fill="none" '
                   f'stroke="{color}" stroke-width="3"/>')
        out.append(f'<text class="label" x="{_f(mid[0])}" y="{_f(mid[1])}" font-size="16" '
                   f'fill="{color}">{seg.id}</text>')
    streams = sorted({s.stream for s in segments})
    for row, stream in enumerate(streams):
        arm = "unassigned" if assignment is None else ARM_NAMES[assignment[stream]]
        ids = ",".join(str(s.id) for s in segments if s.stream == stream)
        out.append(f'<text class="legend" x="8" y="{20 + 18 * row}" font-size="14" fill="#111111">'
                   f'{escape(f"stream {stream} -> {arm} arm: segments {ids}")}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
