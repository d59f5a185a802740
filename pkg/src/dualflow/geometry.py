"""Rotations, pinhole camera, segment distances and oriented-box ray casts."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w <= -np.pi, w + 2 * np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


def rpy_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Intrinsic Z-Y-X: ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``."""
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    return np.array([
        [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
        [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
        [-sp, cp * sr, cp * cr],
    ])


def matrix_to_rpy(R: np.ndarray) -> tuple[float, float, float]:
    sp = -R[2, 0]
    sp = min(1.0, max(-1.0, sp))
    pitch = math.asin(sp)
    if abs(sp) < 1.0 - 1e-12:
        roll = math.atan2(R[2, 1], R[2, 2])
        yaw = math.atan2(R[1, 0], R[0, 0])
    else:  # gimbal lock: fold roll into yaw
        roll = 0.0
        yaw = math.atan2(-R[0, 1], R[1, 1])
    return wrap_angle(roll), wrap_angle(pitch), wrap_angle(yaw)


def rotation_angle(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


@dataclass
class CameraModel:
    """Pinhole camera; extrinsics map world to camera: ``x_cam = R @ x_w + t``."""

    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray
    t: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9) or abs(np.linalg.det(self.R) - 1) > 1e-9:
            raise ValueError("R must be a proper rotation")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @classmethod
    def look_at(cls, eye, target, up=(0, 0, 1), *, fx=56.0, fy=56.0, width=64, height=64) -> "CameraModel":
        eye, target, up = (np.asarray(v, dtype=float) for v in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(fx, fy, width / 2, height / 2, R, -R @ eye, width, height)

    def to_camera(self, pts) -> np.ndarray:
        return np.asarray(pts, dtype=float) @ self.R.T + self.t

    def project(self, pts) -> tuple[np.ndarray, np.ndarray]:
        """World points (..., 3) -> pixels (..., 2) and camera depths (...)."""
        pc = self.to_camera(pts)
        z = pc[..., 2]
        uv = np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], axis=-1)
        return uv, z

    def unproject(self, uv, depth) -> np.ndarray:
        """Pixels (..., 2) with depths (...) -> world points (..., 3)."""
        uv = np.asarray(uv, dtype=float)
        depth = np.asarray(depth, dtype=float)
        if np.any(depth <= 0):
            raise ValueError("depth must be positive")
        pc = np.stack([(uv[..., 0] - self.cx) / self.fx * depth, (uv[..., 1] - self.cy) / self.fy * depth, depth], axis=-1)
        return (pc - self.t) @ self.R

    def ray(self, uv) -> tuple[np.ndarray, np.ndarray]:
        """Camera centre and unit world direction through pixel ``uv``."""
        d_cam = np.array([(uv[0] - self.cx) / self.fx, (uv[1] - self.cy) / self.fy, 1.0])
        d = self.R.T @ d_cam
        return self.center, d / np.linalg.norm(d)

    def in_image(self, uv) -> np.ndarray:
        uv = np.asarray(uv)
        return (uv[..., 0] >= 0) & (uv[..., 0] <= self.width) & (uv[..., 1] >= 0) & (uv[..., 1] <= self.height)

    def to_dict(self) -> dict:
        return {"K": [self.fx, self.fy, self.cx, self.cy], "R": self.R.tolist(), "t": self.t.tolist(),
                "w": self.width, "h": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        fx, fy, cx, cy = d["K"]
        return cls(fx, fy, cx, cy, np.array(d["R"]), np.array(d["t"]), d["w"], d["h"])


# ---------------------------------------------------------------- distances


def segment_distances(p1, q1, p2, q2) -> np.ndarray:
    """Exact minimum distance between 3D segments, vectorised over leading axes.

    Degenerate (zero-length) segments are treated as points.
    """
    p1, q1, p2, q2 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (p1, q1, p2, q2)))
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.einsum("...i,...i", d1, d1)
    e = np.einsum("...i,...i", d2, d2)
    f = np.einsum("...i,...i", d2, r)
    c = np.einsum("...i,...i", d1, r)
    b = np.einsum("...i,...i", d1, d2)
    eps = 1e-15
    a_ok = a > eps
    e_ok = e > eps
    sa = np.where(a_ok, a, 1.0)
    se = np.where(e_ok, e, 1.0)
    denom = a * e - b * b
    par = denom <= 1e-12 * np.maximum(a * e, eps)
    s = np.where(par, 0.0, np.clip((b * f - c * e) / np.where(par, 1.0, denom), 0.0, 1.0))
    t = (b * s + f) / se
    s = np.where(t < 0, np.clip(-c / sa, 0.0, 1.0), s)
    s = np.where(t > 1, np.clip((b - c) / sa, 0.0, 1.0), s)
    t = np.clip(t, 0.0, 1.0)
    # degenerate cases
    only_b = ~a_ok & e_ok
    only_a = a_ok & ~e_ok
    s = np.where(only_b, 0.0, s)
    t = np.where(only_b, np.clip(f / se, 0.0, 1.0), t)
    s = np.where(only_a, np.clip(-c / sa, 0.0, 1.0), s)
    t = np.where(only_a, 0.0, t)
    both = ~a_ok & ~e_ok
    s = np.where(both, 0.0, s)
    t = np.where(both, 0.0, t)
    c1 = p1 + d1 * s[..., None]
    c2 = p2 + d2 * t[..., None]
    return np.linalg.norm(c1 - c2, axis=-1)


def min_seg_distance(p1, q1, p2, q2) -> float:
    return float(segment_distances(p1, q1, p2, q2))


def polyline_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum distance between two polylines (a single point counts as one)."""
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    sa = (a[:-1], a[1:]) if len(a) > 1 else (a, a)
    sb = (b[:-1], b[1:]) if len(b) > 1 else (b, b)
    d = segment_distances(sa[0][:, None], sa[1][:, None], sb[0][None, :], sb[1][None, :])
    return float(d.min())


# ---------------------------------------------------------------- boxes


@dataclass
class OrientedBox:
    center: np.ndarray
    R: np.ndarray
    half: np.ndarray

    def corners(self) -> np.ndarray:
        signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=float)
        return self.center + (signs * self.half) @ self.R.T

    def ray_hit(self, origin, direction) -> float | None:
        """Smallest non-negative ray parameter entering the box, or None."""
        o = self.R.T @ (np.asarray(origin) - self.center)
        d = self.R.T @ np.asarray(direction)
        t0, t1 = -np.inf, np.inf
        for i in range(3):
            if abs(d[i]) < 1e-15:
                if abs(o[i]) > self.half[i]:
                    return None
                continue
            ta = (-self.half[i] - o[i]) / d[i]
            tb = (self.half[i] - o[i]) / d[i]
            if ta > tb:
                ta, tb = tb, ta
            t0, t1 = max(t0, ta), min(t1, tb)
            if t0 > t1:
                return None
        if t1 < 0:
            return None
        return max(t0, 0.0)

    def contains(self, p, tol: float = 0.0) -> bool:
        q = self.R.T @ (np.asarray(p) - self.center)
        return bool(np.all(np.abs(q) <= self.half + tol))

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        ext = np.abs(self.R) @ self.half
        return self.center - ext, self.center + ext

    def capsules(self, cell: float | None = None) -> tuple[np.ndarray, np.ndarray, float]:
        """Capsules covering the box, laid out along its longest axis.

        The cross-section is cut into cells no wider than ``2 * cell`` on each
        side (by default the short half extent sets the cell).  Returns
        segment start points, end points (k, 3) and the common radius.  The
        union contains the box, so distances are conservative.
        """
        order = np.argsort(self.half)
        ax_short, ax_mid, ax_long = order
        h_short = float(self.half[ax_short])
        h_mid = float(self.half[ax_mid])
        c = h_short if cell is None else min(cell, h_short)
        n_short = max(1, int(math.ceil(h_short / c - 1e-9)))
        n_mid = max(1, int(math.ceil(h_mid / c - 1e-9)))
        step_s = 2 * h_short / n_short
        step_m = 2 * h_mid / n_mid
        r = math.hypot(step_s / 2, step_m / 2)
        P, Q = [], []
        for off_s in -h_short + step_s * (np.arange(n_short) + 0.5):
            for off_m in -h_mid + step_m * (np.arange(n_mid) + 0.5):
                a = np.zeros(3)
                a[ax_short], a[ax_mid] = off_s, off_m
                b = a.copy()
                a[ax_long], b[ax_long] = -self.half[ax_long], self.half[ax_long]
                P.append(self.center + self.R @ a)
                Q.append(self.center + self.R @ b)
        return np.array(P), np.array(Q), r


def box_distance(a: OrientedBox, b: OrientedBox, cell: float | None = None) -> float:
    """Conservative separation of two boxes via their capsule covers."""
    pa, qa, ra = a.capsules(cell)
    pb, qb, rb = b.capsules(cell)
    d = segment_distances(pa[:, None], qa[:, None], pb[None], qb[None])
    return float(d.min()) - ra - rb


def link_box_distance(p, q, box: OrientedBox, link_radius: float = 0.0, cell: float | None = None) -> float:
    pb, qb, rb = box.capsules(cell)
    d = segment_distances(np.asarray(p)[None], np.asarray(q)[None], pb, qb)
    return float(d.min()) - rb - link_radius
