"""Lift 2D object flows to world-frame 6-DOF waypoint trajectories."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .geometry import CameraModel, matrix_to_rpy, rpy_to_matrix, wrap_angle
from .scene import BBox, EpisodeRecord, anchor_world, grid_anchors

TRAJ_VERSION = 1


class DegenerateGeometry(ValueError):
    pass


class DepthLookupError(ValueError):
    pass


def unproject(camera: CameraModel, pixel, depth) -> np.ndarray:
    return camera.unproject(pixel, depth)


def smooth(series: np.ndarray, window: int, valid: np.ndarray | None = None) -> np.ndarray:
    """Centred moving average along axis 0 with symmetric edge shrinking.

    At index i the half width is ``min(window // 2, i, n - 1 - i)``, so the
    first and last samples are kept as they are.  Samples with ``valid``
    False are left out of every average; if a window holds no valid sample
    the input value is kept.
    """
    x = np.asarray(series, dtype=float)
    if x.shape[0] == 0:
        raise ValueError("empty series")
    if window < 1 or window % 2 == 0 or window > x.shape[0]:
        raise ValueError("window must be odd, >= 1 and <= series length")
    n = x.shape[0]
    v = np.ones(x.shape[:1], bool) if valid is None else np.asarray(valid, bool)
    v = v.reshape(v.shape + (1,) * (x.ndim - v.ndim))
    out = np.empty_like(x)
    h = window // 2
    for i in range(n):
        k = min(h, i, n - 1 - i)
        sl = slice(i - k, i + k + 1)
        w = np.broadcast_to(v[sl], x[sl].shape).astype(float)
        cnt = w.sum(axis=0)
        avg = (x[sl] * w).sum(axis=0) / np.where(cnt > 0, cnt, 1)
        out[i] = np.where(cnt > 0, avg, x[i])
    return out


@dataclass
class RigidPose:
    R: np.ndarray
    t: np.ndarray

    @property
    def rpy(self) -> tuple[float, float, float]:
        return matrix_to_rpy(self.R)

    def apply(self, pts) -> np.ndarray:
        return np.asarray(pts) @ self.R.T + self.t


def rigid_merge(points: np.ndarray, reference: np.ndarray) -> RigidPose:
    """Least-squares rigid map taking ``reference`` (N, 3) onto ``points`` (N, 3)."""
    A = np.asarray(reference, dtype=float).reshape(-1, 3)
    B = np.asarray(points, dtype=float).reshape(-1, 3)
    if A.shape != B.shape:
        raise ValueError("point sets differ in size")
    if len(A) < 3:
        raise DegenerateGeometry("need at least 3 correspondences")
    ca, cb = A.mean(axis=0), B.mean(axis=0)
    Ac, Bc = A - ca, B - cb
    sv = np.linalg.svd(Ac, compute_uv=False)
    if sv[0] == 0 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateGeometry("reference points are collinear")
    U, _, Vt = np.linalg.svd(Ac.T @ Bc)
    d = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    return RigidPose(R, cb - R @ ca)


@dataclass
class Trajectory3D:
    waypoints: np.ndarray  # (P, 6)
    timestamps: np.ndarray  # (P,)
    stream: int

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=float)
        self.timestamps = np.asarray(self.timestamps, dtype=float)
        if self.waypoints.ndim != 2 or self.waypoints.shape[1] != 6 or len(self.waypoints) < 2:
            raise ValueError("trajectory needs P >= 2 waypoints of 6 values")
        if len(self.timestamps) != len(self.waypoints) or np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing, one per waypoint")

    @property
    def P(self) -> int:
        return len(self.waypoints)

    @property
    def positions(self) -> np.ndarray:
        return self.waypoints[:, :3]

    def to_dict(self) -> dict:
        return {"version": TRAJ_VERSION, "stream": self.stream, "P": self.P,
                "waypoints": self.waypoints.tolist(), "timestamps": self.timestamps.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory3D":
        if d.get("version") != TRAJ_VERSION:
            raise ValueError(f"unsupported trajectory version {d.get('version')}")
        tr = cls(np.array(d["waypoints"]), np.array(d["timestamps"]), d["stream"])
        if tr.P != d["P"]:
            raise ValueError("waypoint count does not match P")
        return tr


def save_trajectories(path: str | Path, trajs: list[Trajectory3D]) -> None:
    Path(path).write_text(json.dumps([t.to_dict() for t in trajs], sort_keys=True, separators=(",", ":")))


def load_trajectories(path: str | Path) -> list[Trajectory3D]:
    return [Trajectory3D.from_dict(d) for d in json.loads(Path(path).read_text())]


# ---------------------------------------------------------------- depth sources


class DepthSource(Protocol):
    def __call__(self, frame: int, uv: np.ndarray) -> np.ndarray: ...


class AnchorDepth:
    """Exact camera depth of tracked anchors (ground-truth flows only)."""

    def __init__(self, episode: EpisodeRecord, bbox: BBox, grid: int):
        self.episode = episode
        self.oid, self.local = grid_anchors(episode, bbox, grid)

    def __call__(self, frame: int, uv: np.ndarray) -> np.ndarray:
        pts = anchor_world(self.episode, self.oid, self.local, frame)
        return self.episode.camera.to_camera(pts)[..., 2]


class PlaneDepth:
    """Depth of the horizontal plane through each grid point's initial height."""

    def __init__(self, camera: CameraModel, heights: np.ndarray):
        self.camera = camera
        self.heights = np.asarray(heights, dtype=float)

    def __call__(self, frame: int, uv: np.ndarray) -> np.ndarray:
        cam = self.camera
        d_cam = np.stack([(uv[..., 0] - cam.cx) / cam.fx, (uv[..., 1] - cam.cy) / cam.fy, np.ones(uv.shape[:-1])], -1)
        d_world = d_cam @ cam.R  # rows are R^T d_cam
        c = cam.center
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (self.heights - c[2]) / d_world[..., 2]
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise DepthLookupError("pixel ray does not reach its reference plane")
        return s  # camera z of the hit, since d_cam has unit z


def initial_pose_of(episode: EpisodeRecord, bbox: BBox) -> tuple[np.ndarray, np.ndarray]:
    """Frame-0 position and rotation of the object inside ``bbox``."""
    oid, _ = grid_anchors(episode, bbox, 2)
    pose = episode.frames[0, oid]
    return pose[:3].copy(), rpy_to_matrix(*pose[3:])


# ---------------------------------------------------------------- lifting


@dataclass(frozen=True)
class LiftConfig:
    window: int = 5
    P: int = 32
    frame_dt: float = 0.1


def lift_trajectory(flow: np.ndarray, camera: CameraModel, depth: DepthSource | Callable,
                    config: LiftConfig = LiftConfig(), reference: tuple[np.ndarray, np.ndarray] | None = None,
                    stream: int = 1) -> Trajectory3D:
    """Unproject, smooth, rigidly merge and resample one stream's flow.

    ``reference`` is the object's frame-0 (position, rotation); without it the
    frame-0 grid centroid and the identity orientation are used.
    """
    flow = np.asarray(flow, dtype=float)
    if flow.ndim != 4 or flow.shape[0] != 3:
        raise ValueError("flow must have shape (3, T, G, G)")
    T = flow.shape[1]
    vis = flow[2] > 0.5
    uv = np.stack([flow[0] * camera.width, flow[1] * camera.height], axis=-1)  # (T, G, G, 2)
    pts = np.zeros(uv.shape[:-1] + (3,))
    last_depth = None
    for t in range(T):
        d = np.asarray(depth(t, uv[t]), dtype=float)
        if d.shape != uv.shape[1:3] or not np.all(np.isfinite(d[vis[t]])):
            raise DepthLookupError(f"depth source failed at frame {t}")
        if last_depth is not None:
            d = np.where(vis[t], d, last_depth)  # occluded samples keep their last depth
        if np.any(d <= 0):
            raise DepthLookupError(f"non-positive depth at frame {t}")
        pts[t] = camera.unproject(uv[t], d)
        last_depth = d
    window = min(config.window, T if T % 2 else T - 1)
    pts = smooth(pts, window, vis)

    ref_vis = vis[0].ravel()
    ref_pts = pts[0].reshape(-1, 3)
    if reference is None:
        p0, R0 = ref_pts[ref_vis].mean(axis=0), np.eye(3)
    else:
        p0, R0 = np.asarray(reference[0], float), np.asarray(reference[1], float)
    poses = np.zeros((T, 6))
    for t in range(T):
        m = ref_vis & vis[t].ravel()
        fit = rigid_merge(pts[t].reshape(-1, 3)[m], ref_pts[m])
        poses[t, :3] = fit.apply(p0)
        poses[t, 3:] = matrix_to_rpy(fit.R @ R0)
    times = np.arange(T) * config.frame_dt
    wps, ts = resample_arclength(poses, times, config.P)
    return Trajectory3D(wps, ts, stream)


def resample_arclength(poses: np.ndarray, times: np.ndarray, P: int) -> tuple[np.ndarray, np.ndarray]:
    """Evenly spaced (by path length) waypoints with interpolated orientation and time.

    Endpoints are copied from the first and last pose.
    """
    if P < 2:
        raise ValueError("P must be >= 2")
    pos = poses[:, :3]
    ang = np.unwrap(poses[:, 3:], axis=0)
    s = np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(pos, axis=0), axis=1))])
    L = s[-1]
    out = np.zeros((P, 6))
    if L <= 1e-12:
        out[:] = poses[0]
        out[-1] = poses[-1]
        return out, np.linspace(times[0], times[-1], P)
    targets = np.linspace(0.0, L, P)
    ts = np.zeros(P)
    for k, sk in enumerate(targets):
        i = int(np.searchsorted(s, sk, side="left"))
        if i == 0:
            out[k, :3], out[k, 3:], ts[k] = pos[0], ang[0], times[0]
            continue
        i = min(i, len(s) - 1)
        f = (sk - s[i - 1]) / (s[i] - s[i - 1])
        out[k, :3] = pos[i - 1] + f * (pos[i] - pos[i - 1])
        out[k, 3:] = ang[i - 1] + f * (ang[i] - ang[i - 1])
        ts[k] = times[i - 1] + f * (times[i] - times[i - 1])
    out[0] = np.r_[pos[0], ang[0]]
    out[-1] = np.r_[pos[-1], ang[-1]]
    ts[0], ts[-1] = times[0], max(times[-1], ts[-2] + 1e-9)
    out[:, 3:] = wrap_angle(out[:, 3:])
    return out, ts
