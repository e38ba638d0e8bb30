"""Procedural desk-scale scenes with exact ground truth.

A scene is a room (floor plus optional walls) holding boxes, cylinders and
free-standing panels.  Surfaces are sampled uniformly; creases (box edges,
panel borders, cylinder rims) are sampled four times denser along their
length and are the only places that emit events.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import grey_erosion
from scipy.spatial.transform import Rotation, Slerp

from . import events as ev
from .geometry import (
    Z_MIN, CameraIntrinsics, FlowField, PoseSE3, gt_edge_map, gt_flow, perturb_pose, project, render_depth,
)

CREASE_FACTOR = 4.0


@dataclass(frozen=True)
class SceneParams:
    n_primitives: int = 7
    extent_m: float = 8.0
    points_per_m2: float = 600.0
    room: bool = True
    kinds: tuple = ("box", "cylinder", "panel")
    n_keyframes: int = 81
    keyframe_dt_us: int = 200_000


@dataclass
class SyntheticScene:
    cloud: np.ndarray
    crease: np.ndarray  # bool mask over cloud rows
    trajectory: list  # [(t_us, PoseSE3)]
    seed: int
    params: SceneParams = field(default_factory=SceneParams)

    @property
    def crease_points(self) -> np.ndarray:
        return self.cloud[self.crease]


def default_intrinsics(width: int = 128, height: int = 96) -> CameraIntrinsics:
    f = 0.78 * width
    return CameraIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def _sub_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


# -- primitive sampling --------------------------------------------------------

class _Sampler:
    def __init__(self, rng, density):
        self.rng = rng
        self.density = density
        self.surface, self.creases = [], []

    def rect(self, origin, e1, e2, border=True):
        origin, e1, e2 = (np.asarray(a, float) for a in (origin, e1, e2))
        area = np.linalg.norm(np.cross(e1, e2))
        n = int(round(area * self.density))
        ab = self.rng.random((n, 2))
        self.surface.append(origin + ab[:, :1] * e1 + ab[:, 1:] * e2)
        if border:
            corners = [origin, origin + e1, origin + e1 + e2, origin + e2]
            for a, b in zip(corners, corners[1:] + corners[:1]):
                self.segment(a, b)

    def segment(self, a, b):
        length = np.linalg.norm(b - a)
        n = max(2, int(round(length * CREASE_FACTOR * np.sqrt(self.density))))
        s = np.linspace(0.0, 1.0, n)[:, None]
        self.creases.append(a + s * (b - a))

    def box(self, center, size, yaw):
        rot = Rotation.from_euler("z", yaw).as_matrix()
        sx, sy, sz = size
        lo = np.array([-sx / 2, -sy / 2, 0.0])
        ex, ey, ez = np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), np.array([0, 0, sz])
        n0 = len(self.surface), len(self.creases)
        # five visible faces; the bottom rests on the floor
        self.rect(lo, ex, ez, border=False)
        self.rect(lo + ey, ex, ez, border=False)
        self.rect(lo, ey, ez, border=False)
        self.rect(lo + ex, ey, ez, border=False)
        self.rect(lo + ez, ex, ey, border=False)
        corners = [lo + a * ex + b * ey + c * ez for a in (0, 1) for b in (0, 1) for c in (0, 1)]
        for i, a in enumerate(corners):
            for b in corners[i + 1:]:
                if np.count_nonzero(np.abs(a - b) > 1e-12) == 1:
                    self.segment(a, b)
        self._place(n0, rot, np.asarray(center, float))

    def cylinder(self, center, radius, height):
        n0 = len(self.surface), len(self.creases)
        n = int(round(2 * np.pi * radius * height * self.density))
        th = self.rng.random(n) * 2 * np.pi
        self.surface.append(np.stack([radius * np.cos(th), radius * np.sin(th), self.rng.random(n) * height], 1))
        n = int(round(np.pi * radius ** 2 * self.density))
        r = radius * np.sqrt(self.rng.random(n))
        th = self.rng.random(n) * 2 * np.pi
        self.surface.append(np.stack([r * np.cos(th), r * np.sin(th), np.full(n, height)], 1))
        for z in (0.0, height):
            m = max(8, int(round(2 * np.pi * radius * CREASE_FACTOR * np.sqrt(self.density))))
            th = np.linspace(0, 2 * np.pi, m, endpoint=False)
            self.creases.append(np.stack([radius * np.cos(th), radius * np.sin(th), np.full(m, z)], 1))
        self._place(n0, np.eye(3), np.asarray(center, float))

    def _place(self, n0, rot, offset):
        for lst, start in ((self.surface, n0[0]), (self.creases, n0[1])):
            for i in range(start, len(lst)):
                lst[i] = lst[i] @ rot.T + offset

    def result(self):
        surf = np.concatenate(self.surface) if self.surface else np.zeros((0, 3))
        cre = np.concatenate(self.creases) if self.creases else np.zeros((0, 3))
        cloud = np.concatenate([surf, cre])
        mask = np.zeros(len(cloud), dtype=bool)
        mask[len(surf):] = True
        return cloud, mask


def _look_at(center, target) -> PoseSE3:
    fwd = target - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return PoseSE3.from_camera_center(np.stack([right, down, fwd], axis=1), center)


def gen_scene(seed: int, params: SceneParams | None = None) -> SyntheticScene:
    """Deterministic room scene with a closed camera loop around its center."""
    p = params or SceneParams()
    if p.n_primitives < 1:
        raise ValueError("n_primitives must be >= 1")
    rng = np.random.default_rng(_sub_seed("scene", seed))
    s = _Sampler(rng, p.points_per_m2)
    e = p.extent_m
    if p.room:
        h = 0.375 * e
        lo = -e / 2
        s.rect([lo, lo, 0], [e, 0, 0], [0, e, 0])
        s.rect([lo, lo, 0], [e, 0, 0], [0, 0, h])
        s.rect([lo, -lo, 0], [e, 0, 0], [0, 0, h])
        s.rect([lo, lo, 0], [0, e, 0], [0, 0, h])
        s.rect([-lo, lo, 0], [0, e, 0], [0, 0, h])
    for _ in range(p.n_primitives):
        kind = p.kinds[rng.integers(len(p.kinds))]
        r = 0.2 * e * np.sqrt(rng.random())
        a = rng.random() * 2 * np.pi
        base = np.array([r * np.cos(a), r * np.sin(a), 0.0])
        if kind == "box":
            s.box(base, rng.uniform(0.05, 0.12, 3) * e, rng.random() * np.pi)
        elif kind == "cylinder":
            s.cylinder(base, rng.uniform(0.02, 0.05) * e, rng.uniform(0.06, 0.18) * e)
        elif kind == "panel":
            yaw = rng.random() * np.pi
            w, hh = rng.uniform(0.08, 0.15) * e, rng.uniform(0.08, 0.2) * e
            u = np.array([np.cos(yaw), np.sin(yaw), 0.0]) * w
            s.rect(base - u / 2 + [0, 0, rng.uniform(0.0, 0.05) * e], u, [0, 0, hh])
        elif kind == "plane":
            normal = rng.standard_normal(3)
            normal /= np.linalg.norm(normal)
            e1 = np.cross(normal, [1.0, 0.0, 0.0] if abs(normal[0]) < 0.9 else [0.0, 1.0, 0.0])
            e1 /= np.linalg.norm(e1)
            e2 = np.cross(normal, e1)
            s.rect(base + [0, 0, 0.1 * e], e1 * 0.15 * e, e2 * 0.15 * e)
        else:
            raise ValueError(f"unknown primitive kind {kind!r}")
    cloud, mask = s.result()
    if len(cloud) == 0:
        raise ValueError("scene sampled no points; raise points_per_m2")

    traj = []
    phase = rng.random() * 2 * np.pi
    radius = 0.42 * e
    for k in range(p.n_keyframes):
        th = phase + 2 * np.pi * k / max(1, p.n_keyframes - 1)
        center = np.array([radius * np.cos(th), radius * np.sin(th), 0.15 * e + 0.03 * e * np.sin(2 * th)])
        yaw = np.radians(12.0) * np.sin(3 * th)
        look = np.array([-np.cos(th + yaw), -np.sin(th + yaw), 0.0]) * radius
        target = center + look + np.array([0, 0, -0.05 * e])
        traj.append((k * p.keyframe_dt_us, _look_at(center, target)))
    return SyntheticScene(cloud, mask, traj, seed, p)


# -- events ---------------------------------------------------------------------

def interpolate_pose(a: PoseSE3, b: PoseSE3, s: float) -> PoseSE3:
    """Slerp the orientation and lerp the camera center between two poses."""
    if s <= 0:
        return a
    if s >= 1:
        return b
    rots = Rotation.from_matrix(np.stack([a.rotation.T, b.rotation.T]))
    r = Slerp([0.0, 1.0], rots)([s]).as_matrix()[0]
    return PoseSE3.from_camera_center(r, (1 - s) * a.center + s * b.center)


def pose_at(scene: SyntheticScene, t_us: float) -> PoseSE3:
    times = np.array([t for t, _ in scene.trajectory], dtype=np.float64)
    k = int(np.clip(np.searchsorted(times, t_us, side="right") - 1, 0, len(times) - 2))
    s = (t_us - times[k]) / (times[k + 1] - times[k])
    return interpolate_pose(scene.trajectory[k][1], scene.trajectory[k + 1][1], s)


def visible_creases(scene: SyntheticScene, pose: PoseSE3, K: CameraIntrinsics, rel_tol: float = 0.1) -> np.ndarray:
    """Crease points not hidden behind nearer surfaces of the full cloud.

    Empty z-buffer pixels borrow the nearest depth of their 3x3 neighborhood.
    """
    depth = render_depth(scene.cloud, pose, K)
    filled = grey_erosion(np.where(depth > 0, depth, np.inf), size=(3, 3), mode="nearest")
    near = np.where(depth > 0, depth, filled)
    pts = scene.crease_points
    cam = pose.apply(pts)
    keep = np.zeros(len(pts), dtype=bool)
    front = cam[:, 2] > Z_MIN
    uv = project(cam[front], K)
    col = np.floor(uv[:, 0] + 0.5).astype(np.int64)
    row = np.floor(uv[:, 1] + 0.5).astype(np.int64)
    inside = (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
    z = cam[front, 2]
    vis = np.ones(len(z), dtype=bool)
    vis[inside] = z[inside] <= near[row[inside], col[inside]] * (1 + rel_tol) + 1e-6
    keep[np.flatnonzero(front)] = vis
    return pts[keep]


def events_from_points(points: np.ndarray, poses, times, K: CameraIntrinsics) -> ev.EventStream:
    """Emit an event whenever a point's rounded projection enters a new pixel.

    Polarity is the sign of the point's depth change over that substep.
    """
    if len(poses) < 2:
        raise ValueError("need at least two substeps")
    ts, xs, ys, ps = [], [], [], []
    prev_pix = prev_z = None
    for pose, t in zip(poses, times):
        cam = pose.apply(points)
        z = cam[:, 2]
        ok = z > Z_MIN
        uv = project(np.where(ok[:, None], cam, 1.0), K)
        col = np.floor(uv[:, 0] + 0.5)
        row = np.floor(uv[:, 1] + 0.5)
        ok &= (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
        pix = np.where(ok, row * K.width + col, -1).astype(np.int64)
        if prev_pix is not None:
            moved = (pix >= 0) & (prev_pix >= 0) & (pix != prev_pix)
            idx = np.flatnonzero(moved)
            ts.append(np.full(idx.size, int(round(t)), dtype=np.int64))
            xs.append(col[idx].astype(np.int64))
            ys.append(row[idx].astype(np.int64))
            ps.append(np.where(z[idx] >= prev_z[idx], 1, -1))
        prev_pix, prev_z = pix, z
    if not ts:
        return ev.EventStream.empty(K.width, K.height)
    t = np.concatenate(ts)
    order = np.argsort(t, kind="stable")
    return ev.EventStream.from_arrays(t[order], np.concatenate(xs)[order], np.concatenate(ys)[order],
                                      np.concatenate(ps)[order], K.width, K.height)


def gen_events(scene: SyntheticScene, pose_a: PoseSE3, pose_b: PoseSE3, window, K: CameraIntrinsics,
               substeps: int = 12, noise_rate: float = 0.0, seed: int = 0) -> ev.EventStream:
    """Crease-crossing events while the camera moves from ``pose_a`` to ``pose_b`` over ``window``."""
    if substeps < 2:
        raise ValueError("substeps must be >= 2")
    t0, t1 = window
    times = np.linspace(t0, t1, substeps)
    poses = [interpolate_pose(pose_a, pose_b, s) for s in np.linspace(0.0, 1.0, substeps)]
    pts = visible_creases(scene, pose_b, K)
    stream = events_from_points(pts, poses, times, K)
    if noise_rate > 0:
        stream = _add_salt(stream, noise_rate, window, np.random.default_rng(seed))
    return stream


def _add_salt(stream, rate, window, rng):
    n = rng.poisson(rate * stream.width * stream.height)
    noise = np.zeros(n, dtype=ev.EVENT_DTYPE)
    noise["t"] = rng.integers(int(window[0]), int(window[1]), n)
    noise["x"] = rng.integers(0, stream.width, n)
    noise["y"] = rng.integers(0, stream.height, n)
    noise["p"] = rng.choice([-1, 1], n)
    merged = np.concatenate([stream.events, noise])
    return ev.EventStream(merged[np.argsort(merged["t"], kind="stable")], stream.width, stream.height)


# -- samples ----------------------------------------------------------------------

@dataclass(frozen=True)
class PerturbParams:
    trans_range_cm: float = 50.0
    rot_range_deg: float = 5.0


@dataclass(frozen=True)
class EventParams:
    window_us: int = 100_000
    substeps: int = 12
    stc_window_us: int = ev.DEFAULT_WINDOW_US
    trail_window_us: int = ev.DEFAULT_WINDOW_US
    noise_rate: float = 0.0


@dataclass
class Sample:
    depth: np.ndarray
    event_image: np.ndarray
    f_gt: FlowField
    edge_gt: np.ndarray
    T_gt: PoseSE3
    T_init: PoseSE3
    K: CameraIntrinsics
    events: ev.EventStream | None = None
    window: tuple = (0, 1)


def num_samples(scene: SyntheticScene) -> int:
    return len(scene.trajectory) - 1


def gen_sample(scene: SyntheticScene, index: int, perturb: PerturbParams | None = None,
               K: CameraIntrinsics | None = None, event_params: EventParams | None = None,
               edge_dilation: int = 3, edge_dilation_iters: int = 1) -> Sample:
    """Sample ``index`` ends at keyframe ``index + 1``; the depth comes from the perturbed initial pose."""
    if not 0 <= index < num_samples(scene):
        raise IndexError(f"sample index {index} out of range [0, {num_samples(scene)})")
    perturb = perturb or PerturbParams()
    K = K or default_intrinsics()
    ep = event_params or EventParams()
    t1, T_gt = scene.trajectory[index + 1]
    t0 = t1 - ep.window_us
    pose_a = pose_at(scene, t0)
    stream = gen_events(scene, pose_a, T_gt, (t0, t1), K, ep.substeps, ep.noise_rate,
                        seed=_sub_seed("noise", scene.seed, index))
    stream = ev.trail_filter(ev.stc_filter(stream, ep.stc_window_us), ep.trail_window_us)
    image = ev.make_event_image(stream, (t0, t1 + 1), (K.width, K.height)).values

    T_init = perturb_pose(T_gt, _sub_seed("perturb", scene.seed, index), perturb.trans_range_cm, perturb.rot_range_deg)
    depth = render_depth(scene.cloud, T_init, K)
    flow = gt_flow(scene.cloud, T_gt, T_init, K)
    depth_gt = render_depth(scene.cloud, T_gt, K)
    edges = gt_edge_map(image, depth_gt, T_gt, T_init, K, edge_dilation, edge_dilation_iters)
    return Sample(depth, image, flow, edges, T_gt, T_init, K, stream, (t0, t1 + 1))
