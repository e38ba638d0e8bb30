"""Pinhole geometry: poses, depth rendering and ground-truth synthesis.

Poses are stored world-to-camera: a world point X maps to R @ X + t in the
camera frame (x right, y down, z forward).  Pixel (u, v) has its center at
integer coordinates; u indexes columns.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import grey_dilation
from scipy.spatial.transform import Rotation

Z_MIN = 0.1


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    @property
    def extent(self):
        return self.width, self.height

    def to_text(self) -> str:
        return f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r} {self.width} {self.height}\n"

    @classmethod
    def from_text(cls, text: str) -> "CameraIntrinsics":
        fx, fy, cx, cy, w, h = text.split()
        return cls(float(fx), float(fy), float(cx), float(cy), int(w), int(h))


@dataclass(frozen=True)
class PoseSE3:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_camera_center(cls, r_c2w, center) -> "PoseSE3":
        r = np.asarray(r_c2w, dtype=np.float64).T
        return cls(r, -r @ np.asarray(center, dtype=np.float64))

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -rt @ self.translation)

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return PoseSE3(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(np.allclose(r.T @ r, np.eye(3), atol=tol) and abs(np.linalg.det(r) - 1) < tol)


def project(points_cam: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Continuous pixel coordinates (N, 2) of camera-frame points."""
    z = points_cam[:, 2]
    return np.stack([K.fx * points_cam[:, 0] / z + K.cx, K.fy * points_cam[:, 1] / z + K.cy], axis=1)


def back_project(u, v, depth, K: CameraIntrinsics) -> np.ndarray:
    u, v, depth = np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float)
    return np.stack([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth], axis=-1)


def _splat(points_cam: np.ndarray, K: CameraIntrinsics, z_min: float = Z_MIN):
    """Nearest-pixel z-buffer; returns (depth map, winning point index or -1)."""
    h, w = K.height, K.width
    depth = np.zeros((h, w))
    winner = np.full((h, w), -1, dtype=np.int64)
    z = points_cam[:, 2]
    front = np.flatnonzero(z > z_min)
    if front.size == 0:
        return depth, winner
    uv = project(points_cam[front], K)
    col = np.floor(uv[:, 0] + 0.5)
    row = np.floor(uv[:, 1] + 0.5)
    inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    idx = front[inside]
    pix = row[inside].astype(np.int64) * w + col[inside].astype(np.int64)
    zz = z[idx]
    # min depth wins; ties go to the smaller point index
    order = np.lexsort((idx, zz, pix))
    pix, idx, zz = pix[order], idx[order], zz[order]
    first = np.ones(pix.size, dtype=bool)
    first[1:] = pix[1:] != pix[:-1]
    depth.ravel()[pix[first]] = zz[first]
    winner.ravel()[pix[first]] = idx[first]
    return depth, winner


def render_depth(cloud: np.ndarray, pose: PoseSE3, K: CameraIntrinsics, z_min: float = Z_MIN) -> np.ndarray:
    """Depth map (H, W) in meters; 0 where no point projects."""
    return _splat(pose.apply(cloud), K, z_min)[0]


def depth_to_points(depth: np.ndarray, K: CameraIntrinsics):
    """Camera-frame points of all nonzero depth pixels, plus their (u, v)."""
    v, u = np.nonzero(depth > 0)
    return back_project(u, v, depth[v, u], K), u, v


@dataclass
class FlowField:
    values: np.ndarray  # (H, W, 2) as (dx, dy)
    valid: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.where(self.valid[..., None], self.values, 0.0)

    @classmethod
    def zeros(cls, h: int, w: int) -> "FlowField":
        return cls(np.zeros((h, w, 2)), np.zeros((h, w), dtype=bool))


def gt_flow(cloud: np.ndarray, T_gt: PoseSE3, T_init: PoseSE3, K: CameraIntrinsics) -> FlowField:
    """Flow on the T_init grid: projection under T_gt minus projection under T_init."""
    pts_init = T_init.apply(cloud)
    _, winner = _splat(pts_init, K)
    valid = winner >= 0
    idx = winner[valid]
    flow = np.zeros((K.height, K.width, 2))
    if idx.size:
        src = project(pts_init[idx], K)
        pts_gt = T_gt.apply(cloud[idx])
        ok = pts_gt[:, 2] > Z_MIN
        dst = np.where(ok[:, None], project(np.where(ok[:, None], pts_gt, 1.0), K), np.nan)
        d = dst - src
        # a point behind the ground-truth camera has no defined correspondence
        keep = np.isfinite(d).all(axis=1)
        vv, uu = np.nonzero(valid)
        valid[vv[~keep], uu[~keep]] = False
        flow[vv[keep], uu[keep]] = d[keep]
    return FlowField(flow, valid)


def dilate_depth(depth: np.ndarray, size: int = 3, iterations: int = 1) -> np.ndarray:
    """Grey dilation: each pixel takes the max over its size x size neighborhood."""
    out = depth
    for _ in range(iterations):
        out = grey_dilation(out, size=(size, size), mode="constant", cval=0.0)
    return out


def gt_edge_map(event_image: np.ndarray, depth_gt: np.ndarray, T_gt: PoseSE3, T_init: PoseSE3,
                K: CameraIntrinsics, dilation: int = 3, iterations: int = 1) -> np.ndarray:
    """Binary edge map on the T_init grid from event pixels lifted with ground-truth depth."""
    dil = dilate_depth(depth_gt, dilation, iterations)
    v, u = np.nonzero((event_image > 0) & (dil > 0))
    edges = np.zeros((K.height, K.width))
    if u.size == 0:
        return edges
    p_edge = back_project(u, v, dil[v, u], K)
    rel = T_init @ T_gt.inverse()
    pts = rel.apply(p_edge)
    pts = pts[pts[:, 2] > Z_MIN]
    uv = project(pts, K)
    col = np.floor(uv[:, 0] + 0.5)
    row = np.floor(uv[:, 1] + 0.5)
    inside = (col >= 0) & (col < K.width) & (row >= 0) & (row < K.height)
    edges[row[inside].astype(int), col[inside].astype(int)] = 1.0
    return edges


def perturb_pose(T_gt: PoseSE3, seed, trans_range_cm: float = 50.0, rot_range_deg: float = 5.0) -> PoseSE3:
    """Uniform per-axis offsets of the camera position and orientation (Euler xyz)."""
    if trans_range_cm < 0 or rot_range_deg < 0:
        raise ValueError("perturbation ranges must be non-negative")
    rng = np.random.default_rng(seed)
    dt = rng.uniform(-trans_range_cm, trans_range_cm, 3) / 100.0
    angles = rng.uniform(-rot_range_deg, rot_range_deg, 3)
    r_delta = Rotation.from_euler("xyz", angles, degrees=True).as_matrix()
    # camera-to-world rotation becomes R_gt^T @ r_delta and the center moves by dt
    r_init = r_delta.T @ T_gt.rotation
    t_init = r_delta.T @ T_gt.translation - r_init @ dt
    return PoseSE3(r_init, t_init)


def rotation_angle_deg(r: np.ndarray) -> float:
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# -- file formats ------------------------------------------------------------

PC_MAGIC = b"LEARPC01"


def save_cloud(path, cloud: np.ndarray, binary: bool = True) -> None:
    cloud = np.asarray(cloud)
    if binary:
        with open(path, "wb") as fh:
            fh.write(PC_MAGIC)
            fh.write(struct.pack("<Q", len(cloud)))
            fh.write(np.ascontiguousarray(cloud, dtype="<f4").tobytes())
    else:
        np.savetxt(path, cloud, fmt="%.9g")


def load_cloud(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] == PC_MAGIC:
        (n,) = struct.unpack_from("<Q", raw, 8)
        pts = np.frombuffer(raw, dtype="<f4", count=3 * n, offset=16).reshape(n, 3).astype(np.float64)
    else:
        pts = np.loadtxt(raw.decode().splitlines(), ndmin=2).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError(f"{path}: non-finite point coordinates")
    return pts


def save_poses(path, poses) -> None:
    blocks = []
    for p in poses:
        blocks.append("\n".join(" ".join(repr(float(x)) for x in row) for row in p.matrix))
    Path(path).write_text("\n\n".join(blocks) + "\n")


def load_poses(path):
    vals = np.array(Path(path).read_text().split(), dtype=np.float64)
    if vals.size % 16:
        raise ValueError(f"{path}: expected 4x4 matrices, got {vals.size} numbers")
    return [PoseSE3.from_matrix(m) for m in vals.reshape(-1, 4, 4)]
