"""Portable pixel-map output: flow colour wheel, edge maps, point overlays, iteration panels."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, PoseSE3, depth_to_points, project


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary P6 from an (H,W,3) uint8 array."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {rgb.shape}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    """Binary P5 from an (H,W) uint8 array."""
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"expected (H, W) image, got {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(gray).tobytes())


def read_pnm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    # header is four whitespace-separated tokens, then exactly one whitespace byte before the pixels
    m = re.match(rb"(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if not m or int(m.group(4)) != 255:
        raise ValueError(f"{path}: unsupported pixel map")
    w, h = int(m.group(2)), int(m.group(3))
    ch = 3 if m.group(1) == b"P6" else 1
    arr = np.frombuffer(raw[m.end():m.end() + w * h * ch], dtype=np.uint8)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def color_wheel() -> np.ndarray:
    """(55,3) Middlebury hue wheel: red-yellow-green-cyan-blue-magenta."""
    segments = [(15, (255, 0, 0), (255, 255, 0)), (6, (255, 255, 0), (0, 255, 0)), (4, (0, 255, 0), (0, 255, 255)),
                (11, (0, 255, 255), (0, 0, 255)), (13, (0, 0, 255), (255, 0, 255)), (6, (255, 0, 255), (255, 0, 0))]
    rows = []
    for n, a, b in segments:
        t = np.arange(n)[:, None] / n
        rows.append(np.floor(np.array(a) + (np.array(b) - np.array(a)) * t))
    return np.concatenate(rows)


def flow_to_color(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """(H,W,2) flow to (H,W,3) uint8; zero flow maps to white, the wheel centre."""
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    scale = max_mag if max_mag else float(mag.max())
    if scale <= 0:
        return np.full(flow.shape[:2] + (3,), 255, dtype=np.uint8)
    u, v, rad = u / scale, v / scale, np.minimum(mag / scale, 1.0)
    wheel = color_wheel()
    ncols = len(wheel)
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(int)
    k1 = (k0 + 1) % ncols
    f = (fk - k0)[..., None]
    col = ((1 - f) * wheel[k0] + f * wheel[k1]) / 255.0
    col = 1 - rad[..., None] * (1 - col)
    return np.floor(255 * col).astype(np.uint8)


def to_gray(prob: np.ndarray) -> np.ndarray:
    return np.round(np.clip(prob, 0.0, 1.0) * 255).astype(np.uint8)


def point_overlay(event_image: np.ndarray, depth: np.ndarray, K: CameraIntrinsics, pose: PoseSE3 | None = None,
                  color=(255, 0, 0)) -> np.ndarray:
    """Event image in gray with the depth map's points projected through ``pose`` (relative to the depth frame)."""
    base = np.repeat(to_gray(event_image)[..., None], 3, axis=2)
    pts, _, _ = depth_to_points(depth, K)
    if len(pts):
        if pose is not None:
            pts = pose.apply(pts)
            pts = pts[pts[:, 2] > 1e-6]
        uv = np.round(project(pts, K)).astype(int)
        ok = (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
        base[uv[ok, 1], uv[ok, 0]] = color
    return base


def panel_indices(n: int):
    """1-based iterations shown in the panels: first, middle, last."""
    return sorted({1, max(1, n // 2), n})


def iteration_panel(flow: np.ndarray, edge: np.ndarray | None, max_mag: float) -> np.ndarray:
    """Flow colour image beside the edge probability map (or flow alone)."""
    left = flow_to_color(flow, max_mag)
    if edge is None:
        return left
    right = np.repeat(to_gray(edge)[..., None], 3, axis=2)
    return np.concatenate([left, right], axis=1)
