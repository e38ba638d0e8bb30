"""2D-3D correspondences from flow, RANSAC P3P, robust Levenberg-Marquardt refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .geometry import CameraIntrinsics, PoseSE3, back_project, rotation_angle_deg

FRAME_MARGIN_PX = 20.0
REPROJ_THRESHOLD_PX = 12.0
HUBER_SCALE_PX = 1.0
MIN_SAMPLE_ANGLE_DEG = 1.0


class PoseUnrecoverable(RuntimeError):
    """Raised when no pose can be estimated; ``diagnostics`` says why."""

    def __init__(self, reason: str, **diagnostics):
        self.reason = reason
        self.diagnostics = diagnostics
        detail = ", ".join(f"{k}={v}" for k, v in diagnostics.items())
        super().__init__(f"pose unrecoverable: {reason}" + (f" ({detail})" if detail else ""))


@dataclass
class Correspondences:
    points: np.ndarray  # (M,3) in the initial camera frame
    pixels: np.ndarray  # (M,2) observed (u, v) = source + flow
    source: np.ndarray  # (M,2) integer source pixel (u, v)

    def __len__(self):
        return len(self.points)

    def subset(self, keep) -> "Correspondences":
        return Correspondences(self.points[keep], self.pixels[keep], self.source[keep])


def extract_correspondences(depth: np.ndarray, flow: np.ndarray, K: CameraIntrinsics,
                            margin: float = FRAME_MARGIN_PX) -> Correspondences:
    """One correspondence per pixel with depth > 0; observations further than ``margin`` outside the frame are dropped.

    ``flow`` is (H,W,2) holding (dx, dy).
    """
    depth = np.asarray(depth, dtype=np.float64)
    flow = np.asarray(flow, dtype=np.float64)
    if flow.shape != depth.shape + (2,):
        raise ValueError(f"flow shape {flow.shape} does not match depth {depth.shape}")
    v, u = np.nonzero(depth > 0)
    obs = np.stack([u, v], axis=1) + flow[v, u]
    keep = ((obs[:, 0] >= -margin) & (obs[:, 0] <= K.width - 1 + margin)
            & (obs[:, 1] >= -margin) & (obs[:, 1] <= K.height - 1 + margin))
    pts = back_project(u[keep], v[keep], depth[v[keep], u[keep]], K)
    return Correspondences(pts, obs[keep], np.stack([u[keep], v[keep]], axis=1))


# -- projection helpers -------------------------------------------------------

def _project(R, t, pts, K: CameraIntrinsics):
    pc = pts @ R.T + t
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([K.fx * pc[:, 0] / z + K.cx, K.fy * pc[:, 1] / z + K.cy], axis=1)
    uv[z <= 1e-9] = np.inf  # points behind the camera never count as inliers
    return uv, pc


def reprojection_errors(pose: PoseSE3, corrs: Correspondences, K: CameraIntrinsics) -> np.ndarray:
    uv, _ = _project(pose.rotation, pose.translation, corrs.points, K)
    return np.linalg.norm(uv - corrs.pixels, axis=1)


def bearings(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    b = np.stack([(pixels[:, 0] - K.cx) / K.fx, (pixels[:, 1] - K.cy) / K.fy, np.ones(len(pixels))], axis=1)
    return b / np.linalg.norm(b, axis=1, keepdims=True)


# -- minimal solver -----------------------------------------------------------------

def kabsch(src: np.ndarray, dst: np.ndarray):
    """Rigid (R, t) minimizing ||R src + t - dst||."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    u, _, vt = np.linalg.svd((dst - cd).T @ (src - cs))
    d = np.sign(np.linalg.det(u @ vt))
    R = u @ np.diag([1.0, 1.0, d]) @ vt
    return R, cd - R @ cs


def p3p(points: np.ndarray, rays: np.ndarray):
    """Grunert's P3P: up to four (R, t) mapping ``points`` (3,3) onto unit ``rays`` (3,3).

    Distances s1, s2 = u s1, s3 = v s1 along the rays satisfy the law of
    cosines for the three triangle sides; eliminating u leaves a quartic in v.
    """
    x1, x2, x3 = points
    a2 = float(np.sum((x2 - x3) ** 2))
    b2 = float(np.sum((x1 - x3) ** 2))
    c2 = float(np.sum((x1 - x2) ** 2))
    if min(a2, b2, c2) < 1e-18:
        return []
    ca = float(rays[1] @ rays[2])
    cb = float(rays[0] @ rays[2])
    cg = float(rays[0] @ rays[1])
    p = (a2 - c2) / b2
    q = (a2 + c2) / b2
    A4 = (p - 1) ** 2 - 4 * c2 / b2 * ca ** 2
    A3 = 4 * (p * (1 - p) * cb - (1 - q) * ca * cg + 2 * c2 / b2 * ca ** 2 * cb)
    A2 = 2 * (p ** 2 - 1 + 2 * p ** 2 * cb ** 2 + 2 * (b2 - c2) / b2 * ca ** 2
              - 4 * q * ca * cb * cg + 2 * (b2 - a2) / b2 * cg ** 2)
    A1 = 4 * (-p * (1 + p) * cb + 2 * a2 / b2 * cg ** 2 * cb - (1 - q) * ca * cg)
    A0 = (1 + p) ** 2 - 4 * a2 / b2 * cg ** 2
    coeffs = np.array([A4, A3, A2, A1, A0])
    if not np.all(np.isfinite(coeffs)) or np.max(np.abs(coeffs)) < 1e-15:
        return []
    roots = np.roots(coeffs / np.max(np.abs(coeffs)))
    out = []
    for v in roots:
        if abs(v.imag) > 1e-6 * max(1.0, abs(v.real)):
            continue
        v = v.real
        den = 2 * (cg - v * ca)
        if abs(den) < 1e-12:
            continue
        u = ((p - 1) * v ** 2 - 2 * p * cb * v + 1 + p) / den
        f = 1 + u ** 2 - 2 * u * cg
        if u <= 0 or v <= 0 or f <= 0:
            continue
        s1 = math.sqrt(c2 / f)
        cam = np.array([s1, u * s1, v * s1])[:, None] * rays
        R, t = kabsch(points, cam)
        out.append((R, t))
    return out


def _min_angle_deg(tri: np.ndarray) -> float:
    angles = []
    for i in range(3):
        a, b = tri[(i + 1) % 3] - tri[i], tri[(i + 2) % 3] - tri[i]
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na < 1e-12 or nb < 1e-12:
            return 0.0
        angles.append(math.degrees(math.acos(np.clip(a @ b / (na * nb), -1.0, 1.0))))
    return min(angles)


def is_degenerate(points: np.ndarray, rays: np.ndarray, min_angle_deg: float = MIN_SAMPLE_ANGLE_DEG) -> bool:
    """Near-collinear 3D sample (smallest triangle angle) or rays closer than ``min_angle_deg``."""
    if _min_angle_deg(points) < min_angle_deg:
        return True
    cos_min = math.cos(math.radians(min_angle_deg))
    return any(rays[i] @ rays[j] > cos_min for i, j in ((0, 1), (0, 2), (1, 2)))


# -- robust refinement -------------------------------------------------------------

def huber_cost(residual_norms: np.ndarray, scale: float = HUBER_SCALE_PX) -> float:
    r = np.abs(residual_norms)
    return float(np.sum(np.where(r <= scale, 0.5 * r ** 2, scale * (r - 0.5 * scale))))


def _residuals_jacobian(R, t, pts, pixels, K):
    uv, pc = _project(R, t, pts, K)
    e = uv - pixels
    x, y, z = pc.T
    iz = 1.0 / z
    # d(uv)/d(pc), then pc' = exp(w) pc + dt  ->  d pc / d(w, dt) = [-[pc]x, I]
    ju = np.stack([K.fx * iz, np.zeros_like(z), -K.fx * x * iz ** 2], axis=1)
    jv = np.stack([np.zeros_like(z), K.fy * iz, -K.fy * y * iz ** 2], axis=1)
    J = np.zeros((len(pts), 2, 6))
    for row, jr in ((0, ju), (1, jv)):
        J[:, row, :3] = np.cross(pc, jr)  # jr . (w x pc) = w . (pc x jr)
        J[:, row, 3:] = jr
    return e, J


def refine_lm(pose: PoseSE3, corrs: Correspondences, K: CameraIntrinsics, scale: float = HUBER_SCALE_PX,
              max_iters: int = 100, lam: float = 1e-3, tol: float = 1e-12):
    """Levenberg-Marquardt on the Huber reprojection cost with axis-angle increments.

    Steps are only accepted when the cost drops, so the returned cost is never
    above the starting one.  Returns (pose, cost_before, cost_after).
    """
    R, t = pose.rotation.copy(), pose.translation.copy()
    pts, pix = corrs.points, corrs.pixels

    def cost_of(R_, t_):
        uv, _ = _project(R_, t_, pts, K)
        r = np.linalg.norm(uv - pix, axis=1)
        return huber_cost(r, scale) if np.all(np.isfinite(r)) else np.inf

    cost0 = cost = cost_of(R, t)
    if not np.isfinite(cost):
        return pose, cost0, cost0
    for _ in range(max_iters):
        e, J = _residuals_jacobian(R, t, pts, pix, K)
        r = np.linalg.norm(e, axis=1)
        w = np.where(r <= scale, 1.0, scale / np.maximum(r, 1e-300))
        Jf = J.reshape(-1, 6)
        wf = np.repeat(w, 2)
        H = Jf.T @ (Jf * wf[:, None])
        g = Jf.T @ (wf * e.reshape(-1))
        improved = False
        while lam < 1e10:
            try:
                delta = -np.linalg.solve(H + lam * np.diag(np.diag(H) + 1e-12), g)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            dR = Rotation.from_rotvec(delta[:3]).as_matrix()
            R_new, t_new = dR @ R, dR @ t + delta[3:]
            new_cost = cost_of(R_new, t_new)
            if new_cost < cost:
                rel = (cost - new_cost) / max(cost, 1e-300)
                R, t, cost = R_new, t_new, new_cost
                lam = max(lam / 10, 1e-12)
                improved = True
                break
            lam *= 10
        if not improved or rel < tol or np.linalg.norm(delta) < 1e-14:
            break
    # re-orthonormalize accumulated rotation
    u, _, vt = np.linalg.svd(R)
    R_fin = u @ vt
    if cost_of(R_fin, t) <= cost:
        R = R_fin
    return PoseSE3(R, t), cost0, cost


# -- RANSAC ---------------------------------------------------------------------------

@dataclass
class PnPStats:
    iterations: int = 0
    degenerate_samples: int = 0
    num_inliers: int = 0
    cost_before: float = float("nan")
    cost_after: float = float("nan")
    extra: dict = field(default_factory=dict)


def ransac_iterations(inlier_ratio: float, confidence: float, sample_size: int, cap: int) -> int:
    w = inlier_ratio ** sample_size
    if w <= 0:
        return cap
    if w >= 1:
        return 1
    return int(min(cap, math.ceil(math.log(1 - confidence) / math.log(1 - w))))


def ransac_pnp(corrs: Correspondences, K: CameraIntrinsics, reproj_threshold: float = REPROJ_THRESHOLD_PX,
               confidence: float = 0.99, max_iters: int = 10000, seed: int = 0, stats: PnPStats | None = None):
    """Robust relative pose: returns (PoseSE3 mapping initial-frame points into the camera, inlier mask)."""
    m = len(corrs)
    stats = stats if stats is not None else PnPStats()
    if m < 4:
        raise PoseUnrecoverable("fewer than 4 correspondences", count=m)
    rng = np.random.default_rng(seed)
    rays = bearings(corrs.pixels, K)
    best_mask, best_count, best_err = None, -1, np.inf
    needed = max_iters
    it = 0
    while it < min(needed, max_iters):
        it += 1
        idx = rng.choice(m, 4, replace=False)
        tri, tri_rays = corrs.points[idx[:3]], rays[idx[:3]]
        if is_degenerate(tri, tri_rays):
            stats.degenerate_samples += 1
            continue
        cands = p3p(tri, tri_rays)
        if not cands:
            stats.degenerate_samples += 1
            continue
        # the fourth point picks among the up-to-four solutions
        chk = corrs.subset(idx[3:4])
        R, t = min(cands, key=lambda c: reprojection_errors(PoseSE3(*c), chk, K)[0])
        err = reprojection_errors(PoseSE3(R, t), corrs, K)
        mask = err < reproj_threshold
        count = int(mask.sum())
        score = float(np.sum(np.minimum(err, reproj_threshold)))
        if count > best_count or (count == best_count and score < best_err):
            best_mask, best_count, best_err, best = mask, count, score, PoseSE3(R, t)
            needed = ransac_iterations(count / m, confidence, 4, max_iters)
    stats.iterations = it
    if best_mask is None or best_count < 4:
        raise PoseUnrecoverable("no valid minimal solution", count=m, iterations=it,
                                degenerate=stats.degenerate_samples, best_inliers=max(best_count, 0))
    pose, c0, c1 = refine_lm(best, corrs.subset(best_mask), K)
    mask = reprojection_errors(pose, corrs, K) < reproj_threshold
    stats.num_inliers, stats.cost_before, stats.cost_after = int(mask.sum()), c0, c1
    return pose, mask


def pose_error(pred: PoseSE3, gt: PoseSE3):
    """(translation error in cm, rotation error in degrees) between two world-to-camera poses.

    Translation is compared on camera positions in the world.
    """
    return 100.0 * float(np.linalg.norm(pred.center - gt.center)), rotation_angle_deg(pred.rotation.T @ gt.rotation)


def localize(depth: np.ndarray, flow: np.ndarray, K: CameraIntrinsics, T_init: PoseSE3, seed: int = 0,
             stats: PnPStats | None = None, **ransac_kw) -> PoseSE3:
    """Absolute pose estimate from the initial-pose depth map and a depth-to-event flow field."""
    corrs = extract_correspondences(depth, flow, K)
    rel, _ = ransac_pnp(corrs, K, seed=seed, stats=stats, **ransac_kw)
    return rel @ T_init
