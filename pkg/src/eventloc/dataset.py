"""On-disk sample bundles, the hashed manifest, .flo files and batch assembly."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import events as ev
from .config import ExperimentConfig
from .geometry import CameraIntrinsics, FlowField, PoseSE3, load_cloud, load_poses, save_cloud, save_poses
from .synthetic import (
    EventParams, PerturbParams, Sample, SceneParams, _sub_seed, default_intrinsics, gen_sample, gen_scene,
)

FLO_MAGIC = 202021.25
MANIFEST = "manifest.json"
SAMPLE_FILES = ("depth.npy", "event.npy", "flow.flo", "valid.npy", "edge.npy", "events.evt", "poses.txt",
                "intrinsics.txt", "meta.json")


class DatasetError(RuntimeError):
    pass


# -- .flo ---------------------------------------------------------------------

def write_flo(path, flow: np.ndarray) -> None:
    """(H,W,2) flow in the standard PIEH layout."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, w, h))
        fh.write(np.ascontiguousarray(flow, dtype="<f4").tobytes())


def read_flo(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise ValueError(f"{path}: truncated flow file")
    magic, w, h = struct.unpack_from("<fii", raw, 0)
    if magic != FLO_MAGIC:
        raise ValueError(f"{path}: bad flow magic {magic}")
    if w <= 0 or h <= 0 or len(raw) != 12 + 8 * w * h:
        raise ValueError(f"{path}: size mismatch for {w}x{h} flow")
    return np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float64)


# -- helpers ------------------------------------------------------------------

def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _save_npy(path, arr):
    # plain .npy is byte-stable, unlike zip containers that embed timestamps
    np.save(path, np.ascontiguousarray(arr), allow_pickle=False)


def split_indices(total: int, n_test: int, mode: str = "interleave"):
    """Test positions within ``range(total)``: evenly spread, or the last ``n_test``."""
    if n_test == 0:
        return np.zeros(0, dtype=int)
    if mode == "tail":
        return np.arange(total - n_test, total)
    return ((np.arange(n_test) + 0.5) * total / n_test).astype(int)


def scene_params(cfg: ExperimentConfig) -> SceneParams:
    s = cfg.data.scene
    return SceneParams(n_primitives=s.n_primitives, extent_m=s.extent_m, points_per_m2=s.points_per_m2,
                       n_keyframes=s.n_keyframes, keyframe_dt_us=s.keyframe_dt_us)


def event_params(cfg: ExperimentConfig) -> EventParams:
    e = cfg.data.events
    return EventParams(e.window_us, e.substeps, e.stc_window_us, e.trail_window_us, e.noise_rate)


def intrinsics(cfg: ExperimentConfig) -> CameraIntrinsics:
    return default_intrinsics(cfg.data.width, cfg.data.height)


# -- writing ------------------------------------------------------------------

def write_sample(dirpath: Path, sample: Sample, meta: dict) -> dict:
    dirpath.mkdir(parents=True, exist_ok=True)
    _save_npy(dirpath / "depth.npy", sample.depth.astype(np.float32))
    _save_npy(dirpath / "event.npy", sample.event_image.astype(np.float32))
    write_flo(dirpath / "flow.flo", sample.f_gt.values)
    _save_npy(dirpath / "valid.npy", sample.f_gt.valid.astype(np.uint8))
    _save_npy(dirpath / "edge.npy", sample.edge_gt.astype(np.uint8))
    ev.save_events(dirpath / "events.evt", sample.events or ev.EventStream.empty(sample.K.width, sample.K.height))
    save_poses(dirpath / "poses.txt", [sample.T_gt, sample.T_init])
    (dirpath / "intrinsics.txt").write_text(sample.K.to_text() + "\n")
    (dirpath / "meta.json").write_text(json.dumps({**meta, "window": list(sample.window)}, sort_keys=True) + "\n")
    return {f: sha256_file(dirpath / f) for f in SAMPLE_FILES}


def synthesize(cfg: ExperimentConfig, out_dir, progress=None) -> dict:
    """Generate the configured split into ``out_dir`` and write the manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total = cfg.data.n_train + cfg.data.n_test
    params = scene_params(cfg)
    per_scene = params.n_keyframes - 1
    K = intrinsics(cfg)
    perturb = PerturbParams(cfg.data.trans_range_cm, cfg.data.rot_range_deg)
    ep = event_params(cfg)
    test = set(split_indices(total, cfg.data.n_test, cfg.data.split).tolist())
    manifest = {"config_hash": cfg.hash(), "seed": cfg.seed, "scenes": [], "samples": []}
    scene = None
    for i in range(total):
        s_idx, local = divmod(i, per_scene)
        if local == 0:
            scene = gen_scene(_sub_seed("dataset", cfg.seed, s_idx), params)
            sdir = out / f"scene_{s_idx:03d}"
            sdir.mkdir(exist_ok=True)
            save_cloud(sdir / "cloud.pc", scene.cloud)
            save_poses(sdir / "trajectory.txt", [p for _, p in scene.trajectory])
            manifest["scenes"].append({"name": sdir.name, "files": {
                f: sha256_file(sdir / f) for f in ("cloud.pc", "trajectory.txt")}})
        sample = gen_sample(scene, local, perturb, K, ep, cfg.data.edge_dilation, cfg.data.edge_dilation_iters)
        name = f"sample_{i:04d}"
        split = "test" if i in test else "train"
        files = write_sample(out / name, sample, {"scene": s_idx, "index": local, "split": split})
        manifest["samples"].append({"name": name, "split": split, "files": files})
        if progress:
            progress(i + 1, total)
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


# -- reading ------------------------------------------------------------------

@dataclass
class StoredSample:
    name: str
    split: str
    depth: np.ndarray  # (H,W) float32
    event: np.ndarray  # (H,W) float32
    flow: np.ndarray  # (H,W,2)
    valid: np.ndarray  # (H,W) bool
    edge: np.ndarray  # (H,W) float32 in {0,1}
    T_gt: PoseSE3
    T_init: PoseSE3
    K: CameraIntrinsics

    @property
    def flow_field(self) -> FlowField:
        return FlowField(self.flow, self.valid)


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / MANIFEST
    if not path.exists():
        raise DatasetError(f"{path}: manifest not found")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: unreadable manifest ({exc})") from exc


def load_sample(data_dir, entry: dict, verify: bool = True) -> StoredSample:
    d = Path(data_dir) / entry["name"]
    if verify:
        for fname, digest in entry["files"].items():
            p = d / fname
            if not p.exists():
                raise DatasetError(f"{p}: missing bundle file")
            if sha256_file(p) != digest:
                raise DatasetError(f"{p}: content hash mismatch (corrupt bundle)")
    T_gt, T_init = load_poses(d / "poses.txt")
    K = CameraIntrinsics.from_text((d / "intrinsics.txt").read_text())
    return StoredSample(entry["name"], entry["split"], np.load(d / "depth.npy"), np.load(d / "event.npy"),
                        read_flo(d / "flow.flo"), np.load(d / "valid.npy").astype(bool),
                        np.load(d / "edge.npy").astype(np.float32), T_gt, T_init, K)


def load_split(data_dir, split: str | None = None, verify: bool = True):
    """All samples of one split ("train", "test") or of the whole set, in manifest order."""
    manifest = load_manifest(data_dir)
    return [load_sample(data_dir, e, verify) for e in manifest["samples"] if split is None or e["split"] == split]


def verify_dataset(data_dir) -> int:
    manifest = load_manifest(data_dir)
    for entry in manifest["scenes"]:
        for fname, digest in entry["files"].items():
            p = Path(data_dir) / entry["name"] / fname
            if not p.exists() or sha256_file(p) != digest:
                raise DatasetError(f"{p}: content hash mismatch (corrupt bundle)")
    for entry in manifest["samples"]:
        load_sample(data_dir, entry, verify=True)
    return len(manifest["samples"])


def load_scene_cloud(data_dir, scene: int = 0) -> np.ndarray:
    return load_cloud(Path(data_dir) / f"scene_{scene:03d}" / "cloud.pc")


# -- batches ------------------------------------------------------------------

@dataclass
class Batch:
    depth: np.ndarray  # (N,1,H,W) normalized
    event: np.ndarray  # (N,1,H,W)
    flow: np.ndarray  # (N,2,H,W)
    valid: np.ndarray  # (N,H,W)
    edge: np.ndarray  # (N,1,H,W)
    raw_depth: np.ndarray  # (N,H,W) metric, after any masking


def make_batch(samples, dtype=np.float32, depth_mask=None) -> Batch:
    """Stack samples; ``depth_mask`` (N,H,W) zeroes depth outside the mask before normalization."""
    from .fusion import normalize_depth
    raw = np.stack([s.depth for s in samples]).astype(np.float64)
    if depth_mask is not None:
        raw = raw * np.asarray(depth_mask)
    return Batch(normalize_depth(raw[:, None]).astype(dtype),
                 np.stack([s.event for s in samples])[:, None].astype(dtype),
                 np.stack([s.flow.transpose(2, 0, 1) for s in samples]).astype(dtype),
                 np.stack([s.valid for s in samples]),
                 np.stack([s.edge for s in samples])[:, None].astype(dtype),
                 raw)
