"""Held-out evaluation: flow EPE, pose errors, and the JSON/CSV metrics report."""

from __future__ import annotations

import csv
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats

from .autograd import no_grad
from .config import ExperimentConfig
from .dataset import load_split
from .flow import endpoint_error
from .fusion import ModelConfig, config_of, forward
from .pose import PnPStats, PoseUnrecoverable, extract_correspondences, pose_error, ransac_pnp
from .synthetic import _sub_seed
from .train import load_model, model_view, prepare_batch

SAMPLE_FIELDS = ("name", "epe", "transl_cm", "rot_deg", "init_transl_cm", "init_rot_deg", "inliers",
                 "correspondences", "pose_failed")


class ConfigMismatch(ValueError):
    pass


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("LEAR_THREADS", "1")))
    except ValueError:
        return 1


def check_compatible(cfg: ExperimentConfig, weights) -> None:
    want = cfg.model_config().to_meta()
    have = config_of(weights).to_meta()
    diff = sorted(k for k in want if want[k] != have.get(k))
    if diff:
        detail = "; ".join(f"{k}: config={want[k]} checkpoint={have.get(k)}" for k in diff)
        raise ConfigMismatch(f"config/checkpoint mismatch in {', '.join(diff)} ({detail})")
    ab = weights.meta.get("ablation", {})
    for key in ("oracle_mask", "direct_mask"):
        if key in ab and ab[key] != getattr(cfg.ablation, key):
            raise ConfigMismatch(f"config/checkpoint mismatch in ablation.{key}: "
                                 f"config={getattr(cfg.ablation, key)} checkpoint={ab[key]}")


def solve_pose(cfg: ExperimentConfig, depth, flow_hw2, sample, seed: int):
    """Absolute pose from the flow; a failed solve keeps the initial pose and is flagged."""
    corrs = extract_correspondences(depth, flow_hw2, sample.K)
    st = PnPStats()
    try:
        rel, mask = ransac_pnp(corrs, sample.K, cfg.eval.reproj_threshold, cfg.eval.confidence, cfg.eval.max_iters,
                               seed=seed, stats=st)
        return rel @ sample.T_init, int(mask.sum()), len(corrs), False
    except PoseUnrecoverable:
        return sample.T_init, 0, len(corrs), True


def _aggregate(values):
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "median": float(np.median(a))} if a.size else {"mean": None, "median": None}


def predict_flows(cfg: ExperimentConfig, weights, samples, iters: int):
    """Per-sample (final flow (H,W,2), per-iteration EPE list, metric depth used for matching)."""
    net = model_view(weights)
    mcfg: ModelConfig = config_of(net)
    out = []
    bs = cfg.train.batch_size
    with no_grad():
        for i in range(0, len(samples), bs):
            chunk = samples[i:i + bs]
            batch = prepare_batch(cfg, chunk, weights, net.dtype)
            res = forward(batch.depth, batch.event, net, iters, mcfg)
            for j, s in enumerate(chunk):
                per_iter = [endpoint_error(f.data[j:j + 1], batch.flow[j:j + 1], batch.valid[j:j + 1])
                            for f in res.flows]
                out.append((res.flows[-1].data[j].transpose(1, 2, 0).astype(np.float64), per_iter, batch.raw_depth[j]))
    return out


def evaluate(cfg: ExperimentConfig, checkpoint, data_dir, split: str | None = "test", iters: int | None = None,
             gt_flow: bool = False) -> dict:
    """Metrics report for ``split``; ``gt_flow`` feeds ground-truth flow to the solver instead of the network."""
    samples = load_split(data_dir, split)
    if not samples:
        raise ValueError(f"{data_dir}: no samples in split {split!r}")
    iters = iters or cfg.eval.iters
    ckpt_hash = None
    if gt_flow:
        preds = [(s.flow, [0.0], s.depth.astype(np.float64)) for s in samples]
    else:
        weights = load_model(checkpoint)
        check_compatible(cfg, weights)
        ckpt_hash = hashlib.sha256(Path(checkpoint).read_bytes()).hexdigest()
        preds = predict_flows(cfg, weights, samples, iters)

    def one(k):
        s, (flow, per_iter, depth) = samples[k], preds[k]
        pose, n_in, n_corr, failed = solve_pose(cfg, depth, flow, s, _sub_seed("ransac", cfg.seed, k))
        t_cm, r_deg = pose_error(pose, s.T_gt)
        t0, r0 = pose_error(s.T_init, s.T_gt)
        epe = endpoint_error(flow.transpose(2, 0, 1)[None], s.flow.transpose(2, 0, 1)[None], s.valid[None])
        return {"name": s.name, "epe": epe, "transl_cm": t_cm, "rot_deg": r_deg, "init_transl_cm": t0,
                "init_rot_deg": r0, "inliers": n_in, "correspondences": n_corr, "pose_failed": failed,
                "epe_by_iter": per_iter}

    # map keeps sample order, so aggregation is independent of the worker count
    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        rows = list(pool.map(one, range(len(samples))))

    agg = {k: _aggregate([r[k] for r in rows]) for k in ("epe", "transl_cm", "rot_deg", "init_transl_cm", "init_rot_deg")}
    agg["pose_failures"] = int(sum(r["pose_failed"] for r in rows))
    agg["epe_by_iter"] = [float(np.mean([r["epe_by_iter"][n] for r in rows])) for n in range(len(rows[0]["epe_by_iter"]))]
    return {
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "checkpoint_sha256": ckpt_hash,
        "split": split,
        "iters": 0 if gt_flow else iters,
        "flow_source": "ground_truth" if gt_flow else "network",
        "samples": rows,
        "aggregate": agg,
    }


def write_report(report: dict, out_prefix) -> tuple[Path, Path]:
    """``<prefix>.json`` (sorted keys) and ``<prefix>.csv`` (one row per sample)."""
    out_prefix = Path(out_prefix)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    jpath, cpath = out_prefix.with_suffix(".json"), out_prefix.with_suffix(".csv")
    jpath.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    with open(cpath, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(SAMPLE_FIELDS)
        for r in report["samples"]:
            wr.writerow([r[k] if isinstance(r[k], (str, bool, int)) else repr(float(r[k])) for k in SAMPLE_FIELDS])
    return jpath, cpath


def compare_epe(better: list, worse: list, rel_gap: float = 0.02, alpha: float = 0.05) -> dict:
    """Paired comparison of per-sample EPE: is ``better`` lower by >= ``rel_gap``, or statistically tied?"""
    a, b = np.asarray(better, float), np.asarray(worse, float)
    ma, mb = float(a.mean()), float(b.mean())
    gap = (mb - ma) / mb if mb > 0 else 0.0
    diff = b - a
    if np.allclose(diff, diff[0]):
        p = 1.0 if abs(diff[0]) < 1e-12 else 0.0
    else:
        p = float(stats.ttest_rel(a, b).pvalue)
    tie = p >= alpha
    return {"mean_better": ma, "mean_worse": mb, "rel_gap": gap, "p_value": p, "tie": tie,
            "ordered": gap >= rel_gap, "pass": gap >= rel_gap or tie}
