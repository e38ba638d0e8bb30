"""Training loop: batching, ablation wiring, logging, checkpoints and resume."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import (
    AdamState, Initializer, ModelWeights, Tensor, adam_step, clip_grad_norm, load_weights, no_grad, onecycle_lr, save_weights,
)
from .config import ExperimentConfig
from .dataset import Batch, StoredSample, load_split, make_batch
from .edge import edge_forward, edge_loss, init_edge_branch
from .fusion import LossWeights, ModelConfig, forward, init_model, total_loss
from .synthetic import _sub_seed

LOG_COLUMNS = ("step", "flow_loss", "edge_loss", "total", "lr")
MASK_PREFIX = "mask."
ADAM_M, ADAM_V = "adam.m:", "adam.v:"


class TrainingDiverged(RuntimeError):
    pass


# -- checkpoints with optimizer state ----------------------------------------------

def save_checkpoint(path, weights: ModelWeights, state: AdamState | None = None, extra_meta: dict | None = None):
    out = ModelWeights(meta={**weights.meta, **(extra_meta or {})})
    for name, p in weights.params.items():
        out.add(name, p.data)
    if state is not None:
        out.meta["adam_step"] = state.step
        for name in weights.params:
            if name in state.m:
                out.add(ADAM_M + name, state.m[name])
                out.add(ADAM_V + name, state.v[name])
    save_weights(out, path)


def load_checkpoint(path):
    """Returns (model weights, AdamState) from a file written by :func:`save_checkpoint`."""
    raw = load_weights(path)
    weights = ModelWeights(meta=dict(raw.meta))
    state = AdamState(step=int(raw.meta.get("adam_step", 0)))
    for name, p in raw.params.items():
        if name.startswith(ADAM_M):
            state.m[name[len(ADAM_M):]] = p.data.copy()
        elif name.startswith(ADAM_V):
            state.v[name[len(ADAM_V):]] = p.data.copy()
        else:
            weights.add(name, p.data.copy())
    weights.meta.pop("adam_step", None)
    return weights, state


def mask_detector(weights: ModelWeights) -> ModelWeights | None:
    """View of the separately trained edge detector stored under the ``mask.`` prefix."""
    names = [n for n in weights.names() if n.startswith(MASK_PREFIX)]
    if not names:
        return None
    view = ModelWeights(meta={})
    for n in names:
        view.params[n[len(MASK_PREFIX):]] = weights[n]
    return view


def model_view(weights: ModelWeights) -> ModelWeights:
    """The flow/edge network without the mask detector."""
    view = ModelWeights(meta=weights.meta)
    view.params = {n: p for n, p in weights.params.items() if not n.startswith(MASK_PREFIX)}
    return view


# -- ablation inputs ----------------------------------------------------------------

def depth_masks(cfg: ExperimentConfig, samples, weights: ModelWeights | None):
    """Per-sample depth masks for the oracle or predicted-edge settings; None otherwise."""
    if cfg.ablation.oracle_mask:
        return np.stack([s.edge > 0 for s in samples])
    if cfg.ablation.direct_mask:
        det = mask_detector(weights) if weights is not None else None
        if det is None:
            raise ValueError("direct_mask needs a trained edge detector in the checkpoint")
        plain = make_batch(samples, det.dtype)
        with no_grad():
            _, fused, _ = edge_forward(Tensor(plain.depth), det)
        return fused.data[:, 0] > cfg.train.edge_threshold
    return None


def prepare_batch(cfg: ExperimentConfig, samples, weights: ModelWeights | None = None, dtype=np.float32) -> Batch:
    return make_batch(samples, dtype, depth_masks(cfg, samples, weights))


def flip_batch(batch: Batch, seed: int, step: int) -> Batch:
    """Seeded per-sample mirror flips; mirroring an axis negates that flow component."""
    flips = np.random.default_rng(_sub_seed("augment", seed, step)).random((len(batch.depth), 2)) < 0.5
    arrays = [batch.depth.copy(), batch.event.copy(), batch.flow.copy(), batch.valid.copy(), batch.edge.copy(),
              batch.raw_depth.copy()]
    for i, (fx, fy) in enumerate(flips):
        for axis, sign_ch, on in ((-1, 0, fx), (-2, 1, fy)):
            if not on:
                continue
            for a in arrays:
                a[i] = np.flip(a[i], axis)
            arrays[2][i, sign_ch] *= -1
    return Batch(*arrays)


# -- schedule ------------------------------------------------------------------------

def batch_order(n: int, batch_size: int, seed: int, step: int):
    """Sample indices for ``step``: a fresh seeded permutation per epoch, incomplete tail dropped."""
    per_epoch = max(1, n // batch_size)
    epoch, pos = divmod(step, per_epoch)
    perm = np.random.default_rng(_sub_seed("batches", seed, epoch)).permutation(n)
    if n < batch_size:
        return perm.tolist()
    return perm[pos * batch_size:(pos + 1) * batch_size].tolist()


@dataclass
class TrainResult:
    steps: int
    log: list  # rows as dicts
    checkpoint: Path
    log_path: Path


def _write_log(path: Path, rows, append: bool):
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        if new:
            wr.writerow(LOG_COLUMNS)
        for r in rows:
            wr.writerow([r["step"]] + [repr(float(r[k])) for k in LOG_COLUMNS[1:]])


def _lr(cfg: ExperimentConfig, step: int, total: int) -> float:
    t = cfg.train
    return onecycle_lr(step, total, t.lr, t.pct_start, t.div_factor)


def train_edge_detector(cfg: ExperimentConfig, samples, progress=None) -> ModelWeights:
    """Stand-alone edge detector on depth (for the predicted-mask ablation)."""
    w = ModelWeights(meta={})
    init_edge_branch(Initializer(w, _sub_seed("mask-detector", cfg.seed), np.float32), cfg.model.edge_widths)
    state = AdamState()
    total = cfg.total_steps()
    for step in range(total):
        batch = make_batch([samples[i] for i in batch_order(len(samples), cfg.train.batch_size, cfg.seed + 1, step)])
        w.zero_grad()
        sides, fused, _ = edge_forward(Tensor(batch.depth), w)
        terms = [edge_loss(p, batch.edge) for p in [fused] + sides]
        loss = terms[0]
        for t in terms[1:]:
            loss = loss + t
        loss = loss * (1.0 / len(terms))
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(f"edge detector loss became non-finite at step {step}")
        loss.backward()
        grads = {n: w[n].grad for n in w.names()}
        clip_grad_norm(grads, cfg.train.grad_clip)
        adam_step(w, grads, state, _lr(cfg, step, total), cfg.train.weight_decay)
        if progress:
            progress("mask", step, {"edge_loss": loss.item()})
    return w


def train(cfg: ExperimentConfig, data_dir, out_checkpoint, log_path=None, resume=None, stop_after: int | None = None,
          progress=None) -> TrainResult:
    """Train on the manifest's train split.

    ``resume`` continues from a checkpoint written by an earlier (possibly
    interrupted) run of the same config; ``stop_after`` ends the run after that
    many total steps, leaving a resumable checkpoint.
    """
    out_checkpoint = Path(out_checkpoint)
    log_path = Path(log_path) if log_path else out_checkpoint.with_suffix(".csv")
    samples: list[StoredSample] = load_split(data_dir, "train")
    if not samples:
        raise ValueError(f"{data_dir}: no training samples")
    total = cfg.total_steps()
    mcfg: ModelConfig = cfg.model_config()
    lw = LossWeights(cfg.loss.alpha, cfg.loss.beta, cfg.loss.gamma)
    meta = {"model": mcfg.to_meta(), "config_hash": cfg.hash(), "ablation": cfg.to_dict()["ablation"], "format": 1}

    if resume:
        weights, state = load_checkpoint(resume)
        if weights.meta.get("config_hash") != cfg.hash():
            raise ValueError(f"{resume}: checkpoint was written for a different config")
        start = int(weights.meta.get("step", 0))
    else:
        weights = init_model(mcfg, seed=cfg.seed)
        weights.meta = meta
        state = AdamState()
        start = 0
        if cfg.ablation.direct_mask:
            det = train_edge_detector(cfg, samples, progress)
            for n in det.names():
                weights.add(MASK_PREFIX + n, det[n].data)
    net = model_view(weights)
    end = total if stop_after is None else min(total, stop_after)

    rows = []
    for step in range(start, end):
        idx = batch_order(len(samples), cfg.train.batch_size, cfg.seed, step)
        batch = prepare_batch(cfg, [samples[i] for i in idx], weights)
        if cfg.train.augment:
            batch = flip_batch(batch, cfg.seed, step)
        net.zero_grad()
        res = forward(batch.depth, batch.event, net, cfg.train.iters, mcfg, detach_flow=cfg.train.detach_flow)
        loss, fl, el = total_loss(res, batch.flow, batch.valid, batch.edge, lw)
        lr = _lr(cfg, step, total)
        row = {"step": step, "flow_loss": fl.item(), "edge_loss": el.item() if el is not None else 0.0,
               "total": loss.item(), "lr": lr}
        if not all(math.isfinite(row[k]) for k in ("flow_loss", "edge_loss", "total")):
            save_checkpoint(out_checkpoint, weights, state, {"step": step})
            _write_log(log_path, rows, append=bool(resume))
            raise TrainingDiverged(f"non-finite loss at step {step}; last good checkpoint kept at {out_checkpoint}")
        loss.backward()
        grads = {n: net[n].grad for n in net.names()}
        clip_grad_norm(grads, cfg.train.grad_clip)
        adam_step(net, grads, state, lr, cfg.train.weight_decay)
        rows.append(row)
        if progress:
            progress("train", step, row)
        every = cfg.train.checkpoint_every
        if every and (step + 1) % every == 0 and step + 1 < end:
            save_checkpoint(out_checkpoint, weights, state, {"step": step + 1})
    save_checkpoint(out_checkpoint, weights, state, {"step": end})
    _write_log(log_path, rows, append=bool(resume))
    return TrainResult(end, rows, out_checkpoint, log_path)


def load_model(path) -> ModelWeights:
    """Weights for inference (optimizer state dropped)."""
    weights, _ = load_checkpoint(path)
    return weights
