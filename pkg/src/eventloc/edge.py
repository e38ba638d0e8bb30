"""HED-style edge detector over depth maps, and its class-balanced loss."""

from __future__ import annotations

import numpy as np

from .autograd import ModelWeights, ShapeError, Tensor, conv, ops

EDGE_STRIDES = (1, 2, 2, 2, 2)  # cumulative resolutions 1, 1/2, 1/4, 1/8, 1/16
PROB_CLAMP = 1e-7


def check_extent(x: Tensor, multiple: int):
    h, w = x.shape[-2:]
    if h % multiple or w % multiple:
        raise ShapeError(f"input extent must be divisible by {multiple}; pad the raster first", x.shape)


def init_edge_branch(init, widths) -> None:
    c_in = 1
    for i, c in enumerate(widths, start=1):
        init.conv(f"edge.e{i}", c_in, c, 3)
        init.conv(f"edge.side{i}", c, 1, 1, gain=1.0)
        c_in = c
    init.conv("edge.fuse", len(widths), 1, 1, gain=1.0)
    w = init.weights
    # start the fused map as the mean of the side logits
    w["edge.fuse.weight"].data[...] = 1.0 / len(widths)


def edge_layer(x: Tensor, w: ModelWeights, i: int) -> Tensor:
    """Encoder layer ``i`` (1-based): 3x3 conv at the layer's stride, then ReLU."""
    return ops.relu(conv(x, w, f"edge.e{i}", stride=EDGE_STRIDES[i - 1]))


def edge_heads(features, w: ModelWeights, size):
    """Side logits (upsampled to ``size``) and the fused logit."""
    sides = []
    for i, f in enumerate(features, start=1):
        s = conv(f, w, f"edge.side{i}")
        sides.append(ops.resize_bilinear(s, size) if s.shape[-2:] != tuple(size) else s)
    fused = conv(ops.concat(sides, axis=1), w, "edge.fuse")
    return sides, fused


def edge_forward(depth: Tensor, w: ModelWeights):
    """Run the detector alone: (five side probability maps, fused map, encoder features)."""
    check_extent(depth, 16)
    feats = []
    x = depth
    for i in range(1, 6):
        x = edge_layer(x, w, i)
        feats.append(x)
    sides, fused = edge_heads(feats, w, depth.shape[-2:])
    return [ops.sigmoid(s) for s in sides], ops.sigmoid(fused), feats


def balance_weight(gt: np.ndarray) -> float:
    """Fraction of non-edge pixels."""
    gt = np.asarray(gt)
    return float(np.count_nonzero(gt == 0) / gt.size)


def edge_loss(pred: Tensor, gt, weight=None) -> Tensor:
    """Class-balanced cross-entropy, mean over pixels and batch.

    ``pred`` holds probabilities (N,1,H,W) or (H,W); ``weight`` overrides the
    per-image balance weight.
    """
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ShapeError("edge_loss", pred.shape, gt.shape)
    if weight is None:
        if gt.ndim == 4:
            weight = np.array([balance_weight(g) for g in gt], dtype=pred.dtype).reshape(-1, 1, 1, 1)
        else:
            weight = balance_weight(gt)
    p = ops.clamp(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = ops.log(p) * (weight * gt)
    neg = ops.log(1.0 - p) * ((1.0 - weight) * (1.0 - gt))
    return -ops.mean(pos + neg)
