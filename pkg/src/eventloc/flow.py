"""Correspondence machinery: encoders, all-pairs correlation pyramid, lookup, masked flow loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import ModelWeights, ShapeError, Tensor, conv, ops
from .edge import check_extent

FLOW_STRIDES = (2, 1, 2, 2, 1)  # cumulative resolutions 1/2, 1/2, 1/4, 1/8, 1/8
FLOW_EPS = 1e-8


def init_encoder(init, prefix: str, widths, c_in: int = 1) -> None:
    for i, c in enumerate(widths, start=1):
        init.conv(f"{prefix}.l{i}", c_in, c, 3, gain=2.0 if i < len(widths) else 1.0)
        c_in = c


def encoder_layer(x: Tensor, w: ModelWeights, prefix: str, i: int, norm: bool = False) -> Tensor:
    """Layer ``i`` (1-based) of a five-layer encoder; the last layer stays linear.

    ``norm`` adds instance normalization before the ReLU of the hidden layers.
    """
    y = conv(x, w, f"{prefix}.l{i}", stride=FLOW_STRIDES[i - 1])
    if i == len(FLOW_STRIDES):
        return y
    if norm:
        y = ops.instance_norm(y)
    return ops.relu(y)


def run_encoder(x: Tensor, w: ModelWeights, prefix: str, norm: bool = False):
    feats = []
    for i in range(1, len(FLOW_STRIDES) + 1):
        x = encoder_layer(x, w, prefix, i, norm)
        feats.append(x)
    return feats


def encode_features(depth: Tensor, event: Tensor, w: ModelWeights, norm: bool = False):
    """Depth feature pyramid (five maps) and the 1/8-resolution event features."""
    check_extent(depth, 8)
    check_extent(event, 8)
    return run_encoder(depth, w, "fnet_d", norm), run_encoder(event, w, "fnet_e", norm)[-1]


def encode_context(depth: Tensor, w: ModelWeights):
    """Split the context map into the initial hidden state (tanh) and context features (ReLU)."""
    check_extent(depth, 8)
    ctx = run_encoder(depth, w, "cnet")[-1]
    c = ctx.shape[1] // 2
    h0, fctx = ops.split(ctx, [c, c], axis=1)
    return ops.tanh(h0), ops.relu(fctx)


@dataclass
class CorrelationPyramid:
    levels: list  # Tensor (N*H*W, 1, H_l, W_l) per level
    n: int
    h: int
    w: int


def build_corr_pyramid(f_d: Tensor, f_ev: Tensor, num_levels: int = 4) -> CorrelationPyramid:
    """All-pairs dot products / sqrt(C), then repeated 2x2 average pooling over the target axes."""
    if f_d.shape != f_ev.shape:
        raise ShapeError("build_corr_pyramid", f_d.shape, f_ev.shape)
    n, c, h, w = f_d.shape
    a = ops.transpose(ops.reshape(f_d, (n, c, h * w)), (0, 2, 1))
    b = ops.reshape(f_ev, (n, c, h * w))
    corr = ops.matmul(a, b) * (1.0 / np.sqrt(c))
    vol = ops.reshape(corr, (n * h * w, 1, h, w))
    levels = [vol]
    for _ in range(num_levels - 1):
        vol = ops.avg_pool2(vol)
        levels.append(vol)
    return CorrelationPyramid(levels, n, h, w)


def window_offsets(radius: int, dtype=np.float64) -> np.ndarray:
    """(2r+1, 2r+1, 2) offsets, row-major over (dy, dx)."""
    r = np.arange(-radius, radius + 1, dtype=dtype)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return np.stack([dx, dy], axis=-1)


def lookup_corr(pyr: CorrelationPyramid, flow: Tensor, radius: int = 4) -> Tensor:
    """Bilinear (2r+1)^2 window per level around (pixel + flow) / 2^level; levels concatenated."""
    n, h, w = pyr.n, pyr.h, pyr.w
    if flow.shape != (n, 2, h, w):
        raise ShapeError("lookup_corr", flow.shape, (n, 2, h, w))
    k = 2 * radius + 1
    grid = ops.coords_grid(n, h, w, flow.dtype)
    centers = ops.reshape(ops.transpose(flow, (0, 2, 3, 1)) + grid, (n * h * w, 1, 1, 2))
    delta = window_offsets(radius, flow.dtype)[None]
    out = []
    for lvl, vol in enumerate(pyr.levels):
        coords = centers * (1.0 / 2 ** lvl) + delta
        s = ops.bilinear_sample(vol, coords)
        out.append(ops.transpose(ops.reshape(s, (n, h, w, k * k)), (0, 3, 1, 2)))
    return ops.concat(out, axis=1)


def flow_loss(pred: Tensor, gt, valid) -> Tensor:
    """Mean end-point error over valid pixels; pred/gt are (N,2,H,W), valid (N,H,W)."""
    gt = np.asarray(gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise ShapeError("flow_loss", pred.shape, gt.shape)
    mask = np.asarray(valid, dtype=pred.dtype)
    err = ops.norm(pred - gt, axis=1)
    return ops.sum(err * mask) * (1.0 / (float(mask.sum()) + FLOW_EPS))


def endpoint_error(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float:
    """Mean EPE over valid pixels (arrays shaped like :func:`flow_loss` inputs)."""
    m = np.asarray(valid, bool)
    if not m.any():
        return 0.0
    return float(np.linalg.norm(pred - gt, axis=1)[m].mean())
