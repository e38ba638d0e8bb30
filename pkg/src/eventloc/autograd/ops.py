"""Differentiable operations over :class:`Tensor`.

Rasters use batch x channel x height x width layout throughout.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_node


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def flush_subnormal(a: np.ndarray) -> np.ndarray:
    """Zero values below the smallest normal float; subnormal operands slow BLAS kernels many times over."""
    if a.dtype.kind != "f":
        return a
    small = np.abs(a) < np.finfo(a.dtype).tiny
    return np.where(small, 0, a).astype(a.dtype, copy=False) if small.any() else a


def _pair(a, b):
    a = as_tensor(a, dtype=b.dtype if isinstance(b, Tensor) else None)
    b = as_tensor(b, dtype=a.dtype)
    return a, b


# -- element-wise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return make_node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_node(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so neither branch overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_node(out, (x,), lambda g: (g * (1.0 - out * out),))


def log(x: Tensor) -> Tensor:
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def clamp(x: Tensor, lo=None, hi=None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    inside = out == x.data
    return make_node(out, (x,), lambda g: (g * inside,))


def square(x: Tensor) -> Tensor:
    return make_node(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def norm(x: Tensor, axis: int = 1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as zero."""
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.where(n > 0, x.data / safe, 0.0),)

    return make_node(out, (x,), backward)


# -- reductions and shape ---------------------------------------------------

def sum(x: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    out = np.asarray(np.sum(x.data, axis=axis, keepdims=keepdims), dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_node(out, (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis, keepdims), 1.0 / float(count))


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return make_node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def index(x: Tensor, idx) -> Tensor:
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return make_node(np.array(out), (x,), backward)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)):
            raise ShapeError("concat", ref, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make_node(out, tensors, backward)


def split(x: Tensor, sizes, axis: int = 1):
    bounds = np.cumsum([0] + list(sizes))
    if bounds[-1] != x.shape[axis]:
        raise ShapeError("split", x.shape, tuple(sizes))
    sl = [slice(None)] * x.ndim
    parts = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sl[axis] = slice(int(lo), int(hi))
        parts.append(index(x, tuple(sl)))
    return parts


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    out = np.matmul(a.data, b.data)

    def backward(g):
        g = flush_subnormal(g)
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


# -- spatial ---------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation, NCHW input and OIkk kernel."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if x.ndim != 4 or kernel.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise ShapeError("conv2d", x.shape, kernel.shape)
    n, c, h, w = x.shape
    o, _, kh, kw = kernel.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d (kernel larger than padded input)", x.shape, kernel.shape)

    xd = flush_subnormal(x.data)
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    if kh == kw == 1:
        cols = np.ascontiguousarray(xd[:, :, ::stride, ::stride][:, :, :ho, :wo].transpose(0, 2, 3, 1)).reshape(-1, c)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = kernel.data.reshape(o, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))
    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        g = flush_subnormal(g)
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gk = (g2.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            # (n, c*kh*kw, ho*wo) keeps each kernel offset's slab contiguous for the scatter
            gcols = (wmat.T @ g.reshape(n, o, ho * wo)).reshape(n, c, kh, kw, ho, wo)
            if kh == kw == 1 and stride == 1:
                gxp = gcols[:, :, 0, 0]
            else:
                gxp = np.zeros(xd.shape, dtype=xd.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return make_node(out, parents, backward)


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling over the last two axes (odd trailing rows/cols dropped)."""
    *lead, h, w = x.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ShapeError("avg_pool2", x.shape)
    xs = x.data[..., : 2 * h2, : 2 * w2]
    out = xs.reshape(*lead, h2, 2, w2, 2).mean(axis=(-3, -1))

    def backward(g):
        full = np.zeros_like(x.data)
        up = np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25
        full[..., : 2 * h2, : 2 * w2] = up
        return (full,)

    return make_node(out, (x,), backward)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel standardization over the spatial axes (no affine part)."""
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + eps)
    out = xc * inv

    def backward(g):
        return (inv * (g - g.mean(axis=(2, 3), keepdims=True) - out * (g * out).mean(axis=(2, 3), keepdims=True)),)

    return make_node(out, (x,), backward)


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Linear interpolation matrix (n_out x n_in), half-pixel centers, edge clamped."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in), dtype=dtype)
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x: Tensor, size) -> Tensor:
    """Bilinear resize of the last two axes to ``size`` = (H_out, W_out)."""
    h, w = x.shape[-2:]
    mh = interp_matrix(h, size[0], x.dtype)
    mw = interp_matrix(w, size[1], x.dtype)
    out = mh @ (x.data @ mw.T)
    return make_node(out, (x,), lambda g: ((mh.T @ g) @ mw,))


def upsample(x: Tensor, factor: int) -> Tensor:
    return resize_bilinear(x, (x.shape[-2] * factor, x.shape[-1] * factor))


def bilinear_sample(field: Tensor, coords: Tensor) -> Tensor:
    """Sample ``field`` (N,C,H,W) at ``coords`` (N,Ho,Wo,2) holding (x, y) in source pixels.

    Outside the field the value is zero.  Differentiable in both arguments.
    """
    field, coords = as_tensor(field), as_tensor(coords)
    n, c, h, w = field.shape
    if coords.ndim != 4 or coords.shape[0] != n or coords.shape[-1] != 2:
        raise ShapeError("bilinear_sample", field.shape, coords.shape)
    _, ho, wo, _ = coords.shape
    dtype = field.dtype
    x = coords.data[..., 0].astype(dtype, copy=False)
    y = coords.data[..., 1].astype(dtype, copy=False)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    batch = np.arange(n).reshape(n, 1, 1)
    flat = np.ascontiguousarray(field.data.transpose(0, 2, 3, 1)).reshape(n * h * w, c)
    n_out = n * ho * wo

    corners = []
    for dx in (0, 1):
        for dy in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            lin = ((batch * h + np.clip(yi, 0, h - 1)) * w + np.clip(xi, 0, w - 1)).ravel()
            wx = fx if dx else 1 - fx
            wy = fy if dy else 1 - fy
            corners.append((dx, dy, lin, valid.ravel(), wx.ravel(), wy.ravel()))

    weights = [(wx * wy * valid).astype(dtype) for _, _, _, valid, wx, wy in corners]
    out_flat = None
    for (_, _, lin, _, _, _), wt in zip(corners, weights):
        term = flat[lin] * wt[:, None]
        out_flat = term if out_flat is None else out_flat + term
    out = np.ascontiguousarray(out_flat.reshape(n, ho, wo, c).transpose(0, 3, 1, 2))

    def backward(g):
        gflat = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n_out, c)
        gfield = gcoords = None
        if field.requires_grad:
            cols = np.concatenate([k[2] for k in corners])
            vals = np.concatenate(weights)
            if c == 1:
                # single-channel fields (correlation volumes): a weighted histogram is the transpose
                gf = np.bincount(cols, weights=vals * np.tile(gflat[:, 0], 4), minlength=n * h * w)[:, None]
            else:
                smat = sp.csr_matrix((vals, (np.tile(np.arange(n_out), 4), cols)), shape=(n_out, n * h * w))
                gf = np.asarray(smat.T @ gflat)
            gfield = np.ascontiguousarray(gf.astype(dtype, copy=False).reshape(n, h, w, c).transpose(0, 3, 1, 2))
        if coords.requires_grad:
            gx = np.zeros(n_out, dtype=dtype)
            gy = np.zeros(n_out, dtype=dtype)
            for dx, dy, lin, valid, wx, wy in corners:
                v = np.einsum("ij,ij->i", flat[lin], gflat) * valid
                gx += (1 if dx else -1) * wy * v
                gy += (1 if dy else -1) * wx * v
            gcoords = np.stack([gx, gy], axis=-1).reshape(coords.shape).astype(coords.dtype)
        return gfield, gcoords

    return make_node(out, (field, coords), backward)


def coords_grid(n: int, h: int, w: int, dtype=np.float64) -> np.ndarray:
    """Pixel-center grid (N,H,W,2) holding (x, y)."""
    ys, xs = np.meshgrid(np.arange(h, dtype=dtype), np.arange(w, dtype=dtype), indexing="ij")
    return np.broadcast_to(np.stack([xs, ys], axis=-1), (n, h, w, 2)).copy()
