"""Joint edge/flow network: cross-task encoder fusion and iterative mutual refinement."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .autograd import Initializer, ModelWeights, ShapeError, Tensor, conv, conv_gru_step, ops
from .edge import check_extent, edge_heads, edge_layer, edge_loss, init_edge_branch
from .flow import (
    CorrelationPyramid, build_corr_pyramid, encode_context, encoder_layer, flow_loss, init_encoder, lookup_corr,
    run_encoder,
)

FUSED_LAYERS = (2, 3, 4)


@dataclass(frozen=True)
class ModelConfig:
    flow_widths: tuple = (32, 32, 48, 64, 64)
    edge_widths: tuple = (16, 32, 64, 96, 128)
    hidden: int = 64
    motion: int = 32
    corr_levels: int = 4
    corr_radius: int = 4
    feature_norm: bool = True  # instance norm in the depth and event feature encoders
    edge_branch: bool = True
    cff: bool = True
    ifr: bool = True

    @property
    def corr_channels(self) -> int:
        return self.corr_levels * (2 * self.corr_radius + 1) ** 2

    @property
    def edge_state(self) -> int:
        return self.edge_widths[3]

    def to_meta(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta.items() if k in cls.__dataclass_fields__})


def init_model(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelWeights:
    w = ModelWeights(meta={"model": cfg.to_meta(), "format": 1})
    init = Initializer(w, seed, dtype)
    init_encoder(init, "fnet_d", cfg.flow_widths)
    init_encoder(init, "fnet_e", cfg.flow_widths)
    init_encoder(init, "cnet", cfg.flow_widths[:-1] + (2 * cfg.hidden,))
    init.conv("ifr.motion", 2, cfg.motion, 3)
    init.gru("ifr.gru", cfg.hidden, cfg.corr_channels + cfg.motion + cfg.hidden)
    init.conv("ifr.head1", cfg.hidden, cfg.hidden, 3)
    init.conv("ifr.head2", cfg.hidden, 2, 3, gain=0.01)
    if cfg.edge_branch:
        init_edge_branch(init, cfg.edge_widths)
        if cfg.cff:
            for i in FUSED_LAYERS:
                c_ed, c_d = cfg.edge_widths[i - 1], cfg.flow_widths[i - 1]
                init.conv(f"cff.{i}.ed", c_ed + c_d, c_ed, 1, gain=1.0)
                init.conv(f"cff.{i}.d", c_ed + c_d, c_d, 1, gain=1.0)
                _identity_bypass(w, i, c_ed, c_d)
        half = cfg.edge_state // 2
        init.conv("ifr.edge_dec", cfg.edge_state, 1, 1, gain=1.0)
        if cfg.ifr:
            init.conv("ifr.corr_fuse", cfg.corr_channels + cfg.edge_state, cfg.corr_channels, 1, gain=1.0)
            _eye_block(w["ifr.corr_fuse.weight"].data, 0, 0.5)
            init.gru("ifr.edge_gru", half, cfg.flow_widths[-1] + half)
    return w


def _eye_block(kernel: np.ndarray, col0: int, scale: float):
    """Add ``scale`` times an identity block to a 1x1 kernel starting at input channel ``col0``."""
    c_out = kernel.shape[0]
    kernel[np.arange(c_out), col0 + np.arange(c_out), 0, 0] += scale


def _identity_bypass(w: ModelWeights, i: int, c_ed: int, c_d: int):
    # half-strength pass-through so each branch starts close to its unfused self
    _eye_block(w[f"cff.{i}.ed.weight"].data, 0, 0.5)
    _eye_block(w[f"cff.{i}.d.weight"].data, c_ed, 0.5)


def config_of(w: ModelWeights) -> ModelConfig:
    return ModelConfig.from_meta(w.meta["model"])


# -- cross-task fusion --------------------------------------------------------

def cff_fuse(f_ed: Tensor, f_d: Tensor, w: ModelWeights, layer: int):
    """Concatenate both branches' features and project back to each branch's width."""
    if f_ed.shape[0] != f_d.shape[0] or f_ed.shape[2:] != f_d.shape[2:]:
        raise ShapeError("cff_fuse", f_ed.shape, f_d.shape)
    x = ops.concat([f_ed, f_d], axis=1)
    return conv(x, w, f"cff.{layer}.ed"), conv(x, w, f"cff.{layer}.d")


def encode_joint(depth: Tensor, w: ModelWeights, cfg: ModelConfig):
    """Run the edge and depth encoders side by side, fusing the middle three layers.

    Returns (depth features per layer, edge features per layer).
    """
    if not cfg.edge_branch:
        return run_encoder(depth, w, "fnet_d", cfg.feature_norm), None
    xd, xe = depth, depth
    fd, fe = [], []
    for i in range(1, 6):
        xd = encoder_layer(xd, w, "fnet_d", i, cfg.feature_norm)
        xe = edge_layer(xe, w, i)
        if cfg.cff and i in FUSED_LAYERS:
            xe, xd = cff_fuse(xe, xd, w, i)
        fd.append(xd)
        fe.append(xe)
    return fd, fe


# -- iterative refinement -------------------------------------------------------

@dataclass
class IfrState:
    flow: Tensor  # (N,2,H/8,W/8)
    hidden: Tensor
    c_ed: Tensor | None = None
    h_ed: Tensor | None = None
    n: int = 0
    delta: Tensor | None = None

    @property
    def f_ed(self):
        if self.c_ed is None:
            return None
        return ops.concat([self.c_ed, self.h_ed], axis=1)


def ifr_step(state: IfrState, pyr: CorrelationPyramid, f_ev: Tensor, f_ctx: Tensor, w: ModelWeights,
             cfg: ModelConfig, zero_edge: bool = False, detach_flow: bool = False) -> IfrState:
    """One refinement iteration: edge-enriched correlation -> GRU -> flow update -> edge update.

    ``detach_flow`` stops gradients through the incoming flow estimate, so each
    update is trained as a correction of a fixed starting point.
    """
    prev = state.flow.detach() if detach_flow else state.flow
    corr = lookup_corr(pyr, prev, cfg.corr_radius)
    use_edges = cfg.edge_branch and cfg.ifr
    if use_edges:
        f_ed = state.f_ed
        if zero_edge:
            f_ed = Tensor(np.zeros(f_ed.shape, dtype=f_ed.dtype))
        corr = conv(ops.concat([corr, f_ed], axis=1), w, "ifr.corr_fuse")
    motion = ops.relu(conv(prev, w, "ifr.motion"))
    hidden = conv_gru_step(state.hidden, ops.concat([corr, motion, f_ctx], axis=1), w, "ifr.gru")
    delta = conv(ops.relu(conv(hidden, w, "ifr.head1")), w, "ifr.head2")
    flow = prev + delta
    c_ed, h_ed = state.c_ed, state.h_ed
    if use_edges:
        n, _, h, wd = flow.shape
        coords = ops.transpose(flow, (0, 2, 3, 1)) + ops.coords_grid(n, h, wd, flow.dtype)
        warped = ops.bilinear_sample(f_ev, coords)
        h_ed = conv_gru_step(h_ed, ops.concat([warped, c_ed], axis=1), w, "ifr.edge_gru")
    return IfrState(flow, hidden, c_ed, h_ed, state.n + 1, delta)


@dataclass
class ForwardResult:
    flows: list  # full-resolution (N,2,H,W) per iteration
    edges: list  # full-resolution probabilities (N,1,H,W) per iteration; empty without an edge branch
    hed_sides: list = field(default_factory=list)
    hed_fused: Tensor | None = None
    low_flows: list = field(default_factory=list)
    deltas: list = field(default_factory=list)


def normalize_depth(depth: np.ndarray) -> np.ndarray:
    """Scale each (N,1,H,W) depth image by its own max; empty images stay zero."""
    d = np.asarray(depth)
    peak = d.reshape(d.shape[0], -1).max(axis=1).reshape(-1, 1, 1, 1)
    return np.where(peak > 0, d / np.where(peak > 0, peak, 1.0), 0.0)


def forward(depth, event, w: ModelWeights, iters: int, cfg: ModelConfig | None = None,
            zero_edge: bool = False, detach_flow: bool = False) -> ForwardResult:
    """Full network on normalized (N,1,H,W) depth and event rasters."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    cfg = cfg or config_of(w)
    dtype = w.dtype
    depth = depth if isinstance(depth, Tensor) else Tensor(np.asarray(depth, dtype=dtype))
    event = event if isinstance(event, Tensor) else Tensor(np.asarray(event, dtype=dtype))
    check_extent(depth, 16 if cfg.edge_branch else 8)
    size = depth.shape[-2:]

    fd, fe = encode_joint(depth, w, cfg)
    f_d = fd[-1]
    f_ev = run_encoder(event, w, "fnet_e", cfg.feature_norm)[-1]
    h0, f_ctx = encode_context(depth, w)
    pyr = build_corr_pyramid(f_d, f_ev, cfg.corr_levels)

    res = ForwardResult([], [])
    state = IfrState(Tensor(np.zeros((f_d.shape[0], 2) + f_d.shape[2:], dtype=dtype)), h0)
    if cfg.edge_branch:
        sides, fused = edge_heads(fe, w, size)
        res.hed_sides = [ops.sigmoid(s) for s in sides]
        res.hed_fused = ops.sigmoid(fused)
        half = cfg.edge_state // 2
        c_ed, h_ed = ops.split(fe[3], [half, half], axis=1)
        state.c_ed, state.h_ed = ops.relu(c_ed), ops.tanh(h_ed)

    for _ in range(iters):
        state = ifr_step(state, pyr, f_ev, f_ctx, w, cfg, zero_edge, detach_flow)
        res.low_flows.append(state.flow)
        res.deltas.append(state.delta)
        res.flows.append(ops.upsample(state.flow, 8) * 8.0)
        if cfg.edge_branch:
            logit = conv(state.f_ed, w, "ifr.edge_dec")
            res.edges.append(ops.sigmoid(ops.upsample(logit, 8)))
    return res


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 100.0
    gamma: float = 0.8


def total_loss(res: ForwardResult, f_gt, valid, edge_gt, lw: LossWeights = LossWeights()):
    """Returns (total, flow term, edge term) as tensors.

    Flow: gamma-weighted sum over iterations.  Edge: mean over iterations of
    the decoded maps plus the mean over the detector's fused and side maps,
    both scaled by beta.
    """
    if not res.flows:
        raise ValueError("empty prediction sequence")
    n = len(res.flows)
    flow_term = None
    for i, f in enumerate(res.flows, start=1):
        term = flow_loss(f, f_gt, valid) * (lw.gamma ** (n - i))
        flow_term = term if flow_term is None else flow_term + term
    total = flow_term * lw.alpha
    edge_term = None
    if res.hed_fused is not None:
        gt = np.asarray(edge_gt)
        iter_terms = [edge_loss(p, gt) for p in res.edges]
        hed_terms = [edge_loss(p, gt) for p in [res.hed_fused] + res.hed_sides]
        edge_term = _mean(iter_terms) + _mean(hed_terms)
        total = total + edge_term * lw.beta
    return total, flow_term, edge_term


def _mean(terms):
    acc = terms[0]
    for t in terms[1:]:
        acc = acc + t
    return acc * (1.0 / len(terms))
