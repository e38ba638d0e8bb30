"""Command-line entry point: ``lear {synth,train,eval,infer,viz}``.

Every failure prints one JSON line ``{"error": CODE, "message": ...}`` to
stderr and exits nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import yaml

from . import events as ev
from .autograd import CheckpointError, ShapeError, Tensor, no_grad
from .config import ConfigError, ExperimentConfig
from .dataset import DatasetError, load_manifest, load_sample, synthesize, write_flo
from .evaluate import ConfigMismatch, check_compatible, evaluate, write_report
from .fusion import forward, normalize_depth
from .geometry import CameraIntrinsics, load_cloud, load_poses, render_depth, save_poses
from .pose import PoseUnrecoverable, localize
from .train import TrainingDiverged, load_model, model_view, prepare_batch, train

EXIT_CODES = {
    "E_USAGE": 2, "E_CONFIG": 3, "E_DATA": 4, "E_MISMATCH": 5, "E_CHECKPOINT": 6, "E_DIVERGED": 7,
    "E_POSE": 8, "E_SHAPE": 9, "E_IO": 10, "E_INTERNAL": 1,
}


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def classify(exc: BaseException) -> str:
    for types, code in ((CliError, None), (ConfigError, "E_CONFIG"), (DatasetError, "E_DATA"),
                        (ConfigMismatch, "E_MISMATCH"), (CheckpointError, "E_CHECKPOINT"),
                        (TrainingDiverged, "E_DIVERGED"), (PoseUnrecoverable, "E_POSE"), (ShapeError, "E_SHAPE"),
                        (OSError, "E_IO")):
        if isinstance(exc, types):
            return code or exc.code
    return "E_INTERNAL"


def load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for item in args.set or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        node = overrides
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(raw)
    return cfg.replace(**overrides) if overrides else cfg


def _print_progress(kind, step, row):
    if step % 10 == 0:
        vals = " ".join(f"{k}={v:.4g}" for k, v in row.items() if k != "step")
        print(f"[{kind}] step {step} {vals}", file=sys.stderr, flush=True)


# -- commands -------------------------------------------------------------------

def cmd_synth(args):
    cfg = load_config(args)
    manifest = synthesize(cfg, args.out)
    print(json.dumps({"samples": len(manifest["samples"]), "out": str(args.out), "config_hash": cfg.hash()}))


def cmd_train(args):
    cfg = load_config(args)
    load_manifest(args.data)
    res = train(cfg, args.data, args.out, log_path=args.log, resume=args.resume,
                progress=None if args.quiet else _print_progress)
    last = res.log[-1] if res.log else {}
    print(json.dumps({"steps": res.steps, "checkpoint": str(res.checkpoint), "log": str(res.log_path),
                      "final_total": last.get("total")}))


def cmd_eval(args):
    cfg = load_config(args)
    if not args.gt_flow and not args.checkpoint:
        raise CliError("E_USAGE", "eval needs --checkpoint unless --gt-flow is given")
    report = evaluate(cfg, args.checkpoint, args.data, split=args.split, iters=args.iters, gt_flow=args.gt_flow)
    jpath, cpath = write_report(report, args.out)
    agg = report["aggregate"]
    print(json.dumps({"report": str(jpath), "csv": str(cpath), "epe_mean": agg["epe"]["mean"],
                      "transl_cm_median": agg["transl_cm"]["median"], "rot_deg_median": agg["rot_deg"]["median"]}))


def _read_events(path, K: CameraIntrinsics):
    if str(path).endswith(".csv"):
        return ev.load_events_csv(path, K.width, K.height)
    return ev.load_events(path)


def cmd_infer(args):
    """Localize one query: point cloud + initial pose + raw events -> flow and pose."""
    cfg = load_config(args)
    weights = load_model(args.checkpoint)
    check_compatible(cfg, weights)
    K = CameraIntrinsics.from_text(Path(args.intrinsics).read_text())
    T_init = load_poses(args.init_pose)[0]
    cloud = load_cloud(args.cloud)
    stream = _read_events(args.events, K)
    if len(stream) == 0 and args.window is None:
        raise CliError("E_DATA", f"{args.events}: no events")
    t0, t1 = args.window if args.window else (int(stream.events["t"][0]), int(stream.events["t"][-1]) + 1)
    e = cfg.data.events
    stream = ev.trail_filter(ev.stc_filter(stream, e.stc_window_us), e.trail_window_us)
    image = ev.make_event_image(stream, (t0, t1), (K.width, K.height)).values
    depth = render_depth(cloud, T_init, K)
    net = model_view(weights)
    if cfg.ablation.oracle_mask:
        raise CliError("E_CONFIG", "oracle_mask needs ground-truth edges and cannot run on raw inputs")
    if cfg.ablation.direct_mask:
        from .dataset import StoredSample
        stub = StoredSample("query", "test", depth.astype(np.float32), image.astype(np.float32),
                            np.zeros(depth.shape + (2,)), depth > 0, np.zeros_like(depth, dtype=np.float32),
                            T_init, T_init, K)
        batch = prepare_batch(cfg, [stub], weights, net.dtype)
        d_in, depth = batch.depth, batch.raw_depth[0]
    else:
        d_in = normalize_depth(depth[None, None]).astype(net.dtype)
    with no_grad():
        res = forward(Tensor(d_in), Tensor(image[None, None].astype(net.dtype)), net, args.iters or cfg.eval.iters)
    flow = res.flows[-1].data[0].transpose(1, 2, 0).astype(np.float64)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_flo(out / "flow.flo", flow)
    pose = localize(depth, flow, K, T_init, seed=cfg.seed, reproj_threshold=cfg.eval.reproj_threshold,
                    confidence=cfg.eval.confidence, max_iters=cfg.eval.max_iters)
    save_poses(out / "pose.txt", [pose])
    print(json.dumps({"flow": str(out / "flow.flo"), "pose": str(out / "pose.txt")}))


def cmd_viz(args):
    from . import viz
    from .geometry import PoseSE3
    cfg = load_config(args)
    manifest = load_manifest(args.data)
    entries = [e for e in manifest["samples"] if e["name"] == args.sample]
    if not entries:
        raise CliError("E_DATA", f"{args.data}: no sample named {args.sample!r}")
    sample = load_sample(args.data, entries[0])
    weights = load_model(args.checkpoint)
    check_compatible(cfg, weights)
    net = model_view(weights)
    n = args.iters or cfg.eval.iters
    batch = prepare_batch(cfg, [sample], weights, net.dtype)
    with no_grad():
        res = forward(batch.depth, batch.event, net, n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    flows = [f.data[0].transpose(1, 2, 0) for f in res.flows]
    scale = max(float(np.abs(sample.flow).max()), 1e-6)
    viz.write_ppm(out / "flow.ppm", viz.flow_to_color(flows[-1], scale))
    viz.write_ppm(out / "flow_gt.ppm", viz.flow_to_color(sample.flow, scale))
    written = ["flow.ppm", "flow_gt.ppm"]
    if res.edges:
        viz.write_pgm(out / "edge.pgm", viz.to_gray(res.edges[-1].data[0, 0]))
        viz.write_pgm(out / "edge_hed.pgm", viz.to_gray(res.hed_fused.data[0, 0]))
        written += ["edge.pgm", "edge_hed.pgm"]
    viz.write_pgm(out / "edge_gt.pgm", viz.to_gray(sample.edge))
    viz.write_pgm(out / "event.pgm", viz.to_gray(sample.event))
    rel = (sample.T_gt @ sample.T_init.inverse())
    viz.write_ppm(out / "overlay_init.ppm", viz.point_overlay(sample.event, batch.raw_depth[0], sample.K, None))
    try:
        pose = localize(batch.raw_depth[0], flows[-1].astype(np.float64), sample.K, sample.T_init, seed=cfg.seed)
        est = pose @ sample.T_init.inverse()
    except PoseUnrecoverable:
        est = PoseSE3.identity()
    viz.write_ppm(out / "overlay_pred.ppm", viz.point_overlay(sample.event, batch.raw_depth[0], sample.K, est))
    viz.write_ppm(out / "overlay_gt.ppm", viz.point_overlay(sample.event, batch.raw_depth[0], sample.K, rel))
    written += ["edge_gt.pgm", "event.pgm", "overlay_init.ppm", "overlay_pred.ppm", "overlay_gt.ppm"]
    for k in viz.panel_indices(n):
        name = f"iter_{k:02d}.ppm"
        edge = res.edges[k - 1].data[0, 0] if res.edges else None
        viz.write_ppm(out / name, viz.iteration_panel(flows[k - 1], edge, scale))
        written.append(name)
    print(json.dumps({"out": str(out), "files": written}))


# -- parser -----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("E_USAGE", message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lear", description="Event-camera localization against a prior point cloud.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config (defaults if omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. train.steps=50")

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train a model on a dataset's train split")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="training log CSV (default: next to the checkpoint)")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate flow and pose on a split")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--out", required=True, help="report prefix; writes .json and .csv")
    sp.add_argument("--split", default="test")
    sp.add_argument("--iters", type=int)
    sp.add_argument("--gt-flow", action="store_true", help="feed ground-truth flow to the solver")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("infer", help="localize one query from raw inputs")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--cloud", required=True)
    sp.add_argument("--events", required=True, help="binary event file or t,x,y,p CSV")
    sp.add_argument("--intrinsics", required=True)
    sp.add_argument("--init-pose", required=True)
    sp.add_argument("--window", type=int, nargs=2, metavar=("T0", "T1"))
    sp.add_argument("--iters", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("viz", help="write flow/edge/overlay images for one sample")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--sample", required=True)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_viz)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return 0
    except Exception as exc:  # every failure becomes one parsable line
        code = classify(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(json.dumps({"error": code, "message": msg}), file=sys.stderr)
        return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
