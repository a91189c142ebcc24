"""Command-line surface: synthesize scenes, fit, warp, evaluate, check
gradients, visualize the anchor hierarchy.

Exit codes: 0 success, 2 I/O failure, 3 non-finite loss, 4 invalid
configuration, 5 dimension mismatch.  All randomness flows from --seed, so
same-flag runs produce byte-identical artifacts.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import fit as fit_mod
from . import io as io_mod
from . import metrics as metrics_mod
from . import structure as structure_mod
from . import synth as synth_mod
from .errors import (AnchorFlowError, DimensionMismatch, EmptyForeground,
                     InvalidConfig, NonFiniteLoss)
from .flow import AnchorSet
from .geometry import GridSpec, Point2, norm_to_pixel
from .losses import LossWeights
from .warp import ImageGrid, warp_image

EXIT_OK = 0
EXIT_IO = 2
EXIT_NONFINITE = 3
EXIT_CONFIG = 4
EXIT_DIMENSION = 5

GRADCHECK_TOLERANCE = 1e-4


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anchorflow")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write synthetic scenes with ground truth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("fit", help="fit the flow model to an image pair")
    p.add_argument("--src", required=True)
    p.add_argument("--drv", required=True)
    p.add_argument("--mode", choices=["none", "dam", "hdam"], default="dam")
    p.add_argument("--anchors", type=int, default=10)
    p.add_argument("--intermediates", type=int, default=3)
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("warp", help="warp an image along a DAMF flow")
    p.add_argument("--src", required=True)
    p.add_argument("--flow", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a fitted flow against ground truth")
    p.add_argument("--pred-flow", required=True)
    p.add_argument("--gt-flow", required=True)
    p.add_argument("--joints", required=True)
    p.add_argument("--generated", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--report", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the fit gradients")
    p.add_argument("--probes", type=int, default=64)

    p = sub.add_parser("viz", help="overlay the anchor hierarchy on an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    return parser


def _cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = synth_mod.benchmark_suite(args.seed, args.count)
    entries = []
    for idx, scene in enumerate(scenes):
        src, drv, gt = synth_mod.render_scene(scene)
        stem = f"scene_{idx:04d}"
        files = {
            "src": f"{stem}_src.ppm",
            "drv": f"{stem}_drv.ppm",
            "flow": f"{stem}_gt.damf",
            "joints": f"{stem}_joints.json",
            "mask": f"{stem}_mask.pgm",
        }
        io_mod.write_image(out / files["src"], src)
        io_mod.write_image(out / files["drv"], drv)
        io_mod.write_flow_field(out / files["flow"], gt.flow)
        io_mod.write_json(out / files["joints"], io_mod.joints_doc(gt.joints_src, gt.joints_drv))
        io_mod.write_image(out / files["mask"], ImageGrid(
            scene.spec, gt.foreground[None, :, :].astype(np.float64)))
        entries.append({
            "name": stem,
            "kind": scene.kind,
            "background": scene.background,
            "texture_seed": scene.texture_seed,
            "shift_px": list(scene.shift_px),
            "angle_deg": scene.angle_deg,
            "joint_angles_deg": list(scene.joint_angles_deg),
            "files": files,
        })
    io_mod.write_json(out / "manifest.json", {"seed": args.seed, "scenes": entries})
    return EXIT_OK


def _cmd_fit(args) -> int:
    src = io_mod.read_image(args.src)
    drv = io_mod.read_image(args.drv)
    config = fit_mod.FitConfig(
        num_anchors=args.anchors,
        num_intermediates=args.intermediates,
        mode=args.mode,
        iterations=args.iters,
        seed=args.seed,
        weights=LossWeights(),
    )
    config.validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_lines = []

    def sink(iteration, report):
        log_lines.append(io_mod.loss_report_line(iteration, report))

    state, history = fit_mod.fit_pair(src, drv, config, log_sink=sink)
    io_mod.write_anchor_set(out / "checkpoint.json", state.anchors, state.attention_logits)
    io_mod.write_mask_stack(out / "masks.damm", fit_mod.model_masks(state))
    io_mod.write_flow_field(out / "flow.damf", fit_mod.model_flow(state))
    with open(out / "loss_log.jsonl", "w", encoding="utf-8") as f:
        f.write("\n".join(log_lines))
        f.write("\n")
    print(io_mod.loss_report_line(config.iterations - 1, history[-1]))
    return EXIT_OK


def _cmd_warp(args) -> int:
    src = io_mod.read_image(args.src)
    field = io_mod.read_flow_field(args.flow)
    io_mod.write_image(args.out, warp_image(src, field))
    return EXIT_OK


def _cmd_eval(args) -> int:
    pred = io_mod.read_flow_field(args.pred_flow)
    gt = io_mod.read_flow_field(args.gt_flow)
    joints = io_mod.read_json(args.joints)
    generated = io_mod.read_image(args.generated)
    target = io_mod.read_image(args.target)

    l1 = metrics_mod.l1_metric(generated, target)
    joints_src = [Point2(float(x), float(y)) for x, y in joints["source"]]
    joints_drv = [Point2(float(x), float(y)) for x, y in joints["driving"]]
    pred_joints = metrics_mod.predict_joints(pred, joints_drv)
    akd = metrics_mod.akd_metric(pred_joints, joints_src)
    akd_px = metrics_mod.akd_px(pred_joints, joints_src, pred.spec)
    # No mask input on this surface: endpoint error covers the full frame.
    full = np.ones(pred.spec.shape, dtype=bool)
    epe = metrics_mod.epe_metric(pred, gt, full)

    scene = metrics_mod.SceneEval(name="pair", l1=l1, akd=akd, akd_px=akd_px, epe_px=epe)
    report = metrics_mod.aggregate_report([scene])
    io_mod.write_json(args.report, report.to_doc())
    print(metrics_mod.format_table(report))
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    scene = synth_mod.SceneSpec(
        kind="articulated_arm", spec=GridSpec(32, 32),
        joint_angles_deg=(5.0, -10.0, 8.0), texture_seed=11, background="gradient")
    src, drv, _ = synth_mod.render_scene(scene)
    config = fit_mod.FitConfig(iterations=40, seed=0)
    state, _ = fit_mod.fit_pair(src, drv, config)
    err = fit_mod.gradient_check(state, src, drv, config, probes=args.probes)
    print(f"max relative gradient error: {err:.3e} ({args.probes} probes)")
    return EXIT_OK if err < GRADCHECK_TOLERANCE else 1


def _draw_disc(values: np.ndarray, row: float, col: float, radius: float, color) -> None:
    h, w = values.shape[1:]
    r0 = max(int(np.floor(row - radius)), 0)
    r1 = min(int(np.ceil(row + radius)) + 1, h)
    c0 = max(int(np.floor(col - radius)), 0)
    c1 = min(int(np.ceil(col + radius)) + 1, w)
    if r0 >= r1 or c0 >= c1:
        return
    rr, cc = np.meshgrid(np.arange(r0, r1), np.arange(c0, c1), indexing="ij")
    inside = (rr - row) ** 2 + (cc - col) ** 2 <= radius ** 2
    for ch in range(3):
        plane = values[ch, r0:r1, c0:c1]
        plane[inside] = color[ch]


def _draw_line(values: np.ndarray, a: tuple, b: tuple, color) -> None:
    n = int(max(abs(b[0] - a[0]), abs(b[1] - a[1])) * 2) + 2
    rows = np.linspace(a[0], b[0], n)
    cols = np.linspace(a[1], b[1], n)
    h, w = values.shape[1:]
    rr = np.clip(np.round(rows).astype(int), 0, h - 1)
    cc = np.clip(np.round(cols).astype(int), 0, w - 1)
    for ch in range(3):
        values[ch, rr, cc] = color[ch]


ROOT_COLOR = (0.95, 0.15, 0.15)
INTER_COLOR = (0.95, 0.65, 0.1)
MOTION_COLOR = (0.2, 0.85, 0.95)
LINE_COLOR = (0.9, 0.9, 0.9)


def _cmd_viz(args) -> int:
    anchors, attn_logits = io_mod.read_anchor_set(args.checkpoint)
    img = io_mod.read_image(args.image)
    values = img.values if img.channels == 3 else np.repeat(img.values, 3, axis=0)
    values = values.copy()
    spec = img.spec
    scale = min(spec.height, spec.width) / 64.0

    def to_px(p: Point2):
        return norm_to_pixel(spec, p)

    omega = structure_mod.row_softmax(attn_logits) if attn_logits.size else attn_logits
    inter_px = [to_px(Point2(float(a.pos_d[0]), float(a.pos_d[1])))
                for a in anchors.intermediates]
    # Connect each motion anchor to its strongest intermediate.
    if anchors.num_intermediates:
        best = np.argmax(omega, axis=0)
        for k in range(anchors.num_anchors):
            a_px = to_px(Point2(float(anchors.pos_d[k, 0]), float(anchors.pos_d[k, 1])))
            _draw_line(values, a_px, inter_px[int(best[k])], LINE_COLOR)
    for k in range(anchors.num_anchors):
        row, col = to_px(Point2(float(anchors.pos_d[k, 0]), float(anchors.pos_d[k, 1])))
        _draw_disc(values, row, col, 1.5 * scale, MOTION_COLOR)
    for row, col in inter_px:
        _draw_disc(values, row, col, 2.5 * scale, INTER_COLOR)
    if anchors.root is not None:
        row, col = to_px(Point2(float(anchors.root.pos_d[0]), float(anchors.root.pos_d[1])))
        _draw_disc(values, row, col, 4.0 * scale, ROOT_COLOR)
    io_mod.write_image(args.out, ImageGrid(spec, np.clip(values, 0.0, 1.0)))
    return EXIT_OK


_COMMANDS = {
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "warp": _cmd_warp,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
    "viz": _cmd_viz,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except InvalidConfig as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DimensionMismatch, EmptyForeground) as exc:
        print(f"error: dimension mismatch: {exc}", file=sys.stderr)
        return EXIT_DIMENSION
    except OSError as exc:
        path = exc.filename if exc.filename else "?"
        print(f"error: I/O failure on {path}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (AnchorFlowError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
