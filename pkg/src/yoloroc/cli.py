"""Command-line entry point.

Exit codes: 0 ok, 1 validation failure or bad flags, 2 I/O error,
3 a requested check failed.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, io, toy
from .graph import DAMAGE_CLASSES, forward, init_weights
from .metrics import Truth, evaluate
from .postprocess import Detection, decode, nms

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_CHECK = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _hw(text: str) -> tuple[int, int]:
    """``640`` or ``HxW``."""
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size {text!r}") from None
    if len(vals) == 1:
        vals *= 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"bad size {text!r}")
    return vals[0], vals[1]


def _wh(text: str) -> tuple[int, int]:
    """``W,H``."""
    try:
        w, h = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected W,H, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError(f"bad image size {text!r}")
    return w, h


def _unit(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside [0, 1]")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return v


# ------------------------------------------------------------------ commands


def cmd_analyze(args) -> int:
    cfg = io.read_config(args.config)
    graph = cfg.build(args.nc)
    rep = analysis.analyze(graph, args.input_size)
    ref = ref_name = None
    if args.ref_config:
        ref_cfg = io.read_config(args.ref_config)
        ref = analysis.analyze(ref_cfg.build(args.nc), args.input_size)
        ref_name = ref_cfg.policy.name
    sens = analysis.bms_sensitivity(graph) if args.sensitivity else None
    sys.stdout.write(
        analysis.format_report(rep, name=cfg.policy.name, ref=ref, ref_name=ref_name or "", sensitivity=sens, fmt=args.format)
    )
    return EXIT_OK


def cmd_init_weights(args) -> int:
    graph = io.read_config(args.config).build(args.nc)
    store = init_weights(graph, seed=args.seed, zero=args.zero)
    io.save_weights(store, args.out, args.dtype)
    print(f"wrote {len(store)} slots to {args.out}")
    return EXIT_OK


def run_detector(graph, store, image, conf, nms_iou, imgsz):
    """Letterbox, forward, decode, NMS, map back. Returns (detections, inference seconds)."""
    net_in, lb = io.letterbox(image, imgsz)
    t0 = time.perf_counter()
    maps = forward(graph, store, net_in)
    t_inf = time.perf_counter() - t0
    dets = nms(decode(maps, conf, graph.nc, net_in.shape[2:])[0], nms_iou)
    out = []
    for d in dets:
        box = lb.inverse_box(d.box)
        out.append(Detection(d.cls, d.confidence, box))
    return out, t_inf


def cmd_forward(args) -> int:
    graph = io.read_config(args.config).build(args.nc)
    store = io.load_weights(args.weights, graph)
    image = io.read_image_ppm(args.image)
    if args.imgsz % 32 or (graph.policy.pooling == "bms_sppf" and args.imgsz % 64):
        raise ValueError(f"--imgsz {args.imgsz} must be a multiple of {64 if graph.policy.pooling == 'bms_sppf' else 32}")
    t0 = time.perf_counter()
    dets, t_inf = run_detector(graph, store, image, args.conf, args.nms_iou, args.imgsz)
    t_total = time.perf_counter() - t0
    text = io.format_detections(dets)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.bench:
        runs = max(1, args.bench_runs)
        totals, infs = [], []
        for _ in range(runs):
            t0 = time.perf_counter()
            _, ti = run_detector(graph, store, image, args.conf, args.nms_iou, args.imgsz)
            totals.append(time.perf_counter() - t0)
            infs.append(ti)
        tt, ti = float(np.median(totals)), float(np.median(infs))
        sys.stderr.write(
            f"detections={len(dets)}\n"
            f"total_ms={1e3 * tt:.2f}\ninference_ms={1e3 * ti:.2f}\n"
            f"total_fps={1 / tt:.2f}\ninference_fps={1 / ti:.2f}\n"
        )
    elif args.out:
        sys.stderr.write(f"detections={len(dets)} total_ms={1e3 * t_total:.1f} inference_ms={1e3 * t_inf:.1f}\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ok = True
    for target in toy.CLI_TARGETS[args.target]:
        rep = toy.gradcheck(target, seed=args.seed, tol=args.tol)
        sys.stdout.write(rep.format())
        ok &= rep.passed
        if args.target == "bms":
            print(f"all_params_nonzero={str(rep.all_nonzero).lower()}")
            ok &= rep.all_nonzero
    return EXIT_OK if ok else EXIT_CHECK


def cmd_train_toy(args) -> int:
    run = toy.overfit_toy(steps=args.steps, lr=args.lr, seed=args.seed, target_reduction=None if args.full else 0.9)
    if args.trace:
        Path(args.trace).write_text(run.trace_text())
    else:
        sys.stdout.write(run.trace_text())
    if run.diverged_at is not None:
        sys.stderr.write(f"diverged: non-finite loss at step {run.diverged_at}\n")
        return EXIT_CHECK
    first = run.losses[0]
    last = run.losses[-1]
    sys.stderr.write(
        f"steps_run={len(run.losses) - 1}\ninitial_loss={first:.6f}\nfinal_loss={last:.6f}\nreduction={run.reduction:.4f}\n"
    )
    return EXIT_OK if run.reduction >= 0.9 else EXIT_CHECK


def load_eval_dirs(dets_dir, labels_dir, img_wh, nc):
    dets_dir, labels_dir = Path(dets_dir), Path(labels_dir)
    for d in (dets_dir, labels_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    w, h = img_wh
    stems = sorted({p.stem for p in labels_dir.glob("*.txt")} | {p.stem for p in dets_dir.glob("*.txt")})
    all_dets, all_truths = [], []
    for stem in stems:
        lp, dp = labels_dir / f"{stem}.txt", dets_dir / f"{stem}.txt"
        labels = io.read_labels(lp, nc) if lp.exists() else []
        all_truths.append([Truth(r.cls, r.to_box(w, h)) for r in labels])
        all_dets.append(io.read_detections(dp, nc) if dp.exists() else [])
    return all_dets, all_truths


def cmd_eval(args) -> int:
    dets, truths = load_eval_dirs(args.dets, args.labels, args.img_size, args.nc)
    rep = evaluate(dets, truths, args.nc, report_conf=args.conf)
    names = DAMAGE_CLASSES if args.nc == len(DAMAGE_CLASSES) else None
    if args.format == "kv":
        sys.stdout.write(f"images={len(dets)}\n" + rep.as_kv(names))
    else:
        print(f"images {len(dets)}  P {rep.precision:.4f}  R {rep.recall:.4f}  mAP50 {rep.map50:.4f}  mAP50:95 {rep.map50_95:.4f}")
        print(f"TP {rep.tp}  FP {rep.fp}  FN {rep.fn}")
        for c in sorted(rep.ap50):
            label = names[c] if names else str(c)
            print(f"  {label:<6} AP50 {rep.ap50[c]:.4f}  AP50:95 {rep.ap50_95[c]:.4f}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="yoloroc", description="Lightweight road-damage detector toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    a = sub.add_parser("analyze", help="parameter / FLOP / size report for a config")
    a.add_argument("--config", required=True, help="config file or preset name")
    a.add_argument("--input-size", type=_hw, default=(640, 640), help="640 or HxW")
    a.add_argument("--nc", type=_positive, default=None, help="override class count")
    a.add_argument("--ref-config", help="reference config for reduction percentages")
    a.add_argument("--sensitivity", action="store_true", help="report BMS-SPPF variant parameter deltas")
    a.add_argument("--format", choices=("text", "kv"), default="text")
    a.set_defaults(func=cmd_analyze)

    w = sub.add_parser("init-weights", help="write a freshly initialized weight file")
    w.add_argument("--config", required=True)
    w.add_argument("--out", required=True)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--nc", type=_positive, default=None)
    w.add_argument("--zero", action="store_true", help="zero all learnable weights except norm scales")
    w.add_argument("--dtype", choices=("f32", "f16"), default="f32")
    w.set_defaults(func=cmd_init_weights)

    f = sub.add_parser("forward", help="run detection on a PPM image")
    f.add_argument("--config", required=True)
    f.add_argument("--weights", required=True)
    f.add_argument("--image", required=True, help="binary PPM (P6)")
    f.add_argument("--nc", type=_positive, default=None)
    f.add_argument("--conf", type=_unit, default=0.25)
    f.add_argument("--nms-iou", type=_unit, default=0.45)
    f.add_argument("--imgsz", type=int, default=640)
    f.add_argument("--out", help="detections file (default: stdout)")
    f.add_argument("--bench", action="store_true", help="report total and inference-only throughput")
    f.add_argument("--bench-runs", type=int, default=3)
    f.set_defaults(func=cmd_forward)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--target", choices=tuple(toy.CLI_TARGETS), required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=toy.GRAD_TOL)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train-toy", help="overfit the toy BMS-SPPF classifier")
    t.add_argument("--steps", type=int, default=500)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--trace", help="loss trace file (default: stdout)")
    t.add_argument("--full", action="store_true", help="run all steps instead of stopping at 90%% reduction")
    t.set_defaults(func=cmd_train_toy)

    e = sub.add_parser("eval", help="P / R / mAP over a detections directory")
    e.add_argument("--dets", required=True, help="directory of detection files")
    e.add_argument("--labels", required=True, help="directory of label files")
    e.add_argument("--img-size", type=_wh, required=True, help="W,H of the source images")
    e.add_argument("--nc", type=_positive, default=4)
    e.add_argument("--conf", type=_unit, default=0.25, help="confidence for P/R/TP/FP counts")
    e.add_argument("--format", choices=("text", "kv"), default="text")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # --help or a bad flag
        return EXIT_INVALID if e.code is None else int(e.code)
    try:
        return args.func(args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, KeyError) as e:  # malformed input, shape mismatch, missing weight slot
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
