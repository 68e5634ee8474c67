"""Command-line entry point: ``roidepth <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .metrics import EvalResult, evaluate

log = logging.getLogger("roidepth")


def _load_depth(path) -> np.ndarray:
    """Depth from an RTNS tensor, or a PGM preview (scaled 0..1)."""
    path = Path(path)
    if path.suffix == ".pgm":
        from .io import read_pgm

        return read_pgm(path)
    from .tensor import load_tensor

    return load_tensor(path)


def cmd_gradcheck(args) -> int:
    from .certify import CHECKS, certify

    names = args.only or list(CHECKS)
    unknown = set(names) - set(CHECKS)
    if unknown:
        print(f"unknown checks: {sorted(unknown)}", file=sys.stderr)
        return 2
    print(f"{'check (worst seed)':<32} {'entries':>7} {'max_abs':>11} {'max_rel':>11}  result")
    reports, elapsed = certify(range(args.seeds), names, report=print)
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports)} checks over {args.seeds} seeds in {elapsed:.1f}s: {len(failed)} failed")
    for r in failed:
        for d in r.details.values():
            if not d.passed:
                print(f"  FAIL {d.name} worst index {d.worst_index}: abs {d.max_abs_error:.3e} rel {d.max_rel_error:.3e}")
    return 1 if failed else 0


def cmd_gen_scene(args) -> int:
    from .harness import export_scene
    from .scene import generate_scene

    scene = generate_scene(args.seed, args.height, args.width)
    out = export_scene(scene, args.out)
    print(f"scene {args.seed} ({args.height}x{args.width}) written to {out}")
    return 0


def cmd_train(args) -> int:
    from .io import load_config
    from .plotting import plot_depth, plot_loss_curve, plot_mask
    from .harness import mask_for
    from .train import train

    run, _ = load_config(args.config)
    if args.steps:
        run = replace(run, steps=args.steps)
    out = Path(args.out_dir)
    result = train(run, out_dir=out)
    plot_loss_curve(result.history, out / "loss.png")
    plot_depth(result.final_depth, result.scene.gt_depth, out / "depth.png")
    plot_mask(mask_for(result.model, result.scene, run), out / "mask.png")
    print("stage   " + " ".join(f"{h:>9}" for h in EvalResult.header()))
    for stage, res in (("initial", result.initial), ("final", result.final)):
        print(f"{stage:<7} " + " ".join(f"{v:9.4f}" for v in res.row()))
    print(f"wall time {result.wall_time:.1f}s; outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    pred, gt = _load_depth(args.pred), _load_depth(args.gt)
    res = evaluate(pred, gt, median_scaling=not args.no_scaling)
    print(",".join(EvalResult.header()))
    print(",".join(f"{v:.6f}" for v in res.row()))
    return 0


def cmd_compare_attn(args) -> int:
    from .harness import compare_attention, fusion_sweep, layer_sweep
    from .io import load_config
    from .plotting import plot_comparison

    run, cp = load_config(args.config)
    section = cp["compare"] if cp.has_section("compare") else {}
    variants = tuple(section.get("variants", "dense deformable roi").replace(",", " ").split())
    resolutions = tuple(
        tuple(int(v) for v in r.split("x")) for r in section.get("resolutions", "32x96 64x192").replace(",", " ").split()
    )
    steps = int(section.get("steps", run.steps))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = compare_attention(run, resolutions, variants, steps, out_csv=out / "compare_attention.csv")
    plot_comparison(rows, out / "compare_attention.png")
    print(Path(out / "compare_attention.csv").read_text(), end="")
    if args.sweeps:
        layer_sweep(run, steps=steps, out_csv=out / "layer_sweep.csv")
        fusion_sweep(run, steps=steps, out_csv=out / "fusion_sweep.csv")
        print(f"sweeps written to {out}")
    return 0


def cmd_dump_attn(args) -> int:
    from .harness import dump_attention, load_trained, write_dump
    from .plotting import plot_attention
    from .model import level_stride
    from .scene import generate_scene

    model, run = load_trained(args.ckpt)
    scene = generate_scene(run.seed if run.scene_seed is None else run.scene_seed, run.height, run.width)
    queries = [tuple(float(v) for v in q.split(",")) for q in args.query]
    try:
        rows = dump_attention(model, scene.target, queries, args.level, args.branch)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out) if args.out else Path(args.ckpt) / f"attention_{args.level}.csv"
    write_dump(rows, out)
    plot_attention(scene.target, rows, level_stride(args.level), out.with_suffix(".png"))
    print(f"{len(rows)} rows written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roidepth", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="certify analytic gradients against central differences")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--only", nargs="*", help="restrict to these check names")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("gen-scene", help="render a synthetic triplet with ground truth")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=192)
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("train", help="self-supervised training on a synthetic scene")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="depth metrics of a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--no-scaling", action="store_true", help="skip median-ratio scaling")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare-attn", help="train each attention variant at each resolution")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default="compare_out")
    p.add_argument("--sweeps", action="store_true", help="also run the layer-count and fusion-level sweeps")
    p.set_defaults(func=cmd_compare_attn)

    p = sub.add_parser("dump-attn", help="export ROI boxes, samples and weights for query pixels")
    p.add_argument("--ckpt", required=True, help="checkpoint directory written by train")
    p.add_argument("--query", required=True, action="append", help="x,y in full-image pixels (repeatable)")
    p.add_argument("--level", required=True)
    p.add_argument("--branch", choices=("depth", "seg"), default="depth")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dump_attn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
