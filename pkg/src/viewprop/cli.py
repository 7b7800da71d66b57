"""Command-line entry point: ``viewprop <subcommand> ...``.

Exit codes: 0 success, 1 usage or invalid input, 2 runtime failure.
Set ``VIEWPROP_LOG`` to error, info or debug for log output on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np
from PIL import Image

from . import __version__
from .editing import MOCKS, EditorError
from .geometry import FilterPolicy, propagate_mask
from .metrics import MetricError, make_provider, report
from .pipeline import ConfigError, PipelineError, RunConfig, run_all
from .propagation import PropagationConfig
from .scene import (PRESETS, DatasetError, SceneError, SyntheticSceneSpec, gen_synthetic, load_dataset,
                    preset, quantize_image, read_png_mask, save_dataset, write_png_mask)

logger = logging.getLogger("viewprop")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; usage errors are 1 here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _setup_logging():
    level = os.environ.get("VIEWPROP_LOG", "error").lower()
    levels = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args):
    try:
        if args.spec:
            with open(args.spec) as f:
                doc = json.load(f)
            doc.setdefault("camera_ring", {})
            doc["camera_ring"].setdefault("count", args.views)
            doc["camera_ring"].setdefault("resolution", args.res)
            spec = SyntheticSceneSpec.from_dict(doc)
        else:
            spec = preset(args.preset, args.views, args.res)
    except (OSError, json.JSONDecodeError, TypeError) as exc:
        raise UsageError(f"invalid scene spec: {exc}") from exc
    except SceneError as exc:
        raise UsageError(str(exc)) from exc
    try:
        dataset = gen_synthetic(spec, seed=args.seed)
    except SceneError as exc:
        raise UsageError(str(exc)) from exc
    save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} views ({args.res}x{args.res}) to {args.out}")


def _run_config(args):
    try:
        prop = PropagationConfig(args.phi, args.stop, args.seed, args.warmup_lambda, args.warmup)
        policy = FilterPolicy(args.max_reproj, args.depth_tol)
        return RunConfig(propagation=prop, filter=policy, editor=args.editor, editor_timeout=args.editor_timeout,
                         instruction=args.instruction, key_t_range=(args.key_t_min, args.key_t_max),
                         key_steps=args.key_steps, blend_t=args.blend_t, blend_steps=args.blend_steps,
                         n_r=args.n_r, image_guidance=args.s_i, text_guidance=args.s_t,
                         enable_post_refine=args.post_refine, metrics_enabled=args.metrics,
                         orig_caption=args.orig_caption, edit_caption=args.edit_caption,
                         worker_count=args.workers, output_dir=args.out, record_timings=args.timings)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def cmd_propagate(args):
    config = _run_config(args)
    try:
        dataset = load_dataset(args.dataset)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc
    # fail fast on a bad editor spec before any work
    if args.editor.startswith("mock:") and args.editor[5:].partition(":")[0] not in MOCKS:
        raise UsageError(f"unknown mock editor {args.editor!r} (known: {', '.join(MOCKS)})")
    if not args.editor.startswith(("mock:", "exec:")):
        raise UsageError("--editor must be mock:<name>[:<param>] or exec:<command>")
    out = run_all(dataset, config, resume=args.resume)
    with open(os.path.join(out, "ledger.json")) as f:
        ledger = json.load(f)
    print("key views:", " ".join(str(k) for k in ledger["key_views"]))
    for i, step in enumerate(ledger["rho_history"], 1):
        print(f"  #{i} view {step['key_view']:3d}  min rho {min(step['rho']):.4f}")
    print("invocations:", ", ".join(f"{k}={v}" for k, v in ledger["invocations"].items()),
          f"(total {ledger['total_invocations']}, stage 1 {ledger['stage1_invocations']})")
    if ledger["partial_coverage"]:
        print("warning: selection stopped before every view reached the stop ratio")
    print(f"output: {out}")


def cmd_metrics(args):
    try:
        original = load_dataset(args.original)
        edited = load_dataset(args.edited)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc
    if len(original) != len(edited):
        raise UsageError(f"view count mismatch: {len(original)} original vs {len(edited)} edited")
    try:
        provider = make_provider(args.provider, args.dimension)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    rep = report(original.views, edited.views, {}, provider, args.orig_caption, args.edit_caption)
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    rep.write(args.out)
    for name in ("direction_score", "consistency_score", "photometric_inconsistency"):
        value = getattr(rep, name)
        print(f"{name:28s} {value:.6f}" if value is not None else f"{name:28s} error: {rep.errors[name]}")
    if rep.errors:
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_propagate_mask(args):
    try:
        dataset = load_dataset(args.dataset)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc
    by_id = {v.id: v for v in dataset.views}
    if args.seed_view not in by_id:
        raise UsageError(f"seed view {args.seed_view} not in dataset")
    seed = by_id[args.seed_view]
    try:
        mask = read_png_mask(args.mask)
    except OSError as exc:
        raise UsageError(f"cannot read mask: {exc}") from exc
    if mask.shape != seed.shape:
        raise UsageError(f"mask is {mask.shape}, seed view is {seed.shape}")
    if not mask.any():
        raise UsageError("mask is empty")
    if not 0 <= args.overlap <= 1:
        raise UsageError("--overlap must be in [0, 1]")
    masks = propagate_mask(seed, mask, dataset.views, args.overlap, FilterPolicy(args.max_reproj, args.depth_tol))
    os.makedirs(args.out, exist_ok=True)
    for vid, m in sorted(masks.items()):
        write_png_mask(os.path.join(args.out, f"{vid:03d}_mask.png"), m)
    print(f"accepted {len(masks)} of {len(dataset)} views: {' '.join(str(v) for v in sorted(masks))}")


def contact_sheet(views, columns=5):
    H, W = views[0].shape
    rows = -(-len(views) // columns)
    sheet = np.zeros((rows * H, columns * W, 3))
    for i, v in enumerate(views):
        r, c = divmod(i, columns)
        sheet[r * H:(r + 1) * H, c * W:(c + 1) * W] = v.image
    return sheet


def cmd_inspect(args):
    try:
        dataset = load_dataset(args.dataset)
    except DatasetError as exc:
        raise UsageError(str(exc)) from exc
    print(f"{args.dataset}: {len(dataset)} views, depth_scale {dataset.depth_scale}, version {dataset.version}")
    print(f"{'id':>4} {'size':>9} {'fx':>8} {'position':>26} {'valid depth':>11} {'depth range':>15}")
    for v in dataset.views:
        pos = v.pose.translation
        d = v.depth[v.depth_valid]
        rng = f"{d.min():.3f}-{d.max():.3f}" if d.size else "-"
        print(f"{v.id:4d} {v.shape[1]:4d}x{v.shape[0]:<4d} {v.intrinsics.fx:8.2f} "
              f"({pos[0]:7.3f},{pos[1]:7.3f},{pos[2]:7.3f}) {v.depth_valid.mean():11.3f} {rng:>15}")
    if args.contact_sheet:
        Image.fromarray(quantize_image(contact_sheet(dataset.views, args.columns))).save(args.contact_sheet)
        print(f"contact sheet: {args.contact_sheet}")


# --------------------------------------------------------------------------
# parser


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="viewprop", description="Propagate 2D image edits across a posed RGB-D dataset.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-scene", help="render a synthetic dataset", formatter_class=fmt)
    p.add_argument("--preset", choices=PRESETS, default="plane-ring", help="built-in scene")
    p.add_argument("--spec", help="JSON scene description (overrides --preset)")
    p.add_argument("--views", type=int, default=20, help="camera count")
    p.add_argument("--res", type=int, default=128, help="image width and height in pixels")
    p.add_argument("--seed", type=int, default=0, help="camera jitter seed")
    p.add_argument("--out", default="scene", help="dataset directory to write")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("propagate", help="edit key views and propagate to all views", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--editor", default="mock:identity", help="mock:<name>[:<param>] or exec:<command>")
    p.add_argument("--editor-timeout", type=float, default=300.0, help="seconds per external editor call")
    p.add_argument("--instruction", default="", help="edit instruction passed to the editor")
    p.add_argument("--phi", type=float, default=0.3, help="key-view weight peak")
    p.add_argument("--stop", type=float, default=0.95, help="stop once every view's modified ratio reaches this")
    p.add_argument("--lambda", dest="warmup_lambda", type=float, default=0.5, help="warm-up blend weight")
    p.add_argument("--warmup", type=int, default=10, help="warm-up iterations (30 suits outdoor scenes)")
    p.add_argument("--n-r", type=int, default=5, help="averaged sub-runs per blend edit")
    p.add_argument("--key-t-min", type=float, default=0.5, help="lowest key-view edit timestep")
    p.add_argument("--key-t-max", type=float, default=0.9, help="highest key-view edit timestep")
    p.add_argument("--key-steps", type=int, default=10, help="diffusion steps for key-view edits")
    p.add_argument("--blend-t", type=float, default=0.6, help="blend refinement timestep")
    p.add_argument("--blend-steps", type=int, default=3, help="diffusion steps per blend pass")
    p.add_argument("--s-i", type=float, default=1.5, help="image guidance scale")
    p.add_argument("--s-t", type=float, default=7.5, help="text guidance scale")
    p.add_argument("--seed", type=int, default=0, help="run seed")
    p.add_argument("--post-refine", action=argparse.BooleanOptionalAction, default=True,
                   help="run one averaged refinement pass per view after stage 1")
    p.add_argument("--max-reproj", type=float, default=5.0, help="max cycle reprojection error in pixels")
    p.add_argument("--depth-tol", type=float, default=0.01, help="relative depth agreement tolerance")
    p.add_argument("--workers", type=int, default=1, help="parallel views during mixup and blending")
    p.add_argument("--metrics", action=argparse.BooleanOptionalAction, default=True,
                   help="write scores to metrics.json")
    p.add_argument("--orig-caption", default="a photo of a scene", help="caption of the unedited scene")
    p.add_argument("--edit-caption", default="", help="defaults to the instruction")
    p.add_argument("--timings", action="store_true", help="record stage timings in ledger.json")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--resume", action="store_true", help="continue from out/checkpoint")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("metrics", help="score an edited dataset against its original", formatter_class=fmt)
    p.add_argument("--original", required=True, help="unedited dataset directory")
    p.add_argument("--edited", required=True, help="edited dataset directory")
    p.add_argument("--provider", default="builtin", help="builtin or exec:<command>")
    p.add_argument("--dimension", type=int, default=512, help="embedding size of an external provider")
    p.add_argument("--orig-caption", default="a photo of a scene", help="caption of the originals")
    p.add_argument("--edit-caption", default="an edited photo of a scene", help="caption of the edits")
    p.add_argument("--out", default="metrics.json", help="report path")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("propagate-mask", help="carry a seed-view mask to other views", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--seed-view", type=int, default=0, help="view id the mask belongs to")
    p.add_argument("--mask", required=True, help="grayscale PNG, nonzero = inside")
    p.add_argument("--overlap", type=float, default=0.5, help="minimum IoU to accept a view")
    p.add_argument("--max-reproj", type=float, default=5.0, help="max cycle reprojection error in pixels")
    p.add_argument("--depth-tol", type=float, default=0.01, help="relative depth agreement tolerance")
    p.add_argument("--out", default="masks", help="directory for NNN_mask.png files")
    p.set_defaults(func=cmd_propagate_mask)

    p = sub.add_parser("inspect", help="summarize a dataset", formatter_class=fmt)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--contact-sheet", help="write a tiled PNG of all views here")
    p.add_argument("--columns", type=int, default=5, help="contact sheet tiles per row")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or EXIT_OK
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (PipelineError, EditorError, MetricError, DatasetError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
