#!/usr/bin/env python3
"""
Main script for the PECI-Net toolkit.
Synthesizes phantom data, previews preprocessing, trains, evaluates,
runs inference with overlays, GradCAM and the ablation studies.
"""

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import Dict, List, Optional, Sequence

import numpy as np

import gradcam
import imgproc
from cin import REGIONS, predict
from config import Config, load_run_config, save_run_config
from data import load_checkpoint, load_dataset, split_by_patient
from errors import BadMaskShape, ConfigInvalid, MissingFile, PeciNetError
from losses import dice_score
from nncore import Tensor
from overlay import blend, heatmap_to_rgb, render_overlay, render_prediction, save_panel, save_rgb
from pen import enhance, pen_apply_algorithms
from phantom import SynthParams, synth_generate
from trainer import (
    AVERAGE_COLUMN,
    DEFAULT_CONTEXT_CHOICES,
    Splits,
    ablate_components,
    ablate_context,
    ablate_preprocessing,
    ablate_stages,
    evaluate,
    train,
    write_table,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test", "all")
ABLATIONS = ("stages", "preprocessing", "context", "components")


def setup_logging(config: Config) -> None:
    """Log to <output root>/pecinet.log and stdout."""
    logging.basicConfig(
        level=config.level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(config.log_path),
            logging.StreamHandler(sys.stdout)
        ],
        force=True,
    )


# Argument types

def unit_interval(text: str) -> float:
    value = float(text)
    if not (0.0 <= value <= 1.0):
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return value


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return value


def int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def context_list(text: str) -> List[tuple]:
    """Parse "all;cervical_spine+mandible" into a list of region tuples."""
    choices = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        choices.append(REGIONS if part == "all" else tuple(r.strip() for r in part.split("+") if r.strip()))
    return choices


# Helpers

def _to_uint8(channel: np.ndarray) -> np.ndarray:
    """Min-max scale a float map to 0..255 for viewing."""
    lo, hi = float(channel.min()), float(channel.max())
    if hi <= lo:
        return np.zeros(channel.shape, dtype=np.uint8)
    return imgproc.round_half_away((channel - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _stem(path: str) -> str:
    return os.path.splitext(os.path.basename(path))[0]


def _print_rows(title: str, rows: Sequence[Dict]) -> None:
    print(f"\n{title}")
    print("=" * 50)
    header = ["model", *REGIONS, AVERAGE_COLUMN]
    print(" | ".join(header))
    for row in rows:
        cells = [str(row.get("model", ""))]
        cells += [f"{row[key]:.4f}" for key in header[1:]]
        extras = [f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}"
                  for k, v in row.items() if k not in header]
        print(" | ".join(cells + extras))
    print("-" * 30)


def _run_overrides(args) -> dict:
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "initial_lr": args.lr,
        "max_steps": args.max_steps,
        "seed": args.seed,
        "workers": args.workers,
        "threshold": args.threshold,
        "dataset_dir": args.data,
        "output_dir": args.output,
        "cin": {"num_stages": args.stages, "preset": args.preset, "image_size": args.image_size},
    }
    if args.no_pen:
        overrides["pen"] = {"enabled": False, "pipelines": ["identity"]}
    elif args.pipelines:
        overrides["pen"] = {"pipelines": args.pipelines}
    return overrides


def _load_splits(config) -> Splits:
    if not config.dataset_dir:
        raise ConfigInvalid("No dataset given: pass --data or set dataset_dir in the run config")
    samples = load_dataset(config.dataset_dir)
    return Splits(*split_by_patient(samples, seed=config.seed))


# Commands

def cmd_synth(args, env: Config) -> None:
    out = args.out or os.path.join(env.output_root, "synth")
    params = SynthParams(image_size=args.size, ambiguity=args.ambiguity, noise_level=args.noise)
    samples = synth_generate(out, args.patients, args.frames, args.seed, params)
    print(f"Wrote {len(samples)} frames ({args.patients} patients) to {out}")


def cmd_preprocess(args, env: Config) -> None:
    img = imgproc.read_gray_png(args.image)
    out = args.out or os.path.join(env.output_root, "preprocess")
    os.makedirs(out, exist_ok=True)
    stem = _stem(args.image)
    written = []

    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
        dtype = model.stages[0].head.weight.dtype
        stack = pen_apply_algorithms(img, model.pen_config)[None]
        x_bar = enhance(Tensor(stack, dtype=dtype), model.pen).values[0].astype(np.float64)
        for c, channel in enumerate(x_bar):
            path = os.path.join(out, f"{stem}_pen{c}.png")
            imgproc.write_gray_png(path, _to_uint8(channel))
            written.append(path)
        path = os.path.join(out, f"{stem}_pen_mean.png")
        imgproc.write_gray_png(path, _to_uint8(x_bar.mean(axis=0)))
        written.append(path)
    else:
        clahe = imgproc.ClaheParams(tiles_x=args.tiles, tiles_y=args.tiles, clip_limit=args.clip)
        for token in args.pipeline or ["clahe"]:
            spec = imgproc.PipelineSpec.parse(token, clahe)
            path = os.path.join(out, f"{stem}_{'+'.join(spec.steps)}.png")
            imgproc.write_gray_png(path, imgproc.apply_pipeline(spec, img))
            written.append(path)

    for path in written:
        print(path)


def cmd_train(args, env: Config) -> None:
    config = load_run_config(args.config, _run_overrides(args))
    if not config.output_dir:
        config = replace(config, output_dir=os.path.join(env.output_root, "train"))
    splits = _load_splits(config)
    save_run_config(config, os.path.join(config.output_dir, "run_config.json"))

    result = train(config, splits.train, splits.val)
    best = load_checkpoint(result.best_path)
    scores = evaluate(best, splits.test, config.threshold, config.workers, config.batch_size)
    rows = [{"model": "PECI-Net", **scores.as_dict()}]
    write_table(os.path.join(config.output_dir, "eval_test.csv"), rows)
    _print_rows(f"Test Dice after {result.steps} steps ({result.best_path})", rows)


def cmd_eval(args, env: Config) -> None:
    model = load_checkpoint(args.checkpoint)
    samples = load_dataset(args.data)
    if args.split != "all":
        samples = split_by_patient(samples, seed=args.seed)[SPLITS.index(args.split)]
    scores = evaluate(model, samples, args.threshold, env.workers)
    rows = [{"model": args.name or _stem(args.checkpoint), **scores.as_dict()}]
    out = args.out or os.path.join(env.output_root, "eval.csv")
    write_table(out, rows)
    _print_rows(f"Dice on {args.split} ({scores.n_images} frames)", rows)


def _read_gt(root: str, image_path: str, shape) -> np.ndarray:
    name = os.path.basename(image_path)
    masks = []
    for region in REGIONS:
        path = os.path.join(root, "masks", region, name)
        if not os.path.exists(path):
            raise MissingFile(f"Ground-truth mask not found: {path}")
        mask = imgproc.read_gray_png(path)
        if mask.shape != shape:
            raise BadMaskShape(f"Mask {path} is {mask.shape}, image is {shape}")
        masks.append((mask > 0).astype(np.uint8))
    return np.stack(masks)


def cmd_infer(args, env: Config) -> None:
    model = load_checkpoint(args.checkpoint)
    out = args.out or os.path.join(env.output_root, "infer")

    def run(path: str):
        img = imgproc.read_gray_png(path)
        masks, _ = predict(model, img, args.threshold)
        return path, img, masks

    with ThreadPoolExecutor(max_workers=env.workers) as pool:
        results = list(pool.map(run, args.images))

    for path, img, masks in results:
        frame_dir = os.path.join(out, _stem(path))
        os.makedirs(frame_dir, exist_ok=True)
        gt = _read_gt(args.gt_root, path, img.shape) if args.gt_root else None
        scores = []
        for t, region in enumerate(REGIONS):
            imgproc.write_gray_png(os.path.join(frame_dir, f"{region}_mask.png"), masks[t] * 255)
            if gt is None:
                rgb = render_prediction(img, masks[t])
            else:
                rgb = render_overlay(img, masks[t], gt[t])
                scores.append(f"{region}={dice_score(masks[t], gt[t]):.4f}")
            save_rgb(os.path.join(frame_dir, f"{region}_overlay.png"), rgb)
        summary = f"{path}: masks in {frame_dir}"
        if scores:
            summary += " | Dice " + " ".join(scores)
        print(summary)


def cmd_gradcam(args, env: Config) -> None:
    if args.block is not None:
        gradcam.check_block(args.block)
    if not args.image and not args.data:
        raise ConfigInvalid("gradcam needs --image or --data")
    model = load_checkpoint(args.checkpoint)
    out = args.out or os.path.join(env.output_root, "gradcam")
    os.makedirs(out, exist_ok=True)

    if args.image:
        img = imgproc.read_gray_png(args.image)
        stem = _stem(args.image)
        maps = gradcam.block_heatmaps(model, img, args.target, "full")
        blocks = [args.block] if args.block else list(range(1, len(maps) + 1))
        tiles = []
        for block in blocks:
            rgb = blend(img, heatmap_to_rgb(maps[block - 1]))
            save_rgb(os.path.join(out, f"{stem}_{args.target}_block{block}.png"), rgb)
            tiles.append(rgb)
        save_panel(os.path.join(out, f"{stem}_{args.target}_panel.png"), tiles,
                   [f"block {b}" for b in blocks])
        print(f"Heatmaps for {args.target} written to {out}")
        return

    samples = load_dataset(args.data)
    if args.limit:
        samples = samples[:args.limit]
    blocks = (args.block,) if args.block else (1, 2, 3, 4)
    ranking = gradcam.region_importance(model, samples, args.target, blocks, args.mode)
    path = os.path.join(out, f"importance_{args.target}.csv")
    gradcam.write_ranking_csv(path, ranking)
    print(f"\nRegion importance for {args.target} ({len(samples)} frames)")
    print("=" * 50)
    for rank, (region, score) in enumerate(ranking, start=1):
        print(f"{rank}. {region}: {score:.4f}")


def cmd_ablate(args, env: Config) -> None:
    config = load_run_config(args.config, _run_overrides(args))
    if not config.output_dir:
        config = replace(config, output_dir=os.path.join(env.output_root, "ablate"))
    splits = _load_splits(config)
    seeds = args.seeds or [config.seed]

    if args.kind == "stages":
        rows = ablate_stages(config, splits, args.list or (1, 2, 3, 4), seeds)
    elif args.kind == "preprocessing":
        rows = ablate_preprocessing(config, splits, seeds=seeds)
    elif args.kind == "context":
        rows = ablate_context(config, splits, args.contexts or DEFAULT_CONTEXT_CHOICES, seeds)
    else:
        rows = ablate_components(config, splits, seeds)

    path = os.path.join(config.output_dir, f"ablate_{args.kind}.csv")
    write_table(path, rows)
    _print_rows(f"Ablation: {args.kind} ({path})", rows)


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run config; flags override its values")
    parser.add_argument("--data", help="Dataset root (manifest.jsonl)")
    parser.add_argument("--output", help="Output directory")
    parser.add_argument("--epochs", type=positive_int)
    parser.add_argument("--batch-size", type=positive_int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--max-steps", type=positive_int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--workers", type=positive_int)
    parser.add_argument("--threshold", type=unit_interval)
    parser.add_argument("--stages", type=positive_int, help="Number of cascade stages")
    parser.add_argument("--preset", choices=["mini", "paper"])
    parser.add_argument("--image-size", type=positive_int)
    parser.add_argument("--pipelines", nargs="+", help="PEN pipelines, e.g. identity sharpen clahe,sharpen")
    parser.add_argument("--no-pen", action="store_true", help="Replicate the raw frame instead of using PEN")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="PECI-Net swallow fluoroscopy segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic fluoroscopy dataset")
    p.add_argument("--out", help="Dataset directory")
    p.add_argument("--patients", type=positive_int, default=10)
    p.add_argument("--frames", type=positive_int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ambiguity", type=unit_interval, default=0.5)
    p.add_argument("--size", type=positive_int, default=64)
    p.add_argument("--noise", type=float, default=0.03)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("preprocess", help="Write enhanced versions of a frame")
    p.add_argument("image")
    p.add_argument("--pipeline", action="append", help="Pipeline tokens, e.g. clahe or clahe,sharpen (repeatable)")
    p.add_argument("--checkpoint", help="Write the 3 PEN output channels and their mean instead")
    p.add_argument("--tiles", type=positive_int, default=8)
    p.add_argument("--clip", type=float, default=2.0)
    p.add_argument("--out", help="Output directory")
    p.set_defaults(handler=cmd_preprocess)

    p = sub.add_parser("train", help="Train PEN + CIN")
    _add_run_options(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="Per-region Dice of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--seed", type=int, default=0, help="Patient split seed")
    p.add_argument("--threshold", type=unit_interval, default=0.5)
    p.add_argument("--name", help="Row label in the CSV")
    p.add_argument("--out", help="CSV path")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("infer", help="Predict masks and overlays for frames")
    p.add_argument("images", nargs="+")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--threshold", type=unit_interval, default=0.5)
    p.add_argument("--gt-root", help="Dataset root holding masks/<region>/<image name>")
    p.add_argument("--out", help="Output directory")
    p.set_defaults(handler=cmd_infer)

    p = sub.add_parser("gradcam", help="GradCAM heatmaps or region importance ranking")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="Single frame to explain")
    p.add_argument("--data", help="Dataset root for the importance ranking")
    p.add_argument("--target", choices=REGIONS, default="bolus")
    p.add_argument("--block", type=int, help="Decoder block 1..4 (default: all)")
    p.add_argument("--mode", choices=gradcam.TARGET_MODES, default="full")
    p.add_argument("--limit", type=positive_int, help="Use only the first N frames")
    p.add_argument("--out", help="Output directory")
    p.set_defaults(handler=cmd_gradcam)

    p = sub.add_parser("ablate", help="Ablation studies")
    p.add_argument("kind", choices=ABLATIONS)
    _add_run_options(p)
    p.add_argument("--list", type=int_list, help="Stage counts, e.g. 1,2,3,4")
    p.add_argument("--seeds", type=int_list, help="Training seeds to average, e.g. 0,1,2")
    p.add_argument("--contexts", type=context_list,
                   help="Context sets separated by ';', regions joined by '+', or 'all'")
    p.set_defaults(handler=cmd_ablate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; 0 on success, 1 on a runtime error (argparse exits 2 on usage errors)."""
    args = build_parser().parse_args(argv)
    try:
        env = Config()
        setup_logging(env)
        logger.info(f"=== Starting {args.command} ===")
        args.handler(args, env)
        logger.info(f"=== {args.command} completed ===")
        return 0
    except PeciNetError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
