"""Command-line entry point: ``lunggan {train,segment,evaluate,benchmark,synth}``.

Exit codes:

====  =====================================================
0     success
1     any other failure (bad value, divergence, I/O error)
2     usage error, including an unknown subcommand
3     checkpoint missing or unreadable
4     data directory missing or unreadable
====  =====================================================
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from threadpoolctl import threadpool_limits

from .data import (
    load_directory,
    read_manifest,
    read_png,
    save_mask_png,
    save_overlay_png,
    split_dataset,
    synth_phantoms,
    write_dataset,
    write_manifest,
)
from .evaluation import benchmark_latency, evaluate_pair, write_report
from .models import build_generator
from .training import CheckpointError, TrainConfig, load_checkpoint, parse_config_values, predict, train

logger = logging.getLogger("lunggan")

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_CHECKPOINT = 3
EXIT_DATA = 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_ERROR):
        super().__init__(message)
        self.code = code


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


_FIELD_HELP = {
    "discriminator_kind": "discriminator: D1 pixel, D2 16px patch, D3 70px patch, D4 whole image",
    "alpha": "weight of the L1 term in the generator loss",
    "lr": "Adam learning rate for both players",
    "beta1": "Adam first-moment decay",
    "beta2": "Adam second-moment decay",
    "epochs": "passes over the training split",
    "batch_size": "samples per update",
    "resolution": "training size HxW",
    "seed": "seed for initialization, data order and splits",
    "conditioning": "conditional (image+mask pairs) or unconditional (mask only)",
    "checkpoint_every": "epochs between checkpoints",
    "base_channels": "generator channels after the first encoder stage",
    "depth": "generator encoder stages",
    "d_base_channels": "discriminator channels after the first conv",
    "disc_mode": "derived (standard patch geometry) or paper-literal (all k3/s2)",
    "adv_loss": "nonsaturating or saturating generator objective",
    "lr_decay": "per-epoch multiplicative learning-rate decay",
    "noise": "append a Gaussian noise channel to the generator input",
    "keep_best": "also keep best.lgck by validation Dice",
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    """One flag per TrainConfig field; the default shown is the built-in one."""
    g = p.add_argument_group("training configuration (override --config values)")
    defaults = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        default = getattr(defaults, f.name)
        shown = f"{default[0]}x{default[1]}" if f.name == "resolution" else default
        kwargs = dict(dest=f.name, default=argparse.SUPPRESS, help=f"{_FIELD_HELP[f.name]} (default: {shown})", metavar=f.name.upper())
        if f.name == "discriminator_kind":
            g.add_argument("--discriminator", _flag(f.name), choices=["D1", "D2", "D3", "D4"], **kwargs)
        elif f.type == "bool":
            g.add_argument(_flag(f.name), type=_bool, **kwargs)
        else:
            g.add_argument(_flag(f.name), type=str, **kwargs)


def _bool(text: str) -> str:
    if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
        raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")
    return text


def effective_config(args: argparse.Namespace) -> TrainConfig:
    """Config file values, then flag overrides on top."""
    values = {}
    if args.config is not None:
        try:
            values.update(parse_config_values(Path(args.config).read_text()))
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc.strerror}") from exc
    overrides = "\n".join(f"{f.name}={getattr(args, f.name)}" for f in dataclasses.fields(TrainConfig)
                          if getattr(args, f.name, None) is not None)
    values.update(parse_config_values(overrides))
    return TrainConfig(**values)


def _parse_counts(text: str) -> tuple:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated counts: train,val,test")
    return tuple(parts)


def _parse_sizes(text: str) -> list:
    sizes = []
    for item in text.split(","):
        h, _, w = item.lower().partition("x")
        sizes.append((int(h), int(w or h)))
    return sizes


def _require_dir(path: Path, what: str) -> Path:
    if not path.is_dir() or not os.access(path, os.R_OK):
        raise CliError(f"{what} directory {path} does not exist or is unreadable", EXIT_DATA)
    return path


def _load_state(path: Path):
    if not path.is_file():
        raise CliError(f"checkpoint {path} not found", EXIT_CHECKPOINT)
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise CliError(str(exc), EXIT_CHECKPOINT) from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args: argparse.Namespace) -> int:
    cfg = effective_config(args)
    sys.stdout.write(cfg.to_text())
    sys.stdout.flush()
    data = _require_dir(args.data, "data")
    try:
        samples = load_directory(data, cfg.resolution)
    except (FileNotFoundError, OSError) as exc:
        raise CliError(str(exc), EXIT_DATA) from exc
    manifest = args.manifest or data
    if args.split is None and (manifest / "train.txt").exists():
        split = read_manifest(manifest)
    else:
        ids = sorted(samples)
        counts = args.split or (len(ids) - 2 * (len(ids) // 10), len(ids) // 10, len(ids) // 10)
        split = split_dataset(ids, counts, cfg.seed)
    missing = [i for i in split.train + split.validation + split.test if i not in samples]
    if missing:
        raise CliError(f"split names ids with no image/mask pair: {missing[:5]}", EXIT_DATA)
    state = _load_state(args.resume) if args.resume is not None else None
    args.out.mkdir(parents=True, exist_ok=True)
    write_manifest(split, args.out)
    (args.out / "config.txt").write_text(cfg.to_text())
    state, history = train(cfg, split, samples, out_dir=args.out, state=state)
    final = history.val_dice[-1][1] if history.val_dice else float("nan")
    print(f"trained {state.epoch} epochs ({state.step} steps); last validation dice {final:.4f}; "
          f"checkpoint {args.out / 'checkpoint.lgck'}")
    return 0


def _segment_one(G, path: Path, out: Path, overlay: bool, threshold: float) -> str:
    h, w = G.input_shape[1:]
    img = read_png(path)
    if img.shape != (h, w):
        img = np.asarray(Image.fromarray(img, mode="F").resize((w, h), Image.BILINEAR), np.float32)
    mask = predict(G, img[None, None], threshold)
    save_mask_png(mask, out / f"{path.stem}.png")
    if overlay:
        save_overlay_png(img, mask, out / f"{path.stem}_overlay.png")
    return path.stem


def seg_threads() -> int:
    raw = os.environ.get("SEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise CliError(f"SEG_THREADS must be a positive integer, got {raw!r}") from exc
    if n < 1:
        raise CliError(f"SEG_THREADS must be a positive integer, got {raw!r}")
    return n


def cmd_segment(args: argparse.Namespace) -> int:
    state = _load_state(args.checkpoint)
    src = _require_dir(args.input, "input")
    files = sorted(src.glob("*.png"))
    if not files:
        raise CliError(f"no PNG files in {src}", EXIT_DATA)
    args.output.mkdir(parents=True, exist_ok=True)
    n = seg_threads()
    G = state.generator
    with threadpool_limits(limits=n), ThreadPoolExecutor(max_workers=n) as pool:
        done = list(pool.map(lambda p: _segment_one(G, p, args.output, args.overlay, args.threshold), files))
    print(f"wrote {len(done)} masks to {args.output}")
    return 0


def _mask_dir(path: Path) -> Path:
    return path / "masks" if (path / "masks").is_dir() else path


def cmd_evaluate(args: argparse.Namespace) -> int:
    pred_dir = _require_dir(args.pred, "prediction")
    gt_dir = _mask_dir(_require_dir(args.gt, "ground-truth"))
    preds = {p.stem: p for p in pred_dir.glob("*.png") if not p.stem.endswith("_overlay")}
    gts = {p.stem: p for p in gt_dir.glob("*.png")}
    ids = sorted(preds.keys() & gts.keys())
    if not ids:
        raise CliError(f"no stems shared by {pred_dir} and {gt_dir}", EXIT_DATA)
    records = []
    for i in ids:
        pred, gt = read_png(preds[i]) >= 0.5, read_png(gts[i]) >= 0.5
        if pred.shape != gt.shape:
            raise CliError(f"{i}: prediction {pred.shape} and ground truth {gt.shape} differ in size")
        records.append(evaluate_pair(i, pred, gt, args.over_frac, args.under_frac))
    summary = write_report(records, args.report)
    print(f"evaluated {summary['n']} images: mean dice {summary['mean_dice']:.4f}, "
          f"mean iou {summary['mean_iou']:.4f}; report {args.report}")
    return 0


def cmd_benchmark(args: argparse.Namespace) -> int:
    if args.checkpoint is not None:
        model = _load_state(args.checkpoint).generator
        rebuild = None
    else:
        model = build_generator(args.sizes[0], args.base_channels, args.depth, seed=args.seed)

        def rebuild(size):
            return build_generator(size, args.base_channels, args.depth, seed=args.seed)

    results = benchmark_latency(model, args.sizes, repeats=args.repeats, warmup=args.warmup, rebuild=rebuild)
    print("size,pixels,median_s")
    for (h, w), t in results:
        print(f"{h}x{w},{h * w},{t:.6f}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    samples = synth_phantoms(args.n, args.size, seed=args.seed)
    write_dataset(samples, args.out)
    if args.split is not None:
        write_manifest(split_dataset([s.id for s in samples], args.split, args.seed), args.out)
    print(f"wrote {len(samples)} phantoms ({args.size[0]}x{args.size[1]}) to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="lunggan", description="GAN lung segmentation on a numpy autodiff engine.",
                                     formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a generator/discriminator pair", formatter_class=fmt)
    p.add_argument("--data", type=Path, required=True, help="dataset root containing images/ and masks/")
    p.add_argument("--out", type=Path, required=True, help="output directory for checkpoints and history")
    p.add_argument("--config", type=Path, default=None, help="key=value config file")
    p.add_argument("--manifest", type=Path, default=None,
                   help="directory with train.txt/val.txt/test.txt (defaults to the data root if present)")
    p.add_argument("--split", type=_parse_counts, default=None,
                   help="train,val,test counts for a seeded split; unset means 80/10/10 percent")
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to continue from")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="write predicted masks for a directory of images", formatter_class=fmt)
    p.add_argument("--checkpoint", type=Path, required=True, help="trained checkpoint file")
    p.add_argument("--input", type=Path, required=True, help="directory of input PNG images")
    p.add_argument("--output", type=Path, required=True, help="directory for {0,255} mask PNGs")
    p.add_argument("--overlay", action="store_true", help="also write <stem>_overlay.png boundary images")
    p.add_argument("--threshold", type=float, default=0.5, help="probability threshold")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("evaluate", help="score predicted masks against ground truth", formatter_class=fmt)
    p.add_argument("--pred", type=Path, required=True, help="directory of predicted mask PNGs")
    p.add_argument("--gt", type=Path, required=True, help="ground-truth mask directory or dataset root")
    p.add_argument("--report", type=Path, required=True, help="CSV report path")
    p.add_argument("--over-frac", type=float, default=0.10, help="over-segmentation threshold")
    p.add_argument("--under-frac", type=float, default=0.10, help="under-segmentation threshold")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="median inference latency per image size", formatter_class=fmt)
    p.add_argument("--sizes", type=_parse_sizes, default=_parse_sizes("256,400,512x400,1024"),
                   help="comma-separated sizes, HxW or N for square")
    p.add_argument("--repeats", type=int, default=5, help="timed forwards per size")
    p.add_argument("--warmup", type=int, default=1, help="untimed forwards per size")
    p.add_argument("--checkpoint", type=Path, default=None, help="benchmark this generator instead of a fresh one")
    p.add_argument("--base-channels", type=int, default=32, help="fresh generator width")
    p.add_argument("--depth", type=int, default=4, help="fresh generator depth")
    p.add_argument("--seed", type=int, default=0, help="fresh generator seed")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset", formatter_class=fmt)
    p.add_argument("--n", type=int, default=80, help="number of phantoms")
    p.add_argument("--size", type=lambda s: _parse_sizes(s)[0], default=(64, 64), help="HxW or N")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", type=Path, required=True, help="dataset root to create")
    p.add_argument("--split", type=_parse_counts, default=None,
                   help="also write a train,val,test manifest with these counts")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"lunggan {args.command}: error: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, KeyError, OSError, RuntimeError) as exc:
        print(f"lunggan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
