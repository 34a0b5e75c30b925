"""Command-line surface for the inpainting pipeline."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import netpbm
from .config import ConfigError, PipelineConfig, apply_overrides, load_config
from .data import make_dataset
from .masks import MASK_KINDS, MaskGrid, generate_mask
from .pipeline import (
    CheckpointMismatchError,
    evaluate,
    inpaint_image,
    load_artifacts,
    load_vq,
    run_ablation,
    run_train_decoder,
    run_train_encoder,
    run_train_transformer,
    run_train_vq,
    training_images,
    write_manifest,
)
from .serialize import CheckpointError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CHECKPOINT = 3
EXIT_NUMERICAL = 4


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    p.add_argument("--data", help="PPM corpus directory (default: procedural)")


def _resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    overrides = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return apply_overrides(cfg, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="maskgrid",
        description="Pluralistic image inpainting over masked token grids",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="write a procedural PPM corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default="mixed", choices=("gradients", "shapes", "textures", "mixed"))
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--extent", type=int, default=64)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("make-masks", help="write PGM visibility masks")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default="small-random", choices=MASK_KINDS)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--extent", type=int, default=64)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--box-frac", type=float, default=None)

    for stage in ("train-vq", "train-encoder", "train-transformer", "train-decoder"):
        p = sub.add_parser(stage, help=f"run the {stage.split('-', 1)[1]} training stage")
        _add_config_args(p)

    p = sub.add_parser("inpaint", help="complete a partial image")
    _add_config_args(p)
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--mask", required=True, help="input PGM mask (255=visible)")
    p.add_argument("--out", required=True)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--temperature", type=float, default=None)
    p.add_argument("--anneal", type=float, default=None)

    p = sub.add_parser("eval", help="quality/diversity report on a corpus")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--mask-setting", default="box80", choices=MASK_KINDS)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("ablate", help="sweep one knob and report")
    _add_config_args(p)
    p.add_argument("--axis", required=True, choices=("alpha", "temperature", "anneal"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    return parser


def _cmd_make_dataset(args) -> int:
    paths = make_dataset(args.kind, args.count, args.extent, args.seed, args.out)
    cfg = PipelineConfig()
    write_manifest(args.out, "make-dataset", cfg, {"seed": args.seed}, [p.name for p in paths])
    print(f"wrote {len(paths)} images to {args.out}")
    return EXIT_OK


def _cmd_make_masks(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(args.count):
        mask = generate_mask(
            args.kind, (args.extent, args.extent), args.seed + i, box_frac=args.box_frac
        )
        path = out / f"mask_{args.kind}_{i:04d}.pgm"
        mask.save_pgm(path)
        names.append(path.name)
    write_manifest(args.out, "make-masks", PipelineConfig(), {"seed": args.seed}, names)
    print(f"wrote {args.count} masks to {args.out}")
    return EXIT_OK


def _cmd_train(args, stage: str) -> int:
    cfg = _resolve_config(args)
    images = training_images(cfg, args.data)
    Path(cfg.workdir).mkdir(parents=True, exist_ok=True)
    cfg.save(Path(cfg.workdir) / "config.txt")
    if stage == "vq":
        _, report = run_train_vq(cfg, images)
        print(
            f"vq done: recon mse {report['final_recon_mse']:.4f}, "
            f"codebook usage {report['codebook_usage']:.2f}"
        )
        seeds = {"seed_vq": cfg.seed_vq}
    else:
        vq = load_vq(cfg)
        if stage == "encoder":
            _, report = run_train_encoder(cfg, images, vq)
            print(f"encoder done: final loss {report['loss_history'][-1]:.4f}")
            seeds = {"seed_encoder": cfg.seed_encoder}
        elif stage == "transformer":
            _, report = run_train_transformer(cfg, images, vq)
            print(f"transformer done: final loss {report['loss_history'][-1]:.4f}")
            seeds = {"seed_transformer": cfg.seed_transformer}
        else:
            _, report = run_train_decoder(cfg, images, vq)
            print(f"decoder done: final masked mse {report['masked_mse_history'][-1]:.4f}")
            seeds = {"seed_decoder": cfg.seed_decoder}
    write_manifest(cfg.workdir, f"train-{stage}", cfg, seeds)
    return EXIT_OK


def _cmd_inpaint(args) -> int:
    cfg = _resolve_config(args)
    arts = load_artifacts(cfg)
    image = netpbm.to_float(netpbm.read_ppm(args.image))
    mask = MaskGrid.load_pgm(args.mask)
    if image.shape[1:] != (cfg.image_size, cfg.image_size):
        raise CheckpointMismatchError(
            f"image extents {image.shape[1:]} != configured extents "
            f"({cfg.image_size}, {cfg.image_size})"
        )
    results = inpaint_image(
        arts,
        image,
        mask,
        n_samples=args.samples,
        seed=args.seed,
        steps=args.steps,
        temperature=args.temperature,
        anneal=args.anneal,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i, (img, grid) in enumerate(results):
        img_path = out / f"sample_{i:02d}.ppm"
        grid_path = out / f"sample_{i:02d}.tokens.txt"
        netpbm.write_ppm(img_path, img)
        grid.save(grid_path)
        names += [img_path.name, grid_path.name]
    write_manifest(args.out, "inpaint", cfg, {"seed": args.seed}, names)
    print(f"wrote {len(results)} samples to {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    arts = load_artifacts(cfg)
    images = training_images(cfg, args.data)[: cfg.eval_images]
    samples = args.samples if args.samples is not None else cfg.eval_samples
    seed = args.seed if args.seed is not None else cfg.seed_eval
    report = evaluate(arts, images, args.mask_setting, samples, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    write_manifest(args.out, "eval", cfg, {"seed": seed}, ["report.txt"])
    print(report.to_text(), end="")
    return EXIT_OK


def _cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    values = [float(v) for v in args.values.split(",")]
    images = training_images(cfg, args.data)
    if args.axis == "alpha":
        report = run_ablation("alpha", values, cfg, images, load_vq(cfg))
    else:
        arts = load_artifacts(cfg)
        report = run_ablation(args.axis, values, cfg, images, arts.vq, arts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    import json

    (out / "ablation.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_manifest(args.out, "ablate", cfg, {"seed_eval": cfg.seed_eval}, ["ablation.json"])
    for value, row in sorted(report["rows"].items()):
        print(f"{args.axis}={value}: " + ", ".join(f"{k}={v:.5f}" for k, v in row.items()))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "make-dataset":
            return _cmd_make_dataset(args)
        if args.command == "make-masks":
            return _cmd_make_masks(args)
        if args.command.startswith("train-"):
            return _cmd_train(args, args.command[len("train-") :])
        if args.command == "inpaint":
            return _cmd_inpaint(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "ablate":
            return _cmd_ablate(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointMismatchError, CheckpointError) as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
