"""Command-line entrypoint: train / eval / curate / sample / reconstruct / ablate.

Every run resolves its config (file + --set overrides), validates it before
any work, and writes a config snapshot beside its outputs. Exit codes:
0 success, 1 runtime failure, 2 config validation failure.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import config as cfg_mod
from . import curation, metrics, shapes
from .data import InstructionData, ShapesData
from .errors import ConfigError
from .pipeline import GenerationPipeline
from .report import (
    build_pipeline,
    default_policy,
    evaluate_alignment,
    evaluate_frechet,
    evaluate_reconstruction,
    held_out_captions,
    run_ablations,
)
from .training import (
    OBJECTIVE_INSTRUCTION,
    Trainer,
    pretrain_backbone,
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, default=None, help="JSON run config")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[],
        metavar="SECTION.KEY=VALUE", help="override a config value",
    )
    parser.add_argument("--output-dir", type=str, default=None,
                        help="overrides output_dir (also QUERYBRIDGE_OUTPUT_ROOT env)")


def _resolve_config(args) -> cfg_mod.RunConfig:
    import os

    cfg = cfg_mod.load(args.config) if args.config else cfg_mod.RunConfig()
    cfg = cfg_mod.apply_overrides(cfg, args.overrides)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    root = os.environ.get("QUERYBRIDGE_OUTPUT_ROOT")
    if root and not Path(cfg.output_dir).is_absolute():
        cfg.output_dir = str(Path(root) / cfg.output_dir)
    return cfg


def _load_or_build(cfg: cfg_mod.RunConfig) -> GenerationPipeline:
    if cfg.train.checkpoint:
        pipe, _ = GenerationPipeline.load(cfg.train.checkpoint)
        return pipe
    return build_pipeline(cfg)


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    cfg_mod.save_snapshot(cfg, out)
    pipe = build_pipeline(cfg)
    if cfg.objective.kind == OBJECTIVE_INSTRUCTION:
        if not cfg.data.samples or not cfg.data.images_root:
            raise ConfigError(
                "objective instruction_pairs requires data.samples and data.images_root"
            )
        dataset = InstructionData.load(cfg.data.samples, cfg.data.images_root)
    else:
        dataset = ShapesData.generate(cfg.data.dataset_size, seed=cfg.data.dataset_seed)
        if cfg.train.backbone_pretrain_steps:
            pretrain_backbone(
                pipe.backbone, pipe.tokenizer, dataset.captions,
                steps=cfg.train.backbone_pretrain_steps, seed=cfg.seed,
            )
    trainer = Trainer(
        pipe, default_policy(pipe, cfg.freeze), cfg.objective, cfg.schedule,
        seed=cfg.seed, batch_size=cfg.data.batch_size,
        deterministic=cfg.deterministic, out_dir=out,
    )
    if cfg.train.checkpoint:
        trainer.load_checkpoint(cfg.train.checkpoint)
    path = trainer.run_stage(dataset, epochs=cfg.train.epochs, max_steps=cfg.train.max_steps)
    print(f"checkpoint written to {path}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    cfg_mod.save_snapshot(cfg, out)
    pipe = _load_or_build(cfg)
    captions = held_out_captions(limit=args.num_captions)
    from .report import render_captions

    reports = []
    align = evaluate_alignment(pipe, captions, seed=cfg.seed + 1234)
    reports.append({"metric": "alignment_score", "value": align,
                    "n": len(captions), "extractor_id": None, "flags": []})
    held_imgs = render_captions(captions, pipe.denoiser.config.image_size)
    psnr_val = evaluate_reconstruction(pipe, held_imgs, seed=cfg.seed + 4321)
    reports.append({"metric": "reconstruction_psnr_db",
                    "value": None if math.isinf(psnr_val) else psnr_val,
                    "n": len(captions), "extractor_id": None, "flags": []})
    fd, flags = evaluate_frechet(pipe, captions, held_imgs, seed=cfg.seed + 777)
    extractor_id = metrics.ToyFeatureExtractor().extractor_id
    reports.append({"metric": "frechet_distance", "value": fd,
                    "n": len(captions), "extractor_id": extractor_id, "flags": flags})
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "metrics.json"
    report_path.write_text(json.dumps(reports, indent=2) + "\n")
    for r in reports:
        print(f"{r['metric']}: {r['value']}")
    print(f"metric report written to {report_path}")
    return 0


def cmd_sample(args) -> int:
    cfg = _resolve_config(args)
    if not args.prompt or not args.prompt.strip():
        raise ConfigError("--prompt must be a non-empty caption")
    out = Path(cfg.output_dir)
    cfg_mod.save_snapshot(cfg, out)
    pipe = _load_or_build(cfg)
    guidance = cfg.diffusion.guidance_scale if args.guidance is None else args.guidance
    images = pipe.generate([args.prompt] * args.num_images,
                           seed=cfg.seed, guidance_scale=guidance)
    from PIL import Image

    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        arr = (img.numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
        png = out / f"sample_{i:03d}.png"
        Image.fromarray(arr).save(png)
        sidecar = {
            "prompt": args.prompt,
            "seed": cfg.seed,
            "guidance": guidance,
            "num_query_tokens": pipe.bank.num_tokens if pipe.bank is not None else None,
            "checkpoint": cfg.train.checkpoint,
        }
        png.with_suffix(".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote {len(images)} samples to {out}")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    cfg_mod.save_snapshot(cfg, out)
    pipe = _load_or_build(cfg)
    import torch

    image = torch.from_numpy(shapes.load_image(args.image))
    recon = pipe.reconstruct(image.unsqueeze(0), seed=cfg.seed).squeeze(0)
    from PIL import Image

    out.mkdir(parents=True, exist_ok=True)
    arr = (recon.numpy().transpose(1, 2, 0) * 255.0).round().astype(np.uint8)
    png = out / "reconstruction.png"
    Image.fromarray(arr).save(png)
    value = metrics.psnr(recon.numpy(), image.numpy())
    png.with_suffix(".json").write_text(json.dumps({
        "input": str(args.image), "seed": cfg.seed,
        "psnr_db": None if math.isinf(value) else value,
        "checkpoint": cfg.train.checkpoint,
    }, indent=2) + "\n")
    print(f"reconstruction PSNR: {value:.2f} dB -> {png}")
    return 0


def cmd_curate(args) -> int:
    cfg = _resolve_config(args)
    if not cfg.data.manifest:
        raise ConfigError("curate requires data.manifest (JSONL of image_ref/caption)")
    out = Path(cfg.output_dir)
    cfg_mod.save_snapshot(cfg, out)
    client = None
    if args.generator == "stub":
        client = curation.EchoStubGenerator()
    elif args.generator.startswith("http"):
        client = curation.HttpGenerator(args.generator)
    else:
        raise ConfigError(f"unknown generator {args.generator!r} (use 'stub' or an http URL)")
    out.mkdir(parents=True, exist_ok=True)
    samples = curation.curate(
        cfg.data.manifest, out / "samples.jsonl", client=client,
        threshold=args.threshold, max_group=args.max_group,
    )
    print(f"curated {len(samples)} instruction samples -> {out / 'samples.jsonl'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    out = Path(cfg.output_dir)
    cfg_mod.save_snapshot(cfg, out)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    grids = tuple(args.grids.split(",")) if args.grids else (
        "baselines", "connector", "token_sweep", "objectives")
    token_counts = tuple(int(n) for n in args.tokens.split(",")) if args.tokens else (1, 4, 16, 64)
    path = run_ablations(cfg, out, steps=args.steps, seeds=seeds,
                         grids=grids, token_counts=token_counts)
    print(f"ablation report written to {path}")
    with path.open() as fh:
        print(fh.read().rstrip())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="querybridge",
        description="Learnable-query bridge from a frozen transformer to a diffusion decoder",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training stage")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on held-out captions")
    _add_common(p)
    p.add_argument("--num-captions", type=int, default=48)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="generate images for a caption")
    _add_common(p)
    p.add_argument("--prompt", type=str, required=True)
    p.add_argument("--num-images", type=int, default=1)
    p.add_argument("--guidance", type=float, default=None)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("reconstruct", help="reconstruct an input image")
    _add_common(p)
    p.add_argument("--image", type=str, required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("curate", help="build instruction-tuning pairs from a manifest")
    _add_common(p)
    p.add_argument("--generator", type=str, default="stub",
                   help="'stub' or an http(s) endpoint")
    p.add_argument("--threshold", type=float, default=curation.DEFAULT_THRESHOLD)
    p.add_argument("--max-group", type=int, default=curation.DEFAULT_MAX_GROUP)
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("ablate", help="run ablation grids and emit a report")
    _add_common(p)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seeds", type=str, default=None, help="comma-separated")
    p.add_argument("--grids", type=str, default=None,
                   help="subset of baselines,connector,token_sweep,objectives")
    p.add_argument("--tokens", type=str, default=None, help="token sweep sizes")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
