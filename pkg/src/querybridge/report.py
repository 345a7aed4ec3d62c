"""Trend experiments and consolidated reporting.

Runs the ablation grids (condition-source baselines, connector variants,
query-token sweep, objective comparison) at a configurable step budget, then
writes one CSV report plus matplotlib figures next to it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from . import metrics, shapes
from .config import RunConfig
from .connector import ConnectorConfig, parameter_count
from .data import ShapesData
from .pipeline import GenerationPipeline
from .queries import SOURCE_LAST_LAYER, SOURCE_LEARNABLE, SOURCE_RANDOM
from .training import (
    FreezePolicy,
    ObjectiveSpec,
    Trainer,
    pretrain_backbone,
    train_steps,
)


def build_pipeline(cfg: RunConfig, source: str | None = None,
                   num_tokens: int | None = None, seed: int | None = None) -> GenerationPipeline:
    return GenerationPipeline.build(
        backbone_config=cfg.backbone,
        connector_config=cfg.connector,
        diffusion_config=cfg.diffusion,
        source=source if source is not None else cfg.queries.source,
        num_query_tokens=num_tokens if num_tokens is not None else cfg.queries.num_tokens,
        seed=seed if seed is not None else cfg.seed,
    )


def default_policy(pipeline: GenerationPipeline, requested: FreezePolicy) -> FreezePolicy:
    """Force the bank group frozen when the pipeline has no trainable bank."""
    if pipeline.bank is None or not pipeline.bank.trainable:
        return replace(requested, query_bank="frozen")
    return requested


def held_out_captions(limit: int = 48, seed: int = 999) -> list[str]:
    pool = sorted({s.caption for s in shapes.generate_dataset(2000, seed=seed)
                   if shapes.is_held_out(s.caption)})
    return pool[:limit]


def train_pipeline(
    cfg: RunConfig,
    source: str,
    num_tokens: int,
    objective: ObjectiveSpec,
    steps: int,
    seed: int,
    out_dir: Path | None = None,
) -> GenerationPipeline:
    """One trend run: build, briefly pre-train the backbone, freeze, train."""
    pipe = build_pipeline(cfg, source=source, num_tokens=num_tokens, seed=seed)
    train = ShapesData.generate(cfg.data.dataset_size, seed=cfg.data.dataset_seed + seed)
    if cfg.train.backbone_pretrain_steps:
        pretrain_backbone(
            pipe.backbone, pipe.tokenizer, train.captions,
            steps=cfg.train.backbone_pretrain_steps, seed=seed,
        )
    sched = replace(cfg.schedule, total_steps=max(steps, cfg.schedule.warmup_steps + 1))
    trainer = Trainer(
        pipe, default_policy(pipe, cfg.freeze), objective, sched,
        seed=seed, batch_size=cfg.data.batch_size,
        out_dir=out_dir, deterministic=cfg.deterministic,
    )
    if out_dir is not None:
        trainer.run_stage(train, epochs=0, max_steps=steps)
    else:
        train_steps(trainer, train, steps)
    trainer.copy_ema_to_model()
    return pipe


def evaluate_alignment(
    pipeline: GenerationPipeline,
    captions: list[str],
    seed: int = 1234,
    guidance_scale: float | None = None,
    batch: int = 16,
    repeats: int = 1,
) -> float:
    """Mean alignment over generated samples; decoders below the renderer
    canvas are upscaled before scoring (the detector is sized for 32x32)."""
    scores = []
    for rep in range(repeats):
        for i in range(0, len(captions), batch):
            chunk = captions[i:i + batch]
            images = pipeline.generate(chunk, seed=seed + 997 * rep + i,
                                       guidance_scale=guidance_scale)
            images = resize_images(images, shapes.CANVAS)
            scores += [
                metrics.alignment_score(img.numpy(), cap)
                for img, cap in zip(images, chunk)
            ]
    return float(np.mean(scores))


def resize_images(images: torch.Tensor, size: int) -> torch.Tensor:
    if images.shape[-1] == size:
        return images
    return torch.nn.functional.interpolate(images, size=(size, size), mode="nearest")


def render_captions(captions: list[str], size: int) -> torch.Tensor:
    rendered = torch.from_numpy(np.stack([
        shapes.render(shapes.spec_from_caption(c)) for c in captions
    ]))
    return resize_images(rendered, size)


def evaluate_reconstruction(
    pipeline: GenerationPipeline,
    images: torch.Tensor,
    seed: int = 4321,
    batch: int = 16,
) -> float:
    images = resize_images(images, pipeline.denoiser.config.image_size)
    values = []
    for i in range(0, images.shape[0], batch):
        chunk = images[i:i + batch]
        out = pipeline.reconstruct(chunk, seed=seed + i)
        values += [metrics.psnr(o.numpy(), x.numpy()) for o, x in zip(out, chunk)]
    finite = [v for v in values if math.isfinite(v)]
    return float(np.mean(finite)) if finite else math.inf


def evaluate_frechet(
    pipeline: GenerationPipeline,
    captions: list[str],
    real_images: torch.Tensor,
    seed: int = 777,
) -> tuple[float, list[str]]:
    extractor = metrics.ToyFeatureExtractor()
    generated = []
    for i in range(0, len(captions), 16):
        generated.append(pipeline.generate(captions[i:i + 16], seed=seed + i))
    gen = torch.cat(generated).numpy()
    fs_real = extractor.extract(real_images.numpy())
    fs_gen = extractor.extract(gen)
    return metrics.frechet_distance(fs_real, fs_gen, return_flags=True)


# ---- ablation grids ----

def baselines_grid(cfg: RunConfig, steps: int, seeds: list[int]) -> list[dict]:
    """Condition-source comparison: learnable vs random queries vs last-layer."""
    captions = held_out_captions()
    rows = []
    for source in (SOURCE_LEARNABLE, SOURCE_RANDOM, SOURCE_LAST_LAYER):
        for seed in seeds:
            pipe = train_pipeline(cfg, source, cfg.queries.num_tokens,
                                  ObjectiveSpec("t2i"), steps, seed)
            align = evaluate_alignment(pipe, captions)
            rows.append({
                "grid": "baselines", "variant": source, "num_tokens":
                    cfg.queries.num_tokens if source != SOURCE_LAST_LAYER else None,
                "seed": seed, "steps": steps, "alignment": round(align, 4),
            })
    return rows


def connector_grid(cfg: RunConfig, depths: tuple[int, ...] = (2, 4)) -> list[dict]:
    """Parameter counts for both connector variants at matched depths."""
    rows = []
    for depth in depths:
        for variant in ("enc_proj", "proj_enc"):
            model_dim = (cfg.connector.input_dim if variant == "enc_proj"
                         else cfg.connector.decoder_cond_dim)
            heads = cfg.connector.num_heads
            if model_dim % heads != 0:
                heads = 1
            cc = ConnectorConfig(
                variant=variant, num_layers=depth, input_dim=cfg.connector.input_dim,
                model_dim=model_dim, decoder_cond_dim=cfg.connector.decoder_cond_dim,
                num_heads=heads, max_rows=cfg.connector.max_rows,
            )
            rows.append({
                "grid": "connector", "variant": variant, "depth": depth,
                "encoder_dim": model_dim, "params": parameter_count(cc),
            })
    return rows


def token_sweep_grid(cfg: RunConfig, steps: int, seeds: list[int],
                     token_counts: tuple[int, ...] = (1, 4, 16, 64)) -> list[dict]:
    """Mixed-objective runs across query counts; reports PSNR and alignment."""
    captions = held_out_captions()
    rows = []
    for n in token_counts:
        for seed in seeds:
            pipe = train_pipeline(cfg, SOURCE_LEARNABLE, n,
                                  ObjectiveSpec("mixed", mix_ratio=0.5), steps, seed)
            held_imgs = render_captions(captions, pipe.denoiser.config.image_size)
            psnr_val = evaluate_reconstruction(pipe, held_imgs)
            align = evaluate_alignment(pipe, captions)
            rows.append({
                "grid": "token_sweep", "variant": f"N={n}", "num_tokens": n,
                "seed": seed, "steps": steps,
                "psnr_db": round(psnr_val, 3), "alignment": round(align, 4),
            })
    return rows


def objective_grid(cfg: RunConfig, steps: int, seeds: list[int]) -> list[dict]:
    """t2i vs reconstruction vs mixed objectives at one budget."""
    captions = held_out_captions()
    specs = [
        ObjectiveSpec("t2i"),
        ObjectiveSpec("reconstruction"),
        ObjectiveSpec("mixed", mix_ratio=0.5),
    ]
    rows = []
    for spec in specs:
        for seed in seeds:
            pipe = train_pipeline(cfg, SOURCE_LEARNABLE, cfg.queries.num_tokens,
                                  spec, steps, seed)
            held_imgs = render_captions(captions, pipe.denoiser.config.image_size)
            rows.append({
                "grid": "objectives", "variant": spec.kind, "seed": seed, "steps": steps,
                "alignment": round(evaluate_alignment(pipe, captions), 4),
                "psnr_db": round(evaluate_reconstruction(pipe, held_imgs), 3),
            })
    return rows


# ---- output ----

def write_csv(rows: list[dict], path: Path) -> Path:
    keys: list[str] = []
    for row in rows:
        for k in row:
            if k not in keys:
                keys.append(k)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        writer.writerows(rows)
    return path


def _mean_by(rows: list[dict], key: str, value: str) -> dict:
    acc: dict = {}
    for row in rows:
        if row.get(value) is None:
            continue
        acc.setdefault(row[key], []).append(row[value])
    return {k: float(np.mean(v)) for k, v in acc.items()}


def render_figures(rows: list[dict], out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    by_grid: dict[str, list[dict]] = {}
    for row in rows:
        by_grid.setdefault(row["grid"], []).append(row)

    if "baselines" in by_grid:
        means = _mean_by(by_grid["baselines"], "variant", "alignment")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        names = list(means)
        ax.bar(range(len(names)), [means[n] for n in names], color="#4878d0")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels([n.replace("_", "\n") for n in names], fontsize=8)
        ax.set_ylabel("held-out alignment")
        ax.set_title("Condition sources")
        fig.tight_layout()
        p = out_dir / "baselines.png"
        fig.savefig(p, dpi=150)
        plt.close(fig)
        paths.append(p)

    if "token_sweep" in by_grid:
        sweep = by_grid["token_sweep"]
        ns = sorted({r["num_tokens"] for r in sweep})
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
        for ax, key, label in zip(axes, ("psnr_db", "alignment"),
                                  ("reconstruction PSNR (dB)", "alignment")):
            means = _mean_by(sweep, "num_tokens", key)
            for r in sweep:
                ax.plot(r["num_tokens"], r[key], "o", color="#bbbbbb", ms=3)
            ax.plot(ns, [means[n] for n in ns], "-o", color="#d65f5f")
            ax.set_xscale("log", base=2)
            ax.set_xticks(ns)
            ax.set_xticklabels([str(n) for n in ns])
            ax.set_xlabel("query tokens")
            ax.set_ylabel(label)
        fig.suptitle("Query-token scaling")
        fig.tight_layout()
        p = out_dir / "token_scaling.png"
        fig.savefig(p, dpi=150)
        plt.close(fig)
        paths.append(p)

    if "connector" in by_grid:
        conn = by_grid["connector"]
        fig, ax = plt.subplots(figsize=(5, 3.5))
        depths = sorted({r["depth"] for r in conn})
        width = 0.35
        for i, variant in enumerate(("enc_proj", "proj_enc")):
            vals = [next(r["params"] for r in conn
                         if r["variant"] == variant and r["depth"] == d) for d in depths]
            ax.bar([d + (i - 0.5) * width for d in range(len(depths))], vals,
                   width=width, label=variant)
        ax.set_xticks(range(len(depths)))
        ax.set_xticklabels([str(d) for d in depths])
        ax.set_xlabel("encoder depth")
        ax.set_ylabel("parameters")
        ax.set_title("Connector parameter efficiency")
        ax.legend()
        fig.tight_layout()
        p = out_dir / "connector_params.png"
        fig.savefig(p, dpi=150)
        plt.close(fig)
        paths.append(p)

    if "objectives" in by_grid:
        objs = by_grid["objectives"]
        names = []
        for r in objs:
            if r["variant"] not in names:
                names.append(r["variant"])
        align = _mean_by(objs, "variant", "alignment")
        rec = _mean_by(objs, "variant", "psnr_db")
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
        for ax, series, label in zip(axes, (align, rec), ("alignment", "PSNR (dB)")):
            ax.bar(range(len(names)), [series.get(n, 0.0) for n in names], color="#6acc64")
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels(names, fontsize=8)
            ax.set_ylabel(label)
        fig.suptitle("Training objectives")
        fig.tight_layout()
        p = out_dir / "objectives.png"
        fig.savefig(p, dpi=150)
        plt.close(fig)
        paths.append(p)
    return paths


def run_ablations(
    cfg: RunConfig,
    out_dir: str | Path,
    steps: int | None = None,
    seeds: list[int] | None = None,
    grids: tuple[str, ...] = ("baselines", "connector", "token_sweep", "objectives"),
    token_counts: tuple[int, ...] = (1, 4, 16, 64),
) -> Path:
    """Run the requested ablation grids; emit report.csv + figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if steps is None:
        steps = cfg.train.max_steps or cfg.schedule.total_steps
    if seeds is None:
        seeds = [cfg.seed]
    rows: list[dict] = []
    if "connector" in grids:
        rows += connector_grid(cfg)
    if "baselines" in grids:
        rows += baselines_grid(cfg, steps, seeds)
    if "token_sweep" in grids:
        rows += token_sweep_grid(cfg, steps, seeds, token_counts)
    if "objectives" in grids:
        rows += objective_grid(cfg, steps, seeds)
    report_path = write_csv(rows, out / "report.csv")
    render_figures(rows, out)
    return report_path
