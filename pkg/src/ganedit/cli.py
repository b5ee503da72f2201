"""Command-line entry point: ``ganedit <command>``.

Without ``--config`` every command runs on the toy model stack, so the full
workflow can be exercised without pretrained checkpoints.
"""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
from PIL import Image

from .config import RunConfig, build_models, load_config
from .inversion import PrototypeBank, build_prototype_bank, select_prototype
from .metrics import MetricSummary
from .pipeline import (
    CuratedPromptSet,
    curate_prompts,
    evaluate_run,
    load_image,
    plot_summaries,
    preprocess_image,
    run_ablation,
    run_edit_job,
    run_matrix,
    save_png,
)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


def _image_files(folder) -> dict[str, Path]:
    files = sorted(p for p in Path(folder).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise click.ClickException(f"no images found in {folder}")
    return {p.stem: p for p in files}


def _read_prompts(path):
    path = Path(path)
    if path.suffix == ".json":
        return CuratedPromptSet.from_json(path)
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    return [ln for ln in lines if ln]


class _Ctx:
    def __init__(self, config: RunConfig):
        self.config = config
        self._models = None

    @property
    def models(self):
        if self._models is None:
            self._models = build_models(self.config.models)
        return self._models


pass_ctx = click.make_pass_decorator(_Ctx)


def _inversion_options(fn):
    fn = click.option("--steps", type=int, default=None, help="Optimisation steps.")(fn)
    fn = click.option("--learning-rate", type=float, default=None)(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--init", "init_strategy", type=click.Choice(["encoder", "mean", "injection"]),
                      default=None)(fn)
    fn = click.option("--latent-space", type=click.Choice(["vanilla", "extended"]), default=None)(fn)
    fn = click.option("--batch-size", type=int, default=None)(fn)
    fn = click.option("--bank", type=click.Path(exists=True), default=None)(fn)
    fn = click.option("--mask-mode", type=click.Choice(["soft", "hard"]), default=None)(fn)
    return fn


def _apply(ctx: _Ctx, **overrides) -> RunConfig:
    return ctx.config.override(**overrides)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="YAML or JSON run configuration.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, config_path, verbose):
    """Text-guided image editing by constrained latent optimisation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = _Ctx(load_config(config_path))


@main.command()
@click.argument("input_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("output_dir", type=click.Path(file_okay=False))
@click.option("--side", type=int, default=None, help="Output side (default: generator output).")
@pass_ctx
def preprocess(ctx, input_dir, output_dir, side):
    """Crop, resize and renormalise every image in INPUT_DIR."""
    side = side or ctx.models.generator.output_side
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    crop_h, crop_w = ctx.config.crop
    for stem, path in _image_files(input_dir).items():
        with Image.open(path) as im:
            raw = np.asarray(im.convert("RGB"), dtype=np.float64)
        save_png(preprocess_image(raw, crop_h, crop_w, side), out / f"{stem}.png")
    click.echo(f"wrote {len(list(out.glob('*.png')))} images to {out}")


@main.command()
@click.argument("pairs_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--keep", type=int, default=120, show_default=True)
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
@pass_ctx
def curate(ctx, pairs_file, keep, output):
    """Rank image-text pairs (JSON list of {"image", "text"}) by semantic relevance."""
    pairs_path = Path(pairs_file)
    entries = json.loads(pairs_path.read_text())
    side = ctx.models.generator.output_side
    pairs = [(load_image(pairs_path.parent / e["image"], side), e["text"]) for e in entries]
    curated = curate_prompts(pairs, keep, ctx.models)
    curated.to_json(output)
    click.echo(f"kept {len(curated.prompts)} of {len(pairs)} prompts -> {output}")


@main.group()
def bank():
    """Build or query a prototype bank."""


@bank.command("build")
@click.option("-o", "--output", type=click.Path(dir_okay=False), required=True)
@click.option("--count", type=int, default=100_000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--truncation", type=float, default=1.0, show_default=True)
@pass_ctx
def bank_build(ctx, output, count, seed, truncation):
    b = build_prototype_bank(ctx.models, count, seed, truncation)
    b.save(output)
    click.echo(f"bank of {len(b)} prototypes -> {output}")


@bank.command("query")
@click.argument("bank_file", type=click.Path(exists=True, dir_okay=False))
@click.argument("text")
@pass_ctx
def bank_query(ctx, bank_file, text):
    b = PrototypeBank.load(bank_file, ctx.models)
    emb = ctx.models.semantic.embed_text(text)
    index, _ = select_prototype(b, emb)
    sim = float(np.dot(b.embeddings[index].astype(np.float64), emb.numpy()))
    click.echo(json.dumps({"index": index, "similarity": sim}))


@main.command()
@click.argument("image", type=click.Path(exists=True, dir_okay=False))
@click.argument("prompt")
@click.option("-o", "--output", type=click.Path(file_okay=False), required=True)
@_inversion_options
@pass_ctx
def edit(ctx, image, prompt, output, **overrides):
    """Edit a single IMAGE towards PROMPT."""
    cfg = _apply(ctx, **overrides)
    models = ctx.models
    record = run_edit_job(str(image), prompt, cfg.inversion, cfg.weights, cfg.stitch, models, output,
                          image_id=Path(image).stem, prompt_id="p000", bank=cfg.load_bank(models),
                          subsets=cfg.subsets, iou_threshold=cfg.iou_threshold)
    click.echo(json.dumps(record.as_dict(), indent=2))
    if not record.ok:
        sys.exit(1)


def _run_matrix(cfg: RunConfig, models, images_dir, prompts_file, output):
    images = {k: str(v) for k, v in _image_files(images_dir).items()}
    return run_matrix(images, _read_prompts(prompts_file), cfg.inversion, cfg.weights, models, output,
                      policy=cfg.stitch, bank=cfg.load_bank(models), subsets=cfg.subsets,
                      workers=cfg.workers, iou_threshold=cfg.iou_threshold)


@main.command()
@click.argument("images_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("prompts_file", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(file_okay=False), required=True)
@click.option("--workers", type=int, default=None)
@_inversion_options
@pass_ctx
def matrix(ctx, images_dir, prompts_file, output, **overrides):
    """Edit every image in IMAGES_DIR with every prompt in PROMPTS_FILE."""
    cfg = _apply(ctx, **overrides)
    records = _run_matrix(cfg, ctx.models, images_dir, prompts_file, output)
    failed = sum(not r.ok for r in records)
    click.echo(f"{len(records) - failed} succeeded, {failed} failed -> {output}")
    if failed:
        sys.exit(1)


@main.command("eval")
@click.argument("run_dir", type=click.Path(exists=True, file_okay=False))
@pass_ctx
def eval_(ctx, run_dir):
    """Recompute metrics for an existing run directory."""
    summary = evaluate_run(run_dir, ctx.models, ctx.config.iou_threshold)
    click.echo(json.dumps({k: getattr(summary, k) for k in ("semantic", "identity", "iou", "fid")}))


@main.command()
@click.argument("images_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("prompts_file", type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(file_okay=False), required=True)
@click.option("--variant", "variants", multiple=True, help="Subset of ablation variants to run.")
@_inversion_options
@pass_ctx
def ablate(ctx, images_dir, prompts_file, output, variants, **overrides):
    """Run the latent-space/initialisation and loss-term ablation grid."""
    cfg = _apply(ctx, **overrides)
    models = ctx.models
    images = {k: str(v) for k, v in _image_files(images_dir).items()}
    table = run_ablation(images, _read_prompts(prompts_file), cfg.inversion, cfg.weights, models, output,
                         variants=variants or None, policy=cfg.stitch, bank=cfg.load_bank(models),
                         subsets=cfg.subsets, workers=cfg.workers, iou_threshold=cfg.iou_threshold)
    click.echo(json.dumps(table, indent=2))
    if any(row["failed"] for row in table.values()):
        sys.exit(1)


@main.command()
@click.argument("summaries", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("-o", "--output", type=click.Path(file_okay=False), required=True)
def plot(summaries, output):
    """Box plots per metric from one or more summary.json files."""
    loaded = {Path(s).parent.name or Path(s).stem: MetricSummary.from_json(s) for s in summaries}
    for path in plot_summaries(loaded, output):
        click.echo(str(path))


if __name__ == "__main__":
    main()
