"""Preprocessing, prompt curation, job orchestration and persistence.

Output layout of a run directory::

    images/<image>__<prompt>.png        stitched result, 8-bit RGB
    trajectories/<image>__<prompt>.csv  one row per optimisation step
    records/<image>__<prompt>.json      full EditRecord incl. wall time
    manifest.json                       every (image, prompt) pair, sorted
    summary.json                        aggregated metrics
    timings.json                        wall-clock seconds per job

``manifest.json`` leaves out wall-clock times so that repeated runs with the
same seeds produce byte-identical manifests.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import (
    ImageTensor,
    InversionConfig,
    LossWeights,
    RangeError,
    TextPrompt,
    ValidationError,
    from_canonical_range,
    to_canonical_range,
)
from .inversion import InversionResult, LayerSubsets, PrototypeBank, run_inversion_batch
from .losses import TERMS
from .metrics import (
    MetricReport,
    MetricSummary,
    aggregate,
    fid,
    identity_similarity,
    pose_iou,
    semantic_relevance,
)
from .models import ModelStack
from .stitching import StitchPolicy, stitch

__all__ = [
    "CuratedPromptSet",
    "EditRecord",
    "preprocess_image",
    "load_image",
    "save_png",
    "to_uint8",
    "curate_prompts",
    "run_edit_job",
    "run_matrix",
    "evaluate_run",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "ablation_grid",
    "run_ablation",
    "plot_summaries",
]

log = logging.getLogger(__name__)

CROP = (192, 192)
SIDE = 256


# ----------------------------------------------------------------------------
# Images


def preprocess_image(raw, crop_h: int = CROP[0], crop_w: int = CROP[1], side: int = SIDE) -> ImageTensor:
    """Top-anchored crop of an ``H x W x 3`` array in ``[0, 255]``, bilinear resize, canonical range.

    Rows are taken from the top (the bottom of the frame is dropped);
    columns are centred when the input is wider than the crop.
    """
    arr = np.asarray(raw, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValidationError(f"expected an H x W x 3 array, got {arr.shape}")
    if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 255.0:
        raise RangeError("raw image values must be finite and inside [0, 255]")
    h, w = arr.shape[:2]
    if h < crop_h or w < crop_w:
        raise ValidationError(f"image {h} x {w} is smaller than the {crop_h} x {crop_w} crop")
    left = (w - crop_w) // 2
    crop = arr[:crop_h, left:left + crop_w, :]
    chw = torch.from_numpy(np.ascontiguousarray(crop.transpose(2, 0, 1)))
    if crop_h != side or crop_w != side:
        chw = F.interpolate(chw[None], size=(side, side), mode="bilinear", align_corners=False,
                            antialias=side < min(crop_h, crop_w))[0]
    return to_canonical_range(np.clip(chw.numpy(), 0.0, 255.0), (0.0, 255.0))


def to_uint8(image) -> np.ndarray:
    """Canonical image to ``H x W x 3`` uint8, rounding half to even."""
    data = image.data if isinstance(image, ImageTensor) else image
    arr = from_canonical_range(torch.as_tensor(data).clamp(-1.0, 1.0), (0.0, 255.0))
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def save_png(image, path) -> None:
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG")


def load_image(path, side: Optional[int] = None, crop: tuple[int, int] = CROP) -> ImageTensor:
    """Load an image file. Files already ``side x side`` are only renormalised."""
    with Image.open(path) as im:
        raw = np.asarray(im.convert("RGB"), dtype=np.float64)
    h, w = raw.shape[:2]
    if side is None or (h == side and w == side):
        if h != w:
            raise ValidationError(f"{path}: image is not square ({h} x {w}); pass side to preprocess")
        return to_canonical_range(raw.transpose(2, 0, 1), (0.0, 255.0))
    return preprocess_image(raw, min(crop[0], h), min(crop[1], w), side)


# ----------------------------------------------------------------------------
# Prompt curation


@dataclass(frozen=True)
class CuratedPromptSet:
    prompts: tuple[tuple[str, float], ...]
    keep_count: int = 120

    def __post_init__(self):
        if len(self.prompts) > self.keep_count:
            raise ValidationError("curated set is longer than keep_count")
        scores = [s for _, s in self.prompts]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValidationError("curated prompts must be sorted by descending score")

    def texts(self) -> list[str]:
        return [p for p, _ in self.prompts]

    def to_json(self, path) -> None:
        data = {"keep_count": self.keep_count, "prompts": [{"text": t, "score": s} for t, s in self.prompts]}
        Path(path).write_text(json.dumps(data, indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "CuratedPromptSet":
        data = json.loads(Path(path).read_text())
        return cls(tuple((p["text"], float(p["score"])) for p in data["prompts"]), int(data["keep_count"]))


def curate_prompts(pairs: Iterable[tuple[object, str]], keep: int, models: ModelStack) -> CuratedPromptSet:
    """Score (image, prompt) pairs by semantic relevance and keep the best ``keep``.

    Sorting is stable, so equal scores keep their input order.
    """
    if keep < 1:
        raise ValidationError("keep must be >= 1")
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("no image-text pairs to curate")
    scored = [(text, semantic_relevance(img, text, models.semantic)) for img, text in pairs]
    ranked = sorted(scored, key=lambda p: -p[1])
    return CuratedPromptSet(tuple(ranked[:keep]), keep)


# ----------------------------------------------------------------------------
# Jobs


@dataclass
class EditRecord:
    image_id: str
    prompt_id: str
    prompt: str
    init_strategy: str
    config_echo: dict
    weights_echo: dict
    loss_trajectory_path: Optional[str]
    output_image_path: Optional[str]
    metrics: MetricReport
    wall_time_seconds: float = 0.0
    status: str = "ok"
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    source_image_path: Optional[str] = None
    prototype_index: Optional[int] = None
    final_total: Optional[float] = None

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def as_dict(self, timing: bool = True) -> dict:
        d = asdict(self)
        if not timing:
            d.pop("wall_time_seconds")
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EditRecord":
        d = dict(d)
        d["metrics"] = MetricReport(**d["metrics"])
        return cls(**d)


def write_trajectory_csv(trajectory, path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", *TERMS, "total"])
    for i, bd in enumerate(trajectory):
        writer.writerow([i, *(repr(getattr(bd, t)) for t in TERMS), repr(bd.total)])
    Path(path).write_text(buf.getvalue())


def read_trajectory_csv(path) -> list[dict[str, float]]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def _job_name(image_id: str, prompt_id: str) -> str:
    return f"{image_id}__{prompt_id}"


@dataclass
class _Job:
    image_id: str
    image: ImageTensor
    source_path: Optional[str] = None


class _Stage:
    """Tracks the current pipeline stage so failures can name it."""

    def __init__(self):
        self.name = "init"


def _pair_metrics(original, stitched, prompt, models: ModelStack, image_id, prompt_id,
                  iou_threshold) -> MetricReport:
    identity = identity_similarity(original, stitched, models.face) if models.face is not None else None
    return MetricReport(
        image_id=image_id,
        prompt_id=prompt_id,
        semantic=semantic_relevance(stitched, prompt, models.semantic),
        identity=identity,
        iou=pose_iou(original, stitched, models.pose, iou_threshold),
    )


def _finish(job: _Job, result: InversionResult, prompt: str, prompt_id: str, weights: LossWeights,
            policy: StitchPolicy, models: ModelStack, out_dir: Path, iou_threshold: float,
            stage: _Stage) -> tuple[EditRecord, torch.Tensor]:
    name = _job_name(job.image_id, prompt_id)
    original = job.image.data
    stage.name = "segment"
    with torch.no_grad():
        head = models.segmenter.parse(original).head
    stage.name = "stitch"
    # the generator is unconstrained; keep the result inside the image range
    generated = result.final_image.clamp(-1.0, 1.0)
    stitched = stitch(original, generated, head, policy)
    stage.name = "metrics"
    report = _pair_metrics(original, stitched, prompt, models, job.image_id, prompt_id, iou_threshold)
    stage.name = "persist"
    img_path = out_dir / "images" / f"{name}.png"
    traj_path = out_dir / "trajectories" / f"{name}.csv"
    save_png(stitched, img_path)
    write_trajectory_csv(result.trajectory, traj_path)
    record = EditRecord(
        image_id=job.image_id,
        prompt_id=prompt_id,
        prompt=prompt,
        init_strategy=result.config_echo.init_strategy.value,
        config_echo=result.config_echo.as_dict(),
        weights_echo=weights.as_dict(),
        loss_trajectory_path=str(traj_path.relative_to(out_dir)),
        output_image_path=str(img_path.relative_to(out_dir)),
        metrics=report,
        source_image_path=job.source_path,
        prototype_index=result.prototype_index,
        final_total=result.trajectory[-1].total,
    )
    return record, stitched


def _failed(job: _Job, prompt: str, prompt_id: str, config: InversionConfig, weights: LossWeights,
            stage: str, exc: BaseException) -> EditRecord:
    log.warning("job %s failed in stage %s: %s", _job_name(job.image_id, prompt_id), stage, exc)
    return EditRecord(
        image_id=job.image_id, prompt_id=prompt_id, prompt=prompt,
        init_strategy=config.init_strategy.value, config_echo=config.as_dict(),
        weights_echo=weights.as_dict(), loss_trajectory_path=None, output_image_path=None,
        metrics=MetricReport(image_id=job.image_id, prompt_id=prompt_id),
        status="failed", failed_stage=stage, error=f"{type(exc).__name__}: {exc}",
        source_image_path=job.source_path,
    )


def _prepare_dirs(out_dir: Path) -> None:
    for sub in ("images", "trajectories", "records"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)


def _write_record(record: EditRecord, out_dir: Path) -> None:
    path = out_dir / "records" / f"{_job_name(record.image_id, record.prompt_id)}.json"
    path.write_text(json.dumps(record.as_dict(), indent=2, sort_keys=True) + "\n")


def _run_batch(jobs: Sequence[_Job], prompt: str, prompt_id: str, config: InversionConfig,
               weights: LossWeights, policy: StitchPolicy, models: ModelStack, out_dir: Path,
               bank, subsets, terms, iou_threshold) -> list[tuple[EditRecord, Optional[torch.Tensor]]]:
    """Invert a batch jointly; if that fails, retry each job alone to isolate the failure."""
    t0 = time.perf_counter()
    try:
        TextPrompt(prompt).validate()
        results = run_inversion_batch(torch.stack([j.image.data for j in jobs]), prompt, weights,
                                      config, models, bank, subsets, terms)
    except Exception as exc:
        if len(jobs) == 1:
            return [(_failed(jobs[0], prompt, prompt_id, config, weights, "inversion", exc), None)]
        out = []
        for job in jobs:
            out.extend(_run_batch([job], prompt, prompt_id, config, weights, policy, models, out_dir,
                                  bank, subsets, terms, iou_threshold))
        return out
    per_job = (time.perf_counter() - t0) / len(jobs)
    out = []
    for job, result in zip(jobs, results):
        t1 = time.perf_counter()
        stage = _Stage()
        try:
            record, stitched = _finish(job, result, prompt, prompt_id, weights, policy, models,
                                       out_dir, iou_threshold, stage)
        except Exception as exc:
            out.append((_failed(job, prompt, prompt_id, config, weights, stage.name, exc), None))
            continue
        record.wall_time_seconds = per_job + time.perf_counter() - t1
        out.append((record, stitched))
    return out


def run_edit_job(image, prompt: str, config: InversionConfig, weights: LossWeights,
                 policy: StitchPolicy, models: ModelStack, out_dir, image_id: str = "image",
                 prompt_id: str = "prompt", bank: Optional[PrototypeBank] = None,
                 subsets: Optional[LayerSubsets] = None, terms=TERMS, iou_threshold: float = 0.5,
                 side: Optional[int] = None) -> EditRecord:
    """Preprocess (if raw), initialise, invert, stitch, score and persist one pair.

    ``image`` may be an :class:`ImageTensor`, a canonical ``3 x n x n`` tensor,
    or a raw ``H x W x 3`` array in ``[0, 255]``.
    """
    out_dir = Path(out_dir)
    _prepare_dirs(out_dir)
    src = str(image) if isinstance(image, (str, Path)) else None
    try:
        image = _coerce_image(image, side or models.generator.output_side)
    except Exception as exc:
        job = _Job(image_id, None, src)  # type: ignore[arg-type]
        record = _failed(job, prompt, prompt_id, config, weights, "preprocess", exc)
        _write_record(record, out_dir)
        return record
    [(record, _)] = _run_batch([_Job(image_id, image, src)], prompt, prompt_id, config, weights, policy,
                               models, out_dir, bank, subsets, terms, iou_threshold)
    _write_record(record, out_dir)
    return record


def _coerce_image(image, side: int) -> ImageTensor:
    if isinstance(image, ImageTensor):
        return image
    if isinstance(image, (str, Path)):
        return load_image(image, side)
    arr = image.detach().numpy() if isinstance(image, torch.Tensor) else np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 3 and arr.shape[1] == arr.shape[2]:
        return ImageTensor(torch.from_numpy(np.asarray(arr, dtype=np.float64)))
    crop = (min(CROP[0], arr.shape[0]), min(CROP[1], arr.shape[1]))
    return preprocess_image(arr, crop[0], crop[1], side)


def _prompt_ids(prompts) -> list[tuple[str, str]]:
    if isinstance(prompts, CuratedPromptSet):
        prompts = prompts.texts()
    if isinstance(prompts, Mapping):
        return [(str(k), v) for k, v in prompts.items()]
    return [(f"p{i:03d}", p) for i, p in enumerate(prompts)]


def run_matrix(images, prompts, config: InversionConfig, weights: LossWeights, models: ModelStack,
               out_dir, policy: StitchPolicy = StitchPolicy(), bank: Optional[PrototypeBank] = None,
               subsets: Optional[LayerSubsets] = None, terms=TERMS, workers: int = 1,
               iou_threshold: float = 0.5, fid_embedder: Optional[Callable] = None) -> list[EditRecord]:
    """Run every (image, prompt) pair and write the manifest and summary.

    ``images`` maps image id to image (or is a sequence, ids ``i000`` ...).
    Images are batched per prompt in groups of ``config.batch_size``. Jobs
    are spread over ``workers`` threads; all files are written by the
    calling thread in a fixed order.
    """
    out_dir = Path(out_dir)
    _prepare_dirs(out_dir)
    if not isinstance(images, Mapping):
        images = {f"i{i:03d}": im for i, im in enumerate(images)}
    side = models.generator.output_side
    jobs: list[_Job] = []
    early: list[EditRecord] = []
    prompt_list = _prompt_ids(prompts)
    if not images or not prompt_list:
        raise ValidationError("run_matrix needs at least one image and one prompt")
    for image_id, im in images.items():
        src = str(im) if isinstance(im, (str, Path)) else None
        try:
            jobs.append(_Job(image_id, _coerce_image(im, side), src))
        except Exception as exc:
            for pid, text in prompt_list:
                early.append(_failed(_Job(image_id, None, src), text, pid, config, weights, "preprocess", exc))

    tasks = []
    for pid, text in prompt_list:
        for start in range(0, len(jobs), config.batch_size):
            tasks.append((jobs[start:start + config.batch_size], text, pid))

    def work(task):
        batch, text, pid = task
        return _run_batch(batch, text, pid, config, weights, policy, models, out_dir, bank, subsets,
                          terms, iou_threshold)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(work, tasks))
    else:
        outputs = [work(t) for t in tasks]

    records = list(early)
    stitched_by_prompt: dict[str, list[torch.Tensor]] = {pid: [] for pid, _ in prompt_list}
    for out in outputs:
        for record, stitched in out:
            records.append(record)
            if stitched is not None:
                stitched_by_prompt[record.prompt_id].append(stitched)
    records.sort(key=lambda r: (r.prompt_id, r.image_id))

    reference = [j.image.data for j in jobs]
    embedder = fid_embedder or models.semantic.embed_image
    prompt_fids = {}
    for pid, edited in stitched_by_prompt.items():
        if len(edited) >= 2 and len(reference) >= 2:
            prompt_fids[pid] = fid(edited, reference, embedder)
    for r in records:
        if r.ok:
            r.metrics.fid = prompt_fids.get(r.prompt_id)
        _write_record(r, out_dir)

    _write_outputs(records, out_dir, prompt_fids)
    return records


def _write_outputs(records: Sequence[EditRecord], out_dir: Path, prompt_fids: Mapping[str, float]) -> MetricSummary:
    ok = [r.metrics for r in records if r.ok]
    summary = aggregate(ok, prompt_fids) if ok else MetricSummary(None, None, None, None)
    summary.counts["failed"] = sum(not r.ok for r in records)
    manifest = {
        "records": [r.as_dict(timing=False) for r in records],
        "succeeded": sum(r.ok for r in records),
        "failed": sum(not r.ok for r in records),
        "summary": summary.as_dict(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    summary.to_json(out_dir / "summary.json")
    timings = {_job_name(r.image_id, r.prompt_id): r.wall_time_seconds for r in records}
    (out_dir / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return summary


def evaluate_run(run_dir, models: ModelStack, iou_threshold: float = 0.5,
                 fid_embedder: Optional[Callable] = None) -> MetricSummary:
    """Recompute metrics for an existing run directory from its manifest.

    Originals are re-read from ``source_image_path``; records without one are skipped.
    """
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    side = models.generator.output_side
    reports, edited, originals = [], {}, {}
    for d in manifest["records"]:
        if d["status"] != "ok" or not d.get("source_image_path"):
            continue
        src = d["source_image_path"]
        if src not in originals:
            originals[src] = load_image(src, side).data
        out = load_image(run_dir / d["output_image_path"], side).data
        reports.append(_pair_metrics(originals[src], out, d["prompt"], models, d["image_id"],
                                     d["prompt_id"], iou_threshold))
        edited.setdefault(d["prompt_id"], []).append(out)
    if not reports:
        raise ValidationError(f"{run_dir}: no evaluable records (need source_image_path)")
    embedder = fid_embedder or models.semantic.embed_image
    ref = list(originals.values())
    fids = {pid: fid(ims, ref, embedder) for pid, ims in edited.items() if len(ims) >= 2 and len(ref) >= 2}
    summary = aggregate(reports, fids)
    summary.to_json(run_dir / "eval_summary.json")
    return summary


# ----------------------------------------------------------------------------
# Ablation grid


def ablation_grid(weights: LossWeights) -> dict[str, tuple[dict, LossWeights]]:
    """Named (inversion overrides, weights) pairs for the latent-space and loss-term ablations."""
    zero = dict(lambda_pose=0.0, lambda_reg=0.0, lambda_im=0.0, lambda_head=0.0)
    vanilla_w = weights.replace(lambda_reg=0.0)
    return {
        "mean_W": ({"init_strategy": "mean", "latent_space": "vanilla"}, vanilla_w),
        "mean_W+": ({"init_strategy": "mean", "latent_space": "extended"}, weights),
        "encoder_W": ({"init_strategy": "encoder", "latent_space": "vanilla"}, vanilla_w),
        "encoder_W+": ({"init_strategy": "encoder", "latent_space": "extended"}, weights),
        "clip_only": ({}, weights.replace(**zero)),
        "clip+composition": ({}, weights.replace(lambda_pose=0.0, lambda_reg=0.0)),
        "clip+composition+reg": ({}, weights.replace(lambda_pose=0.0)),
        "full": ({}, weights),
    }


def run_ablation(images, prompts, config: InversionConfig, weights: LossWeights, models: ModelStack,
                 out_dir, variants: Optional[Sequence[str]] = None, **matrix_kwargs) -> dict[str, dict]:
    """Run :func:`run_matrix` once per ablation variant into ``out_dir/<variant>``."""
    out_dir = Path(out_dir)
    grid = ablation_grid(weights)
    names = list(variants) if variants else list(grid)
    table = {}
    for name in names:
        overrides, w = grid[name]
        records = run_matrix(images, prompts, config.replace(**overrides), w, models, out_dir / name,
                             **matrix_kwargs)
        summary = json.loads((out_dir / name / "summary.json").read_text())
        table[name] = {
            "semantic": summary["semantic"], "identity": summary["identity"],
            "iou": summary["iou"], "fid": summary["fid"],
            "failed": sum(not r.ok for r in records),
        }
    (out_dir / "ablation.json").write_text(json.dumps(table, indent=2) + "\n")
    return table


def plot_summaries(summaries: Mapping[str, MetricSummary], out_dir) -> list[Path]:
    """Box plots of per-prompt metric distributions, one PNG per metric."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in ("semantic", "identity", "iou", "fid"):
        data, labels = [], []
        for label, summary in summaries.items():
            values = []
            for entry in summary.per_prompt.values():
                if metric == "fid":
                    if entry.get("fid") is not None:
                        values.append(entry["fid"])
                elif entry.get(metric):
                    values.append(float(np.mean(entry[metric])))
            if values:
                data.append(values)
                labels.append(label)
        if not data:
            continue
        fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(data), 4))
        ax.boxplot(data)
        ax.set_xticks(range(1, len(labels) + 1), labels, rotation=30, ha="right")
        ax.set_ylabel(metric)
        ax.set_title(f"{metric} per prompt")
        fig.tight_layout()
        path = out_dir / f"{metric}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written
