"""Evaluation metrics: semantic relevance, pose IoU, identity similarity, FID.

Per-pair metrics are computed without gradients. FID works on any embedder
returning one feature vector per image.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
import torch

from .core import ImageTensor, ShapeError, ValidationError
from .models import FaceEmbedder, PoseParser, SemanticModel

__all__ = [
    "MetricReport",
    "MetricSummary",
    "semantic_relevance",
    "pose_iou",
    "mask_iou",
    "identity_similarity",
    "frechet_distance",
    "fid",
    "aggregate",
    "FID_EPS",
]

FID_EPS = 1e-6


def _data(x):
    return x.data if isinstance(x, ImageTensor) else torch.as_tensor(x)


@dataclass
class MetricReport:
    image_id: str = ""
    prompt_id: str = ""
    semantic: Optional[float] = None
    identity: Optional[float] = None
    iou: Optional[float] = None
    fid: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)


def semantic_relevance(image, prompt, semantic: SemanticModel) -> float:
    with torch.no_grad():
        e = semantic.embed_image(_data(image))
        t = semantic.embed_text(prompt)
        return float((e * t).sum() / (e.norm() * t.norm()))


def mask_iou(a: np.ndarray, b: np.ndarray, threshold: float = 0.5) -> Optional[float]:
    """Mean IoU over parts of binarised ``(P, n, n)`` masks.

    Parts empty in both masks are skipped; ``None`` if every part is.
    """
    a = np.asarray(a) >= threshold
    b = np.asarray(b) >= threshold
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = (a & b).reshape(a.shape[0], -1).sum(axis=1)
    union = (a | b).reshape(a.shape[0], -1).sum(axis=1)
    counted = union > 0
    if not counted.any():
        return None
    return float(np.mean(inter[counted] / union[counted]))


def pose_iou(original, edited, pose: PoseParser, threshold: float = 0.5) -> Optional[float]:
    a, b = _data(original), _data(edited)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    with torch.no_grad():
        ma = pose.parse(a).masks.numpy()
        mb = pose.parse(b).masks.numpy()
    return mask_iou(ma, mb, threshold)


def identity_similarity(original, edited, face: FaceEmbedder) -> Optional[float]:
    a, b = _data(original), _data(edited)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    ea, eb = face.embed(a), face.embed(b)
    if ea is None or eb is None:
        return None
    return float(np.dot(ea, eb) / (np.linalg.norm(ea) * np.linalg.norm(eb)))


def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    vals, vecs = scipy.linalg.eigh(mat)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(feats_a: np.ndarray, feats_b: np.ndarray, eps: float = FID_EPS) -> float:
    """Frechet distance between Gaussian fits of two ``(count, dim)`` feature sets.

    The trace of ``(C_a C_b)^(1/2)`` is taken from the symmetric form
    ``(C_a^(1/2) C_b C_a^(1/2))^(1/2)``, which has the same eigenvalues, with
    both square roots via eigendecomposition and negative eigenvalues clamped.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) < 2 or len(b) < 2:
        raise ValidationError("FID needs at least two images per set")
    if a.shape[1] != b.shape[1]:
        raise ShapeError("feature dimensions differ")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    eye = eps * np.eye(a.shape[1])
    cov_a = np.atleast_2d(np.cov(a, rowvar=False)) + eye
    cov_b = np.atleast_2d(np.cov(b, rowvar=False)) + eye
    root_a = _sqrtm_psd(cov_a)
    cross = _sqrtm_psd(root_a @ cov_b @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def fid(set_a: Sequence, set_b: Sequence, embedder: Callable) -> float:
    """FID between two image collections under ``embedder`` (image -> vector)."""
    if len(set_a) < 2 or len(set_b) < 2:
        raise ValidationError("FID needs at least two images per set")

    def embed(images):
        with torch.no_grad():
            out = [np.asarray(embedder(_data(im)), dtype=np.float64).reshape(-1) for im in images]
        return np.stack(out)

    return frechet_distance(embed(set_a), embed(set_b))


@dataclass
class MetricSummary:
    semantic: Optional[float]
    identity: Optional[float]
    iou: Optional[float]
    fid: Optional[float]
    counts: dict = field(default_factory=dict)
    skipped: dict = field(default_factory=dict)
    per_prompt: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "MetricSummary":
        with open(path) as fh:
            return cls(**json.load(fh))


def _mean(values: list[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def aggregate(records: Iterable[MetricReport], prompt_fids: Optional[Mapping[str, float]] = None) -> MetricSummary:
    """Average per-pair metrics over all pairs and FID over prompts.

    ``prompt_fids`` maps prompt id to that prompt's set-level FID; when
    omitted, FID values attached to the reports are used (one per prompt).
    Absent values are excluded from means and counted in ``skipped``.
    """
    records = list(records)
    if not records:
        raise ValidationError("nothing to aggregate")
    per_prompt: dict[str, dict[str, list]] = defaultdict(lambda: {"semantic": [], "identity": [], "iou": []})
    pooled = {"semantic": [], "identity": [], "iou": []}
    skipped = {"semantic": 0, "identity": 0, "iou": 0}
    fids: dict[str, float] = dict(prompt_fids or {})
    for r in records:
        for key in pooled:
            v = getattr(r, key)
            if v is None or (isinstance(v, float) and math.isnan(v)):
                skipped[key] += 1
                continue
            pooled[key].append(float(v))
            per_prompt[r.prompt_id][key].append(float(v))
        if prompt_fids is None and r.fid is not None:
            fids.setdefault(r.prompt_id, float(r.fid))
    per_prompt_out = {}
    for pid in sorted(set(per_prompt) | set(fids)):
        entry = dict(per_prompt.get(pid, {"semantic": [], "identity": [], "iou": []}))
        entry["fid"] = fids.get(pid)
        per_prompt_out[pid] = entry
    return MetricSummary(
        semantic=_mean(pooled["semantic"]),
        identity=_mean(pooled["identity"]),
        iou=_mean(pooled["iou"]),
        fid=_mean([fids[k] for k in sorted(fids)]),
        counts={k: len(v) for k, v in pooled.items()} | {"fid": len(fids), "records": len(records)},
        skipped=skipped,
        per_prompt=per_prompt_out,
    )
