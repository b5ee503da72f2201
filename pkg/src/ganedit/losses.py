"""Differentiable loss terms and their weighted composition.

All norms are plain sums of squares over pixels (no averaging); the balancing
weights absorb the scale. Every function accepts leading batch dimensions and
returns one value per batch element.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields
from typing import Iterable, Optional

import torch

from .core import ConfigurationError, ExtendedLatentCode, ImageTensor, LossWeights
from .models import ModelStack, PoseParser, SemanticModel, Segmenter

__all__ = [
    "TERMS",
    "LossBreakdown",
    "semantic_loss",
    "pose_loss",
    "latent_regularization",
    "composition_image_loss",
    "composition_head_loss",
    "Objective",
    "total_objective",
]

TERMS = ("clip", "pose", "reg", "im", "head")


def _data(x):
    return x.data if isinstance(x, ImageTensor) else x


@dataclass(frozen=True)
class LossBreakdown:
    clip: float
    pose: float
    reg: float
    im: float
    head: float
    total: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def semantic_loss(image, prompt_embedding: torch.Tensor, semantic: SemanticModel) -> torch.Tensor:
    """``1 - cos(embed_image(image), prompt_embedding)``."""
    e = semantic.embed_image(_data(image))
    t = prompt_embedding / prompt_embedding.norm(dim=-1, keepdim=True)
    return 1.0 - (e * t).sum(dim=-1)


def _pose_from_masks(reference: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    n_parts = masks.shape[-3]
    if n_parts == 0:
        raise ConfigurationError("pose loss needs at least one body part")
    per_part = ((reference - masks) ** 2).sum(dim=(-2, -1))
    return per_part.sum(dim=-1) / n_parts


def pose_loss(original, generated, pose: PoseParser) -> torch.Tensor:
    """Mean over parts of the squared L2 distance between part masks."""
    if len(pose.part_indices) == 0:
        raise ConfigurationError("pose loss needs at least one body part")
    ref = pose.parse(_data(original)).masks
    return _pose_from_masks(ref, pose.parse(_data(generated)).masks)


def latent_regularization(code) -> torch.Tensor:
    """Mean squared distance of every layer code to the first (coarsest) one."""
    rows = code.rows if isinstance(code, ExtendedLatentCode) else code
    n = rows.shape[-2]
    if n < 2:
        raise ConfigurationError("latent regularisation needs at least two layer codes")
    diff = rows[..., 1:, :] - rows[..., :1, :]
    return (diff**2).sum(dim=(-2, -1)) / (n - 1)


def _masked_sq(mask: torch.Tensor, original: torch.Tensor, generated: torch.Tensor) -> torch.Tensor:
    # mask is (..., n, n) and multiplies every channel
    return ((mask.unsqueeze(-3) * (generated - original)) ** 2).sum(dim=(-3, -2, -1))


def composition_image_loss(original, generated, seg_of_original) -> torch.Tensor:
    """``||(1 - S_body(original)) * (generated - original)||^2``."""
    return _masked_sq(1.0 - seg_of_original.body, _data(original), _data(generated))


def composition_head_loss(original, generated, segment: Segmenter) -> torch.Tensor:
    ref = segment.parse(_data(original)).head
    return ((ref - segment.parse(_data(generated)).head) ** 2).sum(dim=(-2, -1))


class Objective:
    """The weighted objective for one original image and one prompt.

    Everything that depends only on the original image or the prompt (prompt
    embedding, composition mask, reference head and pose masks) is computed
    once here. ``terms`` restricts which terms exist at all; a term that is
    absent, or whose weight is zero, is never evaluated and reports 0.

    In vanilla mode the regulariser is disabled because all layer codes are
    tied by construction.
    """

    def __init__(self, original, prompt_embedding: Optional[torch.Tensor], weights: LossWeights,
                 models: ModelStack, terms: Iterable[str] = TERMS, vanilla: bool = False):
        self.models = models
        self.original = _data(original).detach()
        self.weights = weights
        terms = tuple(terms)
        unknown = set(terms) - set(TERMS)
        if unknown:
            raise ConfigurationError(f"unknown loss terms {sorted(unknown)}")
        w = weights.as_dict()
        self.active = tuple(t for t in TERMS if t in terms and w[f"lambda_{t}"] > 0)
        if vanilla and "reg" in self.active:
            warnings.warn("latent regulariser is disabled in vanilla latent space", stacklevel=2)
            self.active = tuple(t for t in self.active if t != "reg")
        self.vanilla = vanilla

        with torch.no_grad():
            if "clip" in self.active:
                if prompt_embedding is None:
                    raise ConfigurationError("semantic term requires a prompt embedding")
                self.prompt_embedding = prompt_embedding.detach()
            if "pose" in self.active:
                if len(models.pose.part_indices) == 0:
                    raise ConfigurationError("pose loss needs at least one body part")
                self.pose_ref = models.pose.parse(self.original).masks
            if "im" in self.active or "head" in self.active:
                seg = models.segmenter.parse(self.original)
                self.composition_mask = 1.0 - seg.body
                self.head_ref = seg.head

    def terms(self, rows: torch.Tensor) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
        """Return per-element total and per-term values for codes ``(..., N_w, d_w)``."""
        m = self.models
        image = m.generator.synthesize(rows)
        values: dict[str, torch.Tensor] = {}
        for name in self.active:
            if name == "clip":
                values[name] = semantic_loss(image, self.prompt_embedding, m.semantic)
            elif name == "pose":
                values[name] = _pose_from_masks(self.pose_ref, m.pose.parse(image).masks)
            elif name == "reg":
                values[name] = latent_regularization(rows)
            elif name == "im":
                values[name] = _masked_sq(self.composition_mask, self.original, image)
            elif name == "head":
                values[name] = ((self.head_ref - m.segmenter.parse(image).head) ** 2).sum(dim=(-2, -1))
        w = self.weights.as_dict()
        total = torch.zeros(rows.shape[:-2], dtype=rows.dtype)
        for name, v in values.items():
            total = total + w[f"lambda_{name}"] * v
        return total, values

    @staticmethod
    def breakdowns(total: torch.Tensor, values: dict[str, torch.Tensor]) -> list[LossBreakdown]:
        """Detach batched term values into one :class:`LossBreakdown` per element."""
        total = total.detach().reshape(-1)
        flat = {k: v.detach().reshape(-1) for k, v in values.items()}
        out = []
        for i in range(total.numel()):
            kw = {t: float(flat[t][i]) if t in flat else 0.0 for t in TERMS}
            out.append(LossBreakdown(total=float(total[i]), **kw))
        return out

    def __call__(self, code) -> LossBreakdown:
        rows = code.rows if isinstance(code, ExtendedLatentCode) else code
        total, values = self.terms(rows)
        return self.breakdowns(total, values)[0]


def total_objective(original, code, prompt_embedding, weights: LossWeights, models: ModelStack,
                    terms: Iterable[str] = TERMS, vanilla: bool = False) -> LossBreakdown:
    """Evaluate the composite objective for a single code."""
    return Objective(original, prompt_embedding, weights, models, terms, vanilla)(code)
