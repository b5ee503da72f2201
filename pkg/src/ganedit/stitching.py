"""Head-mask compositing of the input image over the optimised generation."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import torch

from .core import ImageTensor, RangeError, ShapeError, ValidationError

__all__ = ["MaskMode", "StitchPolicy", "stitch"]


class MaskMode(str, enum.Enum):
    SOFT = "soft"
    HARD = "hard"


@dataclass(frozen=True)
class StitchPolicy:
    mask_mode: MaskMode = MaskMode.SOFT
    hard_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "mask_mode", MaskMode(self.mask_mode))
        if not 0 < self.hard_threshold < 1:
            raise ValidationError(f"hard_threshold must lie in (0, 1), got {self.hard_threshold}")


def stitch(original, generated, head_mask, policy: StitchPolicy = StitchPolicy()) -> torch.Tensor:
    """``head * original + (1 - head) * generated``, per pixel and channel.

    In hard mode the mask is thresholded first (``mask >= threshold`` keeps
    the original) and each output pixel is copied from one source unchanged.
    The mask should come from the original image.
    """
    orig = original.data if isinstance(original, ImageTensor) else torch.as_tensor(original)
    gen = generated.data if isinstance(generated, ImageTensor) else torch.as_tensor(generated)
    mask = torch.as_tensor(head_mask)
    if orig.shape != gen.shape:
        raise ShapeError(f"image shapes differ: {tuple(orig.shape)} vs {tuple(gen.shape)}")
    if mask.shape != orig.shape[-2:]:
        raise ShapeError(f"mask shape {tuple(mask.shape)} does not match image {tuple(orig.shape[-2:])}")
    if bool((mask < 0).any()) or bool((mask > 1).any()):
        raise RangeError("head mask values must lie in [0, 1]")

    if policy.mask_mode is MaskMode.HARD:
        keep = (mask >= policy.hard_threshold).expand_as(orig)
        return torch.where(keep, orig, gen)
    m = mask.to(orig.dtype).unsqueeze(-3)
    out = m * orig + (1.0 - m) * gen
    # rounding in the blend can step an ulp outside the two sources
    out = torch.minimum(torch.maximum(out, torch.minimum(orig, gen)), torch.maximum(orig, gen))
    out = torch.where(m == 1, orig, out)
    return torch.where(m == 0, gen, out)
