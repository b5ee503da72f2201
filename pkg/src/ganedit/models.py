"""Model interfaces, desk-scale reference models and external adapters.

Six roles take part in an edit: the generator, the joint image/text
(semantic) model, the body-part pose parser, the three-class segmenter, the
inversion encoder and a face embedder used only for evaluation. Each role is
an abstract class here. The ``Toy*`` classes are small fixed-weight networks
built from a seed, so the whole pipeline runs and differentiates without any
pretrained checkpoint. ``External*`` adapters wrap user-supplied callables
and convert range/resolution at the boundary.

Every differentiable op accepts arbitrary leading batch dimensions.
"""

from __future__ import annotations

import abc
import hashlib
import importlib
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import (
    ConfigurationError,
    ExtendedLatentCode,
    ImageTensor,
    ShapeError,
    TextPrompt,
    ValidationError,
    tokenize,
)

__all__ = [
    "BodyPartMaskSet",
    "SegmentationTriple",
    "Generator",
    "SemanticModel",
    "PoseParser",
    "Segmenter",
    "Encoder",
    "FaceEmbedder",
    "ToyGenerator",
    "ToySemanticModel",
    "ToyPoseParser",
    "ToySegmenter",
    "ToyEncoder",
    "ToyFaceEmbedder",
    "ModelStack",
    "toy_stack",
    "resize_bilinear",
    "verify_checkpoint",
    "load_factory",
    "ChecksumError",
    "MODEL_CACHE_ENV",
    "model_cache_dir",
]

MODEL_CACHE_ENV = "GANEDIT_MODEL_CACHE"

DTYPE = torch.float64


def _images(x) -> torch.Tensor:
    if isinstance(x, ImageTensor):
        return x.data
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def _rows(code) -> torch.Tensor:
    if isinstance(code, ExtendedLatentCode):
        return code.rows
    return code if isinstance(code, torch.Tensor) else torch.as_tensor(np.asarray(code, dtype=np.float64))


def resize_bilinear(images: torch.Tensor, side: int) -> torch.Tensor:
    """Bilinear resize (half-pixel centres) of ``(..., C, H, W)`` to ``side x side``."""
    if images.shape[-1] == side and images.shape[-2] == side:
        return images
    lead = images.shape[:-3]
    flat = images.reshape(-1, *images.shape[-3:])
    out = F.interpolate(flat, size=(side, side), mode="bilinear", align_corners=False)
    return out.reshape(*lead, *out.shape[-3:])


def _remap(images: torch.Tensor, target_range) -> torch.Tensor:
    lo, hi = target_range
    if (lo, hi) == (-1.0, 1.0):
        return images
    return (images + 1.0) * 0.5 * (hi - lo) + lo


# ----------------------------------------------------------------------------
# Parsed outputs


@dataclass(frozen=True)
class BodyPartMaskSet:
    """Soft body-part presence maps, ``N_D x n x n`` (plus any batch dims)."""

    masks: torch.Tensor
    part_indices: tuple[int, ...]

    def __post_init__(self):
        if self.masks.shape[-3] != len(self.part_indices):
            raise ShapeError(
                f"{self.masks.shape[-3]} mask channels for {len(self.part_indices)} part indices"
            )

    @property
    def part_count(self) -> int:
        return len(self.part_indices)


@dataclass(frozen=True)
class SegmentationTriple:
    """Per-pixel background/body/head probabilities."""

    bg: torch.Tensor
    body: torch.Tensor
    head: torch.Tensor


# ----------------------------------------------------------------------------
# Interfaces


class Generator(abc.ABC):
    layer_count: int
    style_dim: int
    output_side: int

    @property
    @abc.abstractmethod
    def mean_code(self) -> ExtendedLatentCode:
        """Average style code broadcast to every layer."""

    @abc.abstractmethod
    def _synthesize(self, rows: torch.Tensor) -> torch.Tensor:
        ...

    def synthesize(self, code) -> torch.Tensor:
        """Map ``(..., N_w, d_w)`` codes to ``(..., 3, n, n)`` images."""
        rows = _rows(code)
        if rows.ndim < 2 or rows.shape[-2:] != (self.layer_count, self.style_dim):
            raise ShapeError(
                f"code shape {tuple(rows.shape)} does not match generator "
                f"({self.layer_count} x {self.style_dim})"
            )
        return self._synthesize(rows)

    @abc.abstractmethod
    def sample_codes(self, count: int, seed: int, truncation: float = 1.0) -> torch.Tensor:
        """Draw ``count`` codes from the native prior, shape ``(count, N_w, d_w)``."""


class SemanticModel(abc.ABC):
    embed_dim: int
    max_tokens: int = 76

    @abc.abstractmethod
    def embed_image(self, image) -> torch.Tensor:
        """Unit-norm embedding(s) of ``(..., 3, n, n)`` images."""

    @abc.abstractmethod
    def _embed_text(self, text: str) -> torch.Tensor:
        ...

    def count_tokens(self, text: str) -> int:
        return len(tokenize(text))

    def prompt(self, text: str) -> TextPrompt:
        return TextPrompt(text, self.count_tokens(text))

    def embed_text(self, prompt) -> torch.Tensor:
        if isinstance(prompt, str):
            prompt = self.prompt(prompt)
        if prompt.token_count > self.max_tokens:
            raise ValidationError(
                f"prompt has {prompt.token_count} tokens; the text encoder is limited to "
                f"{self.max_tokens} tokens"
            )
        return self._embed_text(prompt.text)


class PoseParser(abc.ABC):
    part_indices: tuple[int, ...]

    @abc.abstractmethod
    def parse(self, image) -> BodyPartMaskSet:
        ...


class Segmenter(abc.ABC):
    @abc.abstractmethod
    def parse(self, image) -> SegmentationTriple:
        ...


class Encoder(abc.ABC):
    layer_count: int
    vanilla: bool = False

    @abc.abstractmethod
    def invert(self, image) -> ExtendedLatentCode:
        ...


class FaceEmbedder(abc.ABC):
    @abc.abstractmethod
    def embed(self, image) -> Optional[np.ndarray]:
        """Unit identity vector, or ``None`` when no face is found."""


# ----------------------------------------------------------------------------
# Toy reference models


def _rng(seed: int, tag: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _t(a: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float64))


class ToyGenerator(Generator):
    """Linear generator ``image = reshape(A @ vec(w) + b)``.

    Linearity makes the reconstruction objective an ordinary least-squares
    problem, which gives the optimizer tests an exact oracle.
    """

    # Keeps the reconstruction Hessian's top eigenvalue near 1 at default
    # weights; much larger and constant-rate Adam oscillates around the optimum.
    weight_scale = 0.1
    code_scale = 3.5

    def __init__(self, seed: int = 0, layer_count: int = 6, style_dim: int = 16, side: int = 16):
        self.layer_count = layer_count
        self.style_dim = style_dim
        self.output_side = side
        rng = _rng(seed, "generator")
        pixels = 3 * side * side
        latent = layer_count * style_dim
        self.weight = _t(rng.normal(0.0, self.weight_scale / np.sqrt(latent), size=(pixels, latent)))
        yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
        base = np.stack([0.3 * np.cos(3 * xx) - 0.2 * yy, 0.25 * np.sin(2 * yy), 0.2 * (xx - yy)])
        self.bias = _t(base.reshape(-1))
        self._mean_row = _t(rng.normal(0.0, 0.2 * self.code_scale, size=style_dim))
        self._mapping = _t(rng.normal(0.0, 1.0 / np.sqrt(style_dim), size=(style_dim, style_dim)))

    @property
    def mean_code(self) -> ExtendedLatentCode:
        return ExtendedLatentCode.broadcast(self._mean_row, self.layer_count)

    def _synthesize(self, rows):
        flat = rows.reshape(*rows.shape[:-2], -1)
        out = flat @ self.weight.T + self.bias
        return out.reshape(*rows.shape[:-2], 3, self.output_side, self.output_side)

    def sample_codes(self, count, seed, truncation=1.0):
        if not 0 < truncation <= 1:
            raise ConfigurationError(f"truncation must lie in (0, 1], got {truncation}")
        z = _t(np.random.default_rng(seed).standard_normal((count, self.style_dim)))
        w = self._mean_row + self.code_scale * torch.tanh(z @ self._mapping)
        w = self._mean_row + truncation * (w - self._mean_row)
        return w[:, None, :].expand(count, self.layer_count, self.style_dim).clone()


class ToySemanticModel(SemanticModel):
    """Fixed random projection plus bias, normalised to the unit sphere."""

    def __init__(self, seed: int = 0, embed_dim: int = 8, input_side: int = 16):
        self.embed_dim = embed_dim
        self.input_side = input_side
        rng = _rng(seed, "semantic")
        self.projection = _t(rng.normal(0.0, 1.0 / input_side, size=(embed_dim, 3 * input_side**2)))
        # Keeps the zero image away from the origin so normalisation is defined.
        self.bias = _t(rng.normal(0.0, 1.0, size=embed_dim))
        self._text_bias = _t(rng.normal(0.0, 1.0, size=embed_dim))
        self._seed = seed

    def embed_image(self, image):
        x = resize_bilinear(_images(image), self.input_side)
        v = x.reshape(*x.shape[:-3], -1) @ self.projection.T + self.bias
        return v / v.norm(dim=-1, keepdim=True)

    def _token_vector(self, token: str) -> np.ndarray:
        return _rng(self._seed, "token:" + token).normal(0.0, 1.0, size=self.embed_dim)

    def _embed_text(self, text):
        v = self._text_bias.numpy().copy()
        for token in tokenize(text):
            v += self._token_vector(token)
        v = _t(v)
        return v / v.norm()


class ToyPoseParser(PoseParser):
    """Per-part sigmoid of a channel mix plus a fixed spatial prior."""

    def __init__(self, seed: int = 0, side: int = 16, part_count: int = 4, part_indices: Sequence[int] = ()):
        self.side = side
        self.part_count = part_count
        indices = tuple(int(i) for i in part_indices) or tuple(range(part_count))
        if any(not 0 <= i < part_count for i in indices):
            raise ConfigurationError(f"part indices {indices} outside 0..{part_count - 1}")
        self.part_indices = indices
        rng = _rng(seed, "pose")
        self.channel_mix = _t(rng.normal(0.0, 1.5, size=(part_count, 3)))
        yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
        centres = rng.uniform(0.2, 0.8, size=(part_count, 2))
        prior = [2.0 - 12.0 * ((yy - cy) ** 2 + (xx - cx) ** 2) for cy, cx in centres]
        self.prior = _t(np.stack(prior))

    def parse(self, image):
        x = resize_bilinear(_images(image), self.side)
        idx = list(self.part_indices)
        mix = torch.einsum("pc,...chw->...phw", self.channel_mix[idx], x)
        return BodyPartMaskSet(torch.sigmoid(mix + self.prior[idx]), self.part_indices)


class ToySegmenter(Segmenter):
    """3x3 fixed-weight convolution, spatial prior, per-pixel softmax."""

    def __init__(self, seed: int = 0, side: int = 16):
        self.side = side
        rng = _rng(seed, "segment")
        self.kernel = _t(rng.normal(0.0, 0.6, size=(3, 3, 3, 3)))
        yy, xx = np.mgrid[0:side, 0:side] / max(side - 1, 1)
        head = 2.5 - 30.0 * ((yy - 0.15) ** 2 + 0.5 * (xx - 0.5) ** 2)
        body = 1.5 - 6.0 * ((yy - 0.65) ** 2 + 2.0 * (xx - 0.5) ** 2)
        bg = np.zeros_like(xx)
        self.prior = _t(np.stack([bg, body, head]))

    def parse(self, image):
        x = resize_bilinear(_images(image), self.side)
        lead = x.shape[:-3]
        flat = x.reshape(-1, 3, self.side, self.side)
        logits = F.conv2d(F.pad(flat, (1, 1, 1, 1), mode="replicate"), self.kernel) + self.prior
        probs = torch.softmax(logits, dim=1).reshape(*lead, 3, self.side, self.side)
        return SegmentationTriple(probs[..., 0, :, :], probs[..., 1, :, :], probs[..., 2, :, :])


class ToyEncoder(Encoder):
    """Least-squares inverse of a :class:`ToyGenerator`.

    With ``vanilla=True`` the code is restricted to one row shared by all
    layers, and the returned code is that row broadcast.
    """

    def __init__(self, generator: ToyGenerator, vanilla: bool = False):
        self.generator = generator
        self.layer_count = generator.layer_count
        self.vanilla = vanilla
        a = generator.weight.numpy()
        if vanilla:
            d = generator.style_dim
            a = a.reshape(a.shape[0], generator.layer_count, d).sum(axis=1)
        self._pinv = _t(np.linalg.pinv(a))

    def invert(self, image):
        x = _images(image)
        g = self.generator
        if x.shape[-3:] != (3, g.output_side, g.output_side):
            raise ShapeError(f"encoder expects 3 x {g.output_side} x {g.output_side} images")
        flat = x.reshape(*x.shape[:-3], -1) - g.bias
        sol = flat @ self._pinv.T
        if self.vanilla:
            rows = sol[..., None, :].expand(*sol.shape[:-1], g.layer_count, g.style_dim).clone()
        else:
            rows = sol.reshape(*sol.shape[:-1], g.layer_count, g.style_dim)
        if rows.ndim == 2:
            return ExtendedLatentCode(rows)
        return rows


class ToyFaceEmbedder(FaceEmbedder):
    """Projection of the top quarter of the image, normalised.

    A region with zero variance counts as "no face found".
    """

    def __init__(self, seed: int = 0, side: int = 16, embed_dim: int = 8):
        self.side = side
        self.rows = max(side // 4, 1)
        rng = _rng(seed, "face")
        self.projection = rng.normal(0.0, 1.0, size=(embed_dim, 3 * self.rows * side))

    def embed(self, image):
        x = _images(image).detach()
        x = resize_bilinear(x, self.side).numpy()
        region = x[:, : self.rows, :]
        if float(region.std()) == 0.0:
            return None
        v = self.projection @ region.reshape(-1)
        norm = np.linalg.norm(v)
        if norm == 0.0:
            return None
        return v / norm


# ----------------------------------------------------------------------------
# External adapters


class ChecksumError(RuntimeError):
    """A checkpoint file does not match its recorded content hash."""


def model_cache_dir() -> Path:
    return Path(os.environ.get(MODEL_CACHE_ENV, Path.home() / ".cache" / "ganedit"))


def verify_checkpoint(path, expected_sha256: str) -> Path:
    """Check ``path`` against its expected SHA-256 hex digest and return it."""
    path = Path(path)
    if not path.is_absolute() and not path.exists():
        path = model_cache_dir() / path
    if not path.exists():
        raise FileNotFoundError(path)
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    actual = h.hexdigest()
    if actual.lower() != expected_sha256.lower():
        raise ChecksumError(f"{path}: sha256 {actual} does not match expected {expected_sha256}")
    return path


def load_factory(target: str) -> Callable:
    """Resolve a ``"package.module:attribute"`` string."""
    module, _, attr = target.partition(":")
    if not attr:
        raise ConfigurationError(f"factory must look like 'module:attribute', got {target!r}")
    obj = importlib.import_module(module)
    for part in attr.split("."):
        obj = getattr(obj, part)
    return obj


class _ImageInput:
    input_side: int
    input_range: tuple[float, float]

    def _prepare(self, image) -> torch.Tensor:
        return _remap(resize_bilinear(_images(image), self.input_side), self.input_range)


class ExternalSemanticModel(_ImageInput, SemanticModel):
    """Wraps image/text encoder callables (e.g. a CLIP model)."""

    def __init__(self, image_fn, text_fn, embed_dim, input_side=224, input_range=(-1.0, 1.0),
                 token_counter: Optional[Callable[[str], int]] = None):
        self.image_fn, self.text_fn = image_fn, text_fn
        self.embed_dim = embed_dim
        self.input_side, self.input_range = input_side, tuple(input_range)
        self._count = token_counter

    def count_tokens(self, text):
        return self._count(text) if self._count else super().count_tokens(text)

    def embed_image(self, image):
        v = self.image_fn(self._prepare(image))
        return v / v.norm(dim=-1, keepdim=True)

    def _embed_text(self, text):
        v = torch.as_tensor(self.text_fn(text), dtype=DTYPE).reshape(-1)
        return v / v.norm()


class ExternalPoseParser(_ImageInput, PoseParser):
    """Wraps a callable returning soft part masks ``(..., P, h, w)``."""

    def __init__(self, fn, part_indices: Sequence[int] = (), input_side=256, input_range=(-1.0, 1.0)):
        self.fn = fn
        self.part_indices = tuple(part_indices)
        self.input_side, self.input_range = input_side, tuple(input_range)

    def parse(self, image):
        masks = self.fn(self._prepare(image))
        indices = self.part_indices or tuple(range(masks.shape[-3]))
        return BodyPartMaskSet(masks[..., list(indices), :, :], indices)


class ExternalSegmenter(_ImageInput, Segmenter):
    """Wraps a callable returning ``(..., 3, h, w)`` logits ordered bg, body, head."""

    def __init__(self, fn, input_side=256, input_range=(-1.0, 1.0)):
        self.fn = fn
        self.input_side, self.input_range = input_side, tuple(input_range)

    def parse(self, image):
        probs = torch.softmax(self.fn(self._prepare(image)), dim=-3)
        return SegmentationTriple(probs[..., 0, :, :], probs[..., 1, :, :], probs[..., 2, :, :])


class ExternalFaceEmbedder(_ImageInput, FaceEmbedder):
    def __init__(self, fn, input_side=112, input_range=(-1.0, 1.0)):
        self.fn = fn
        self.input_side, self.input_range = input_side, tuple(input_range)

    def embed(self, image):
        with torch.no_grad():
            v = self.fn(self._prepare(image))
        if v is None:
            return None
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        return v / np.linalg.norm(v)


# ----------------------------------------------------------------------------


@dataclass
class ModelStack:
    generator: Generator
    semantic: SemanticModel
    pose: PoseParser
    segmenter: Segmenter
    encoder: Encoder
    vanilla_encoder: Optional[Encoder] = None
    face: Optional[FaceEmbedder] = None


def toy_stack(seed: int = 0, side: int = 16, layer_count: int = 6, style_dim: int = 16,
              embed_dim: int = 8, part_indices: Sequence[int] = ()) -> ModelStack:
    """The desk-scale reference stack used by tests and demos."""
    gen = ToyGenerator(seed, layer_count, style_dim, side)
    return ModelStack(
        generator=gen,
        semantic=ToySemanticModel(seed, embed_dim, side),
        pose=ToyPoseParser(seed, side, part_indices=part_indices),
        segmenter=ToySegmenter(seed, side),
        encoder=ToyEncoder(gen),
        vanilla_encoder=ToyEncoder(gen, vanilla=True),
        face=ToyFaceEmbedder(seed, side, embed_dim),
    )
