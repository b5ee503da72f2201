"""Latent initialisation, prototype banks and the fixed-step inversion loop."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import torch

from .core import (
    ConfigurationError,
    ExtendedLatentCode,
    ImageTensor,
    InitStrategy,
    InversionConfig,
    LossWeights,
    ShapeError,
    TextPrompt,
    ValidationError,
    validate_latent,
)
from .losses import TERMS, LossBreakdown, Objective
from .models import ModelStack

__all__ = [
    "PrototypeBank",
    "LayerSubsets",
    "InversionResult",
    "InversionDivergedError",
    "init_from_encoder",
    "init_from_mean",
    "build_prototype_bank",
    "select_prototype",
    "inject_medium_subset",
    "initial_codes",
    "run_inversion",
    "run_inversion_batch",
    "BANK_MAGIC",
]

BANK_MAGIC = b"PBNK1"
_HEADER = struct.Struct("<5sqqqqqd")


class InversionDivergedError(RuntimeError):
    """The objective became non-finite during optimisation."""

    def __init__(self, step: int, breakdown: LossBreakdown):
        super().__init__(f"non-finite loss at step {step}: {breakdown.as_dict()}")
        self.step = step
        self.breakdown = breakdown


# ----------------------------------------------------------------------------
# Layer subsets


@dataclass(frozen=True)
class LayerSubsets:
    """Coarse/medium/fine partition of layer indices (1-based, as in configs)."""

    coarse: tuple[int, ...]
    medium: tuple[int, ...]
    fine: tuple[int, ...]

    def __post_init__(self):
        allidx = self.coarse + self.medium + self.fine
        if len(set(allidx)) != len(allidx):
            raise ConfigurationError("layer subsets overlap")
        if sorted(allidx) != list(range(1, len(allidx) + 1)):
            raise ConfigurationError(f"layer subsets must cover 1..{len(allidx)} exactly")

    @property
    def layer_count(self) -> int:
        return len(self.coarse) + len(self.medium) + len(self.fine)

    @classmethod
    def for_layers(cls, layer_count: int) -> "LayerSubsets":
        """Coarse 1-4, medium 5-8, fine 9-L; shrunk proportionally when L < 9."""
        if layer_count >= 9:
            return cls(tuple(range(1, 5)), tuple(range(5, 9)), tuple(range(9, layer_count + 1)))
        if layer_count < 3:
            raise ConfigurationError("need at least three layers for a coarse/medium/fine split")
        c = max(1, round(layer_count * 4 / 14))
        m = max(1, round(layer_count * 8 / 14)) - c
        m = max(1, min(m, layer_count - c - 1))
        return cls(tuple(range(1, c + 1)), tuple(range(c + 1, c + m + 1)),
                   tuple(range(c + m + 1, layer_count + 1)))

    def medium_rows(self) -> list[int]:
        return [i - 1 for i in self.medium]


def inject_medium_subset(base: ExtendedLatentCode, prototype: ExtendedLatentCode,
                         subsets: LayerSubsets) -> ExtendedLatentCode:
    """Copy the medium-subset rows of ``prototype`` into ``base``."""
    if base.rows.shape != prototype.rows.shape:
        raise ShapeError(f"code shapes differ: {tuple(base.rows.shape)} vs {tuple(prototype.rows.shape)}")
    if subsets.layer_count != base.layer_count:
        raise ShapeError(f"subsets cover {subsets.layer_count} layers, code has {base.layer_count}")
    rows = base.rows.clone()
    idx = subsets.medium_rows()
    rows[idx] = prototype.rows[idx]
    return ExtendedLatentCode(rows)


# ----------------------------------------------------------------------------
# Prototype bank


@dataclass
class PrototypeBank:
    codes: np.ndarray        # (N, N_w, d_w) float32
    embeddings: np.ndarray   # (N, d_clip) float32, unit rows
    seed: int = 0
    truncation: float = 1.0

    def __post_init__(self):
        self.codes = np.ascontiguousarray(self.codes, dtype=np.float32)
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        if self.codes.ndim != 3 or self.embeddings.ndim != 2 or len(self.codes) != len(self.embeddings):
            raise ShapeError("bank needs codes (N, N_w, d_w) and embeddings (N, d_clip)")

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def layer_count(self) -> int:
        return self.codes.shape[1]

    @property
    def style_dim(self) -> int:
        return self.codes.shape[2]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def code(self, index: int) -> ExtendedLatentCode:
        return ExtendedLatentCode(torch.from_numpy(self.codes[index].astype(np.float64)))

    def save(self, path) -> None:
        n, nw, dw = self.codes.shape
        header = _HEADER.pack(BANK_MAGIC, n, nw, dw, self.embed_dim, int(self.seed), float(self.truncation))
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(self.codes.astype("<f4").tobytes())
            fh.write(self.embeddings.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, models: Optional[ModelStack] = None) -> "PrototypeBank":
        """Read a bank file; with ``models`` the header is checked against them."""
        raw = Path(path).read_bytes()
        if len(raw) < _HEADER.size:
            raise ValidationError(f"{path}: truncated bank header")
        magic, n, nw, dw, dc, seed, trunc = _HEADER.unpack_from(raw)
        if magic != BANK_MAGIC:
            raise ValidationError(f"{path}: not a prototype bank (magic {magic!r})")
        off = _HEADER.size
        expected = off + 4 * n * (nw * dw + dc)
        if len(raw) != expected:
            raise ValidationError(f"{path}: size {len(raw)} does not match header ({expected})")
        codes = np.frombuffer(raw, "<f4", n * nw * dw, off).reshape(n, nw, dw)
        emb = np.frombuffer(raw, "<f4", n * dc, off + 4 * n * nw * dw).reshape(n, dc)
        if models is not None:
            g = models.generator
            if (nw, dw) != (g.layer_count, g.style_dim) or dc != models.semantic.embed_dim:
                raise ShapeError(
                    f"bank ({nw} x {dw}, d_clip={dc}) does not match the attached models "
                    f"({g.layer_count} x {g.style_dim}, d_clip={models.semantic.embed_dim})"
                )
        return cls(codes.astype(np.float32), emb.astype(np.float32), seed, trunc)


def build_prototype_bank(models: ModelStack, count: int = 100_000, seed: int = 0,
                         truncation: float = 1.0, chunk: int = 1024) -> PrototypeBank:
    """Sample ``count`` codes, synthesise each and store (code, image embedding) pairs."""
    if count <= 0:
        raise ConfigurationError(f"bank size must be positive, got {count}")
    codes = models.generator.sample_codes(count, seed, truncation)
    embs = []
    with torch.no_grad():
        for start in range(0, count, chunk):
            part = codes[start:start + chunk]
            embs.append(models.semantic.embed_image(models.generator.synthesize(part)))
    emb = torch.cat(embs).numpy().astype(np.float32)
    # renormalise after the float32 cast
    emb /= np.linalg.norm(emb, axis=1, keepdims=True)
    return PrototypeBank(codes.numpy(), emb, seed, truncation)


def select_prototype(bank: PrototypeBank, text_embedding) -> tuple[int, ExtendedLatentCode]:
    """Index of the bank entry with the highest cosine similarity (lowest index on ties)."""
    if len(bank) == 0:
        raise ValidationError("empty prototype bank")
    t = np.asarray(text_embedding.detach() if isinstance(text_embedding, torch.Tensor) else text_embedding,
                   dtype=np.float64).reshape(-1)
    e = bank.embeddings.astype(np.float64)
    sims = (e @ t) / (np.linalg.norm(e, axis=1) * np.linalg.norm(t))
    i = int(np.argmax(sims))
    return i, bank.code(i)


# ----------------------------------------------------------------------------
# Initialisation


def init_from_encoder(image, models: ModelStack, vanilla: bool = False) -> ExtendedLatentCode:
    enc = models.encoder
    if vanilla:
        if models.vanilla_encoder is None:
            raise ConfigurationError("vanilla latent space needs a vanilla-space encoder")
        enc = models.vanilla_encoder
    with torch.no_grad():
        code = enc.invert(image)
    if not isinstance(code, ExtendedLatentCode):
        code = ExtendedLatentCode(code)
    return validate_latent(code, models.generator.layer_count)


def init_from_mean(models: ModelStack) -> ExtendedLatentCode:
    return models.generator.mean_code


def initial_codes(images: torch.Tensor, text_embedding: torch.Tensor, config: InversionConfig,
                  models: ModelStack, bank: Optional[PrototypeBank] = None,
                  subsets: Optional[LayerSubsets] = None) -> torch.Tensor:
    """Starting codes ``(B, N_w, d_w)`` for a batch of images."""
    strategy = config.init_strategy
    if strategy is InitStrategy.MEAN:
        mean = init_from_mean(models).rows
        return mean.expand(images.shape[0], *mean.shape).clone()
    codes = [init_from_encoder(img, models, config.vanilla).rows for img in images]
    if strategy is InitStrategy.INJECTION:
        if config.vanilla:
            raise ConfigurationError("prototype injection produces per-layer codes; use extended space")
        if bank is None:
            raise ConfigurationError("injection initialisation needs a prototype bank")
        subsets = subsets or LayerSubsets.for_layers(models.generator.layer_count)
        _, proto = select_prototype(bank, text_embedding)
        codes = [inject_medium_subset(ExtendedLatentCode(c), proto, subsets).rows for c in codes]
    return torch.stack(codes)


# ----------------------------------------------------------------------------
# Optimisation


@dataclass
class InversionResult:
    optimized_code: ExtendedLatentCode
    final_image: torch.Tensor
    trajectory: list[LossBreakdown]
    init_code: ExtendedLatentCode
    config_echo: InversionConfig
    prototype_index: Optional[int] = None
    extras: dict = field(default_factory=dict)


def _as_batch(images) -> torch.Tensor:
    if isinstance(images, ImageTensor):
        return images.data[None]
    if isinstance(images, torch.Tensor):
        return images if images.ndim == 4 else images[None]
    return torch.stack([im.data if isinstance(im, ImageTensor) else torch.as_tensor(im) for im in images])


def run_inversion_batch(images, prompt: TextPrompt | str, weights: LossWeights, config: InversionConfig,
                        models: ModelStack, bank: Optional[PrototypeBank] = None,
                        subsets: Optional[LayerSubsets] = None,
                        terms: Iterable[str] = TERMS) -> list[InversionResult]:
    """Invert a batch of images that share one prompt and step schedule.

    The batch objective is the sum of the per-image objectives. Adam updates
    each coordinate independently, so every image follows the same path it
    would follow alone.
    """
    batch = _as_batch(images).to(torch.float64)
    text_emb = models.semantic.embed_text(prompt)
    init = initial_codes(batch, text_emb, config, models, bank, subsets)
    proto_index = None
    if config.init_strategy is InitStrategy.INJECTION:
        proto_index, _ = select_prototype(bank, text_emb)

    objectives = [Objective(img, text_emb, weights, models, terms, config.vanilla) for img in batch]
    n_layers = models.generator.layer_count
    if config.vanilla:
        free = init[:, :1, :].clone().requires_grad_(True)
    else:
        free = init.clone().requires_grad_(True)

    opt = torch.optim.Adam([free], lr=config.learning_rate, betas=config.optimizer_betas,
                           eps=config.optimizer_epsilon)
    trajectories: list[list[LossBreakdown]] = [[] for _ in range(len(batch))]

    def rows_of(p):
        return p.expand(-1, n_layers, -1) if config.vanilla else p

    for step in range(config.steps):
        opt.zero_grad(set_to_none=True)
        rows = rows_of(free)
        loss = 0.0
        for i, obj in enumerate(objectives):
            total, values = obj.terms(rows[i])
            bd = Objective.breakdowns(total, values)[0]
            if not np.isfinite(bd.total):
                raise InversionDivergedError(step, bd)
            trajectories[i].append(bd)
            loss = loss + total
        loss.backward()
        opt.step()

    with torch.no_grad():
        final_rows = rows_of(free).detach().clone()

    results = []
    for i in range(len(batch)):
        results.append(InversionResult(
            optimized_code=ExtendedLatentCode(final_rows[i]),
            final_image=models.generator.synthesize(final_rows[i]),
            trajectory=trajectories[i],
            init_code=ExtendedLatentCode(init[i]),
            config_echo=config,
            prototype_index=proto_index,
        ))
    return results


def run_inversion(image, prompt: TextPrompt | str, weights: LossWeights, config: InversionConfig,
                  models: ModelStack, bank: Optional[PrototypeBank] = None,
                  subsets: Optional[LayerSubsets] = None,
                  terms: Iterable[str] = TERMS) -> InversionResult:
    """Optimise the latent code of a single image for ``config.steps`` Adam steps."""
    data = image.data if isinstance(image, ImageTensor) else torch.as_tensor(image)
    if data.ndim != 3:
        raise ShapeError(f"expected a single 3 x n x n image, got {tuple(data.shape)}")
    return run_inversion_batch(data[None], prompt, weights, config, models, bank, subsets, terms)[0]
