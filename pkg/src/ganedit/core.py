"""Shared value types, range conversions and configuration records.

Images flow between models as channels-first arrays in ``[-1, 1]``. Latent
codes are always stored as ``N_w x d_w`` matrices; a vanilla-space code is the
same row repeated ``N_w`` times.
"""

from __future__ import annotations

import dataclasses
import enum
import re
from dataclasses import dataclass

import numpy as np
import torch

__all__ = [
    "ShapeError",
    "RangeError",
    "ConfigurationError",
    "ValidationError",
    "ImageTensor",
    "ExtendedLatentCode",
    "TextPrompt",
    "LossWeights",
    "InversionConfig",
    "InitStrategy",
    "LatentSpace",
    "MAX_PROMPT_TOKENS",
    "tokenize",
    "to_canonical_range",
    "from_canonical_range",
    "validate_latent",
]

MAX_PROMPT_TOKENS = 76

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


class ShapeError(ValueError):
    """Array or code has the wrong shape."""


class RangeError(ValueError):
    """Values are non-finite or outside the permitted interval."""


class ConfigurationError(ValueError):
    """A configuration value makes the requested computation impossible."""


class ValidationError(ValueError):
    """User-supplied input failed validation."""


def _as_tensor(data) -> torch.Tensor:
    if isinstance(data, torch.Tensor):
        return data
    return torch.as_tensor(np.asarray(data, dtype=np.float64))


@dataclass(frozen=True)
class ImageTensor:
    """A ``3 x n x n`` image in the canonical ``[-1, 1]`` range."""

    data: torch.Tensor

    def __post_init__(self):
        data = _as_tensor(self.data)
        object.__setattr__(self, "data", data)
        if data.ndim != 3 or data.shape[0] != 3:
            raise ShapeError(f"expected image of shape 3 x n x n, got {tuple(data.shape)}")
        if data.shape[1] != data.shape[2]:
            raise ShapeError(f"image must be square, got {tuple(data.shape[1:])}")
        if not bool(torch.isfinite(data).all()):
            raise RangeError("image contains non-finite values")
        if data.numel() and (float(data.min()) < -1.0 or float(data.max()) > 1.0):
            raise RangeError("image values must lie in [-1, 1]")

    @property
    def side(self) -> int:
        return int(self.data.shape[-1])

    def numpy(self) -> np.ndarray:
        return self.data.detach().cpu().numpy()


@dataclass(frozen=True)
class ExtendedLatentCode:
    """Per-layer style codes, shape ``N_w x d_w``."""

    rows: torch.Tensor

    def __post_init__(self):
        rows = _as_tensor(self.rows)
        object.__setattr__(self, "rows", rows)
        if rows.ndim != 2:
            raise ShapeError(f"latent code must be 2-D (N_w x d_w), got {tuple(rows.shape)}")

    @classmethod
    def broadcast(cls, row, layer_count: int) -> "ExtendedLatentCode":
        """Repeat a single style row across ``layer_count`` layers (vanilla space)."""
        row = _as_tensor(row).reshape(1, -1)
        return cls(row.expand(layer_count, -1).clone())

    @property
    def layer_count(self) -> int:
        return int(self.rows.shape[0])

    @property
    def style_dim(self) -> int:
        return int(self.rows.shape[1])

    def is_vanilla(self) -> bool:
        return bool((self.rows == self.rows[:1]).all())

    def numpy(self) -> np.ndarray:
        return self.rows.detach().cpu().numpy()


def tokenize(text: str) -> list[str]:
    """Word/punctuation tokenizer used by the toy semantic model."""
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class TextPrompt:
    text: str
    token_count: int = -1

    def __post_init__(self):
        if self.token_count < 0:
            object.__setattr__(self, "token_count", len(tokenize(self.text)))

    def validate(self) -> "TextPrompt":
        if self.token_count > MAX_PROMPT_TOKENS:
            raise ValidationError(
                f"prompt has {self.token_count} tokens; the text encoder is limited to "
                f"{MAX_PROMPT_TOKENS} tokens"
            )
        return self


@dataclass(frozen=True)
class LossWeights:
    """Balancing weights of the composite objective."""

    lambda_clip: float = 1.0
    lambda_pose: float = 10.0
    lambda_reg: float = 1.0
    lambda_im: float = 30.0
    lambda_head: float = 1.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not np.isfinite(value) or value < 0:
                raise ValidationError(f"{f.name} must be a finite nonnegative number, got {value}")

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)

    def scaled(self, alpha: float) -> "LossWeights":
        return LossWeights(**{k: alpha * v for k, v in self.as_dict().items()})

    def replace(self, **changes) -> "LossWeights":
        return dataclasses.replace(self, **changes)


class InitStrategy(str, enum.Enum):
    ENCODER = "encoder"
    MEAN = "mean"
    INJECTION = "injection"


class LatentSpace(str, enum.Enum):
    VANILLA = "vanilla"
    EXTENDED = "extended"


@dataclass(frozen=True)
class InversionConfig:
    steps: int = 500
    learning_rate: float = 5e-2
    optimizer_betas: tuple[float, float] = (0.9, 0.999)
    optimizer_epsilon: float = 1e-8
    seed: int = 0
    init_strategy: InitStrategy = InitStrategy.ENCODER
    latent_space: LatentSpace = LatentSpace.EXTENDED
    batch_size: int = 20

    def __post_init__(self):
        object.__setattr__(self, "init_strategy", InitStrategy(self.init_strategy))
        object.__setattr__(self, "latent_space", LatentSpace(self.latent_space))
        object.__setattr__(self, "optimizer_betas", tuple(float(b) for b in self.optimizer_betas))
        if int(self.steps) < 1:
            raise ValidationError(f"steps must be >= 1, got {self.steps}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if len(self.optimizer_betas) != 2 or not all(0 <= b < 1 for b in self.optimizer_betas):
            raise ValidationError(f"optimizer_betas must be two values in [0, 1), got {self.optimizer_betas}")
        if not self.optimizer_epsilon > 0:
            raise ValidationError("optimizer_epsilon must be > 0")
        if int(self.batch_size) < 1:
            raise ValidationError("batch_size must be >= 1")

    @property
    def vanilla(self) -> bool:
        return self.latent_space is LatentSpace.VANILLA

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["init_strategy"] = self.init_strategy.value
        d["latent_space"] = self.latent_space.value
        d["optimizer_betas"] = list(self.optimizer_betas)
        return d

    def replace(self, **changes) -> "InversionConfig":
        return dataclasses.replace(self, **changes)


def to_canonical_range(data, source_range=(0.0, 255.0)) -> ImageTensor:
    """Affinely map a ``3 x n x n`` array from ``source_range`` onto ``[-1, 1]``."""
    lo, hi = (float(v) for v in source_range)
    if not hi > lo:
        raise ValidationError(f"source range must have positive width, got {source_range}")
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3 or arr.shape[1] != arr.shape[2]:
        raise ShapeError(f"expected array of shape 3 x n x n, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise RangeError("input contains non-finite values")
    span = hi - lo
    if arr.size and (arr.min() < lo - 1e-9 * span or arr.max() > hi + 1e-9 * span):
        raise RangeError(f"values fall outside the declared source range {source_range}")
    out = 2.0 * (arr - lo) / (hi - lo) - 1.0
    # Values produced from in-range input may overshoot by an ulp.
    return ImageTensor(torch.from_numpy(np.clip(out, -1.0, 1.0)))


def from_canonical_range(image, target_range=(0.0, 255.0)) -> np.ndarray:
    """Inverse of :func:`to_canonical_range`."""
    lo, hi = (float(v) for v in target_range)
    data = image.data if isinstance(image, ImageTensor) else image
    arr = data.detach().cpu().numpy() if isinstance(data, torch.Tensor) else np.asarray(data, dtype=np.float64)
    return (arr + 1.0) * 0.5 * (hi - lo) + lo


def validate_latent(code: ExtendedLatentCode, generator_layer_count: int) -> ExtendedLatentCode:
    if code.layer_count != generator_layer_count:
        raise ShapeError(
            f"latent code has {code.layer_count} layer codes, generator expects {generator_layer_count}"
        )
    if not bool(torch.isfinite(code.rows).all()):
        raise RangeError("latent code contains non-finite values")
    return code
