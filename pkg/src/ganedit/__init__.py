"""Text-guided image editing by constrained GAN inversion."""

from .core import (
    ConfigurationError,
    ExtendedLatentCode,
    ImageTensor,
    InitStrategy,
    InversionConfig,
    LatentSpace,
    LossWeights,
    RangeError,
    ShapeError,
    TextPrompt,
    ValidationError,
    to_canonical_range,
    validate_latent,
)
from .inversion import (
    InversionResult,
    LayerSubsets,
    PrototypeBank,
    build_prototype_bank,
    inject_medium_subset,
    run_inversion,
    run_inversion_batch,
    select_prototype,
)
from .losses import LossBreakdown, Objective, total_objective
from .models import ModelStack, toy_stack
from .stitching import StitchPolicy, stitch

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "ExtendedLatentCode", "ImageTensor", "InitStrategy", "InversionConfig",
    "LatentSpace", "LossWeights", "RangeError", "ShapeError", "TextPrompt", "ValidationError",
    "to_canonical_range", "validate_latent",
    "InversionResult", "LayerSubsets", "PrototypeBank", "build_prototype_bank", "inject_medium_subset",
    "run_inversion", "run_inversion_batch", "select_prototype",
    "LossBreakdown", "Objective", "total_objective",
    "ModelStack", "toy_stack",
    "StitchPolicy", "stitch",
]
