"""Declarative run configuration (YAML or JSON) and model-stack construction.

Documented keys::

    models:
      kind: toy                 # or "external"
      seed: 0                   # toy only
      side: 16
      layer_count: 6
      style_dim: 16
      embed_dim: 8
      part_indices: []          # empty = all parts
      # external only, one entry per role:
      # generator: {factory: "pkg.mod:make", checkpoint: g.pt, sha256: "...", options: {...}}
      # semantic / pose / segmenter / encoder / vanilla_encoder / face: same shape
    weights: {lambda_clip: 1, lambda_pose: 10, lambda_reg: 1, lambda_im: 30, lambda_head: 1}
    inversion: {steps: 500, learning_rate: 0.05, seed: 0, init_strategy: encoder,
                latent_space: extended, batch_size: 20}
    subsets: {coarse: [1, 2, 3, 4], medium: [5, 6, 7, 8], fine: [9, ..., 14]}
    stitch: {mask_mode: soft, hard_threshold: 0.5}
    metrics: {iou_threshold: 0.5}
    preprocess: {crop_h: 192, crop_w: 192}
    bank: path/to/bank.pbnk     # needed for init_strategy: injection
    workers: 1

External factories are called as ``factory(checkpoint_path, **options)``
after the checkpoint hash is verified, and must return an object
implementing the corresponding interface in :mod:`ganedit.models`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .core import ConfigurationError, InversionConfig, LossWeights
from .inversion import LayerSubsets, PrototypeBank
from .models import ModelStack, load_factory, toy_stack, verify_checkpoint
from .stitching import StitchPolicy

__all__ = ["RunConfig", "load_config", "build_models"]

_ROLES = ("generator", "semantic", "pose", "segmenter", "encoder", "vanilla_encoder", "face")


@dataclass
class RunConfig:
    models: dict = field(default_factory=lambda: {"kind": "toy"})
    weights: LossWeights = field(default_factory=LossWeights)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    subsets: Optional[LayerSubsets] = None
    stitch: StitchPolicy = field(default_factory=StitchPolicy)
    iou_threshold: float = 0.5
    crop: tuple[int, int] = (192, 192)
    bank: Optional[str] = None
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d or {})
        unknown = set(d) - {"models", "weights", "inversion", "subsets", "stitch", "metrics",
                            "preprocess", "bank", "workers"}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        subsets = d.get("subsets")
        pre = d.get("preprocess", {})
        return cls(
            models=d.get("models", {"kind": "toy"}),
            weights=LossWeights(**d.get("weights", {})),
            inversion=InversionConfig(**d.get("inversion", {})),
            subsets=LayerSubsets(**{k: tuple(v) for k, v in subsets.items()}) if subsets else None,
            stitch=StitchPolicy(**d.get("stitch", {})),
            iou_threshold=float(d.get("metrics", {}).get("iou_threshold", 0.5)),
            crop=(int(pre.get("crop_h", 192)), int(pre.get("crop_w", 192))),
            bank=d.get("bank"),
            workers=int(d.get("workers", 1)),
        )

    def override(self, **changes: Any) -> "RunConfig":
        """Apply CLI overrides given as ``section.key`` or plain keys; ``None`` is ignored."""
        import dataclasses

        cfg = dataclasses.replace(self)
        inv, wts = {}, {}
        for key, value in changes.items():
            if value is None:
                continue
            if key in InversionConfig.__dataclass_fields__:
                inv[key] = value
            elif key in LossWeights.__dataclass_fields__:
                wts[key] = value
            elif key in ("bank", "workers", "iou_threshold"):
                setattr(cfg, key, value)
            elif key == "mask_mode":
                cfg.stitch = StitchPolicy(value, cfg.stitch.hard_threshold)
            else:
                raise ConfigurationError(f"unknown override {key!r}")
        if inv:
            cfg.inversion = cfg.inversion.replace(**inv)
        if wts:
            cfg.weights = cfg.weights.replace(**wts)
        return cfg

    def load_bank(self, models: ModelStack) -> Optional[PrototypeBank]:
        return PrototypeBank.load(self.bank, models) if self.bank else None


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text()
    data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    return RunConfig.from_dict(data or {})


def build_models(spec: dict) -> ModelStack:
    spec = dict(spec or {})
    kind = spec.pop("kind", "toy")
    if kind == "toy":
        allowed = {"seed", "side", "layer_count", "style_dim", "embed_dim", "part_indices"}
        extra = set(spec) - allowed
        if extra:
            raise ConfigurationError(f"unknown toy model options: {sorted(extra)}")
        return toy_stack(**spec)
    if kind != "external":
        raise ConfigurationError(f"models.kind must be 'toy' or 'external', got {kind!r}")
    handles = {}
    for role in _ROLES:
        entry = spec.get(role)
        if entry is None:
            if role in ("vanilla_encoder", "face"):
                handles[role] = None
                continue
            raise ConfigurationError(f"external model stack is missing {role!r}")
        factory = load_factory(entry["factory"])
        ckpt = entry.get("checkpoint")
        if ckpt is not None:
            if "sha256" not in entry:
                raise ConfigurationError(f"{role}: checkpoint given without sha256")
            ckpt = verify_checkpoint(ckpt, entry["sha256"])
        handles[role] = factory(ckpt, **entry.get("options", {}))
    return ModelStack(**handles)
