"""Ensembled inference: N independent DDIM samplings aggregated per pixel.

Aggregation happens in metric space (after decoding to meters) with a
per-pixel median by default; the spread between members (interquartile
range, in meters) is reported as uncertainty.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import diffusion
from .depth_codec import (
    DepthMap,
    DepthRange,
    EncodingKind,
    NormalizedDepth,
    average_channels,
    log_decode,
)
from .errors import ConfigError, DimensionError, UsageError
from .unet import CondUNet
from .vae import ConvVae


@dataclass
class DepthPipeline:
    """Frozen trained components plus the latent scales they were trained at."""

    image_vae: ConvVae
    depth_vae: ConvVae
    unet: CondUNet
    image_scale: float
    depth_scale: float
    depth_range: DepthRange
    diffusion: diffusion.DiffusionConfig

    def __post_init__(self):
        if self.image_scale <= 0 or self.depth_scale <= 0:
            raise ConfigError("latent scales must be positive")
        self._schedule = self.diffusion.schedule()

    @property
    def schedule(self) -> diffusion.NoiseSchedule:
        return self._schedule


@dataclass
class EnsembleResult:
    depth: DepthMap
    uncertainty: np.ndarray  # per-pixel inter-member spread, meters
    members: Optional[list[DepthMap]] = None


def infer_once(image: np.ndarray, pipeline: DepthPipeline, seed: int) -> DepthMap:
    """Single metric-depth prediction for an RGB image in [0, 1], [3, H, W]."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"expected RGB image [3,H,W], got {image.shape}")
    f = pipeline.image_vae.config.downsample_factor
    if image.shape[1] % f or image.shape[2] % f:
        raise DimensionError(f"image dims {image.shape[1:]} not divisible by factor {f}")

    x = ad.Tensor((image.astype(np.float32) * 2.0 - 1.0)[None])
    cond = pipeline.image_vae.encode(x).mean.data / np.float32(pipeline.image_scale)
    z = diffusion.ddim_sample(cond, pipeline.unet, pipeline.schedule, pipeline.diffusion, seed)
    z = z * np.float32(pipeline.depth_scale)
    decoded = pipeline.depth_vae.decode(ad.Tensor(z)).data[0]
    normalized = np.clip(average_channels(decoded), -1.0, 1.0)
    n = NormalizedDepth(normalized, EncodingKind.LOG, pipeline.depth_range)
    return log_decode(n)


def infer_ensemble(image: np.ndarray, pipeline: DepthPipeline, base_seed: int,
                   n: int = 10, aggregate: str = "median",
                   keep_members: bool = False) -> EnsembleResult:
    """Aggregate n samplings seeded base_seed .. base_seed + n - 1."""
    if n < 1:
        raise UsageError(f"ensemble size must be >= 1, got {n}")
    if aggregate not in ("median", "mean"):
        raise ConfigError(f"aggregate must be 'median' or 'mean', got '{aggregate}'")
    members = [infer_once(image, pipeline, base_seed + i) for i in range(n)]
    stack = np.stack([m.values for m in members]).astype(np.float64)
    if aggregate == "median":
        depth = np.median(stack, axis=0)
    else:
        depth = stack.mean(axis=0)
    q25, q75 = np.percentile(stack, [25.0, 75.0], axis=0)
    mask = members[0].valid_mask.copy()
    return EnsembleResult(
        depth=DepthMap(depth.astype(np.float32), mask),
        uncertainty=(q75 - q25).astype(np.float32),
        members=members if keep_members else None,
    )
