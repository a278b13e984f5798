"""Conditional denoising U-Net over concatenated depth+image latents.

Three-level encoder/decoder with skip connections, two residual blocks per
level, group norm + SiLU, and a sinusoidal timestep embedding added to every
residual block through a learned projection. There is no text pathway of any
kind. The final conv is zero-initialized so an untrained net predicts zero.

``adapt_input_layer`` implements the input-channel-doubling rule used when a
conditional net is initialized from an unconditional checkpoint: duplicate
the first conv's weights along the input-channel axis and halve them, which
preserves the layer's output whenever both latent halves agree.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ConfigError, DimensionError, UsageError


@dataclass
class UNetConfig:
    latent_channels: int = 4
    cond_channels: int = 4
    base_width: int = 64
    depth_levels: int = 3
    time_embed_dim: int = 128
    objective: str = "v"  # "epsilon" | "v"
    norm_groups: int = 8

    def __post_init__(self):
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        if self.objective not in ("epsilon", "v"):
            raise ConfigError(f"objective must be 'epsilon' or 'v', got '{self.objective}'")
        if self.base_width % self.norm_groups:
            raise ConfigError("base_width must be divisible by norm_groups")

    @property
    def in_channels(self) -> int:
        return self.latent_channels + self.cond_channels

    @property
    def time_hidden(self) -> int:
        return 2 * self.time_embed_dim


def sinusoidal_embed(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Geometric-frequency sin/cos features of integer timesteps.

    Returns [dim] for a scalar t or [len(t), dim] for a batch; first half is
    sin, second half cos, so t=0 maps to zeros then ones.
    """
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    ts = np.atleast_1d(np.asarray(t, dtype=np.float64))
    if (ts < 0).any():
        raise UsageError("timesteps must be non-negative")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = ts[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    return emb[0] if np.isscalar(t) or np.ndim(t) == 0 else emb


class TimedResBlock(nn.Module):
    """Residual block with the timestep embedding added after the first conv."""

    def __init__(self, in_ch: int, out_ch: int, temb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb_proj = nn.Linear(temb_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def __call__(self, x: ad.Tensor, temb: ad.Tensor) -> ad.Tensor:
        h = self.conv1(ad.silu(self.norm1(x)))
        bias = self.temb_proj(ad.silu(temb))
        h = ad.add(h, ad.reshape(bias, bias.shape + (1, 1)))
        h = self.conv2(ad.silu(self.norm2(h)))
        return ad.add(h, self.skip(x) if self.skip is not None else x)


class CondUNet(nn.Module):
    def __init__(self, config: UNetConfig, in_channels: int | None = None):
        super().__init__()
        self.config = config
        self.in_channels = config.in_channels if in_channels is None else in_channels
        w, g, td = config.base_width, config.norm_groups, config.time_hidden
        widths = [w * (2**i) for i in range(config.depth_levels)]
        self.widths = widths

        self.time_mlp1 = nn.Linear(config.time_embed_dim, td)
        self.time_mlp2 = nn.Linear(td, td)

        self.stem = nn.Conv2d(self.in_channels, widths[0], 3, padding=1)
        enc, downs = [], []
        for i, c in enumerate(widths):
            enc.append(ModulePair(TimedResBlock(c, c, td, g), TimedResBlock(c, c, td, g)))
            if i + 1 < len(widths):
                downs.append(nn.Downsample(c, widths[i + 1]))
        self.enc = nn.ModuleList(enc)
        self.downs = nn.ModuleList(downs)

        self.mid1 = TimedResBlock(widths[-1], widths[-1], td, g)
        self.mid2 = TimedResBlock(widths[-1], widths[-1], td, g)

        ups, dec = [], []
        for i in reversed(range(len(widths) - 1)):
            ups.append(nn.Conv2d(widths[i + 1], widths[i], 3, padding=1))
            dec.append(ModulePair(
                TimedResBlock(2 * widths[i], widths[i], td, g),
                TimedResBlock(widths[i], widths[i], td, g),
            ))
        self.ups = nn.ModuleList(ups)
        self.dec = nn.ModuleList(dec)

        self.out_norm = nn.GroupNorm(g, widths[0])
        self.out_conv = nn.Conv2d(widths[0], config.latent_channels, 3, padding=1, init="zeros")

    def __call__(self, z: ad.Tensor, t) -> ad.Tensor:
        if z.shape[1] != self.in_channels:
            raise DimensionError(
                f"unet expects {self.in_channels} input channels, got {z.shape[1]}"
            )
        ts = np.broadcast_to(np.asarray(t), (z.shape[0],))
        temb = ad.Tensor(sinusoidal_embed(ts, self.config.time_embed_dim).astype(z.dtype))
        temb = self.time_mlp2(ad.silu(self.time_mlp1(temb)))

        h = self.stem(z)
        skips = []
        for i, pair in enumerate(self.enc):
            h = pair.second(pair.first(h, temb), temb)
            if i < len(self.downs):
                skips.append(h)
                h = self.downs[i](h)
        h = self.mid2(self.mid1(h, temb), temb)
        for up, pair, skip in zip(self.ups, self.dec, reversed(skips)):
            h = up(ad.upsample_nearest2x(h))
            h = pair.first(ad.concat_channels(h, skip), temb)
            h = pair.second(h, temb)
        return self.out_conv(ad.silu(self.out_norm(h)))


class ModulePair(nn.Module):
    def __init__(self, first: nn.Module, second: nn.Module):
        super().__init__()
        self.first = first
        self.second = second


def build_unet(config: UNetConfig, seed: int, dtype=np.float32,
               in_channels: int | None = None) -> CondUNet:
    model = CondUNet(config, in_channels=in_channels)
    nn.initialize_parameters(model, "unet", seed, dtype)
    return model


def adapt_input_layer(weight: np.ndarray) -> np.ndarray:
    """Duplicate a conv weight along the input-channel axis and halve it.

    [Cout, C, kh, kw] -> [Cout, 2C, kh, kw]; with identical latent halves the
    adapted layer reproduces the original output exactly: (W/2)(z+z) = Wz.
    """
    w = np.asarray(weight)
    if w.ndim != 4:
        raise DimensionError(f"expected a conv weight [Cout,C,kh,kw], got shape {w.shape}")
    half = w / 2.0
    return np.concatenate([half, half], axis=1)


def conditional_from_unconditional(uncond: CondUNet, config: UNetConfig) -> CondUNet:
    """Build a conditional net from an unconditional checkpoint by adapting
    its first layer; every other parameter is copied unchanged."""
    if uncond.in_channels != config.latent_channels:
        raise ConfigError(
            f"unconditional net has {uncond.in_channels} input channels, "
            f"expected {config.latent_channels}"
        )
    cond = CondUNet(config)
    nn.initialize_parameters(cond, "unet", seed=0, dtype=uncond.stem.weight.data.dtype)
    state = uncond.state_dict()
    state["stem.weight"] = adapt_input_layer(state["stem.weight"])
    cond.load_state_dict(state)
    return cond
