"""Tiny convolutional VAE providing the latent space.

Trained twice: once on RGB renders (the "image VAE"), then fine-tuned from an
exact copy of those weights on 3-channel replicated log-depth (the "depth
VAE"). Reconstruction is MSE (Gaussian decoder with fixed unit variance) plus
a small-weighted KL term; diffusion later runs on the posterior mean scaled
to unit global std.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from . import rng
from .errors import ConfigError, DimensionError

LOGVAR_CLAMP = (-30.0, 20.0)


@dataclass
class VaeConfig:
    in_channels: int = 3
    latent_channels: int = 4
    downsample_factor: int = 4
    base_width: int = 32
    kl_weight: float = 1e-6
    norm_groups: int = 8

    def __post_init__(self):
        f = self.downsample_factor
        if f < 1 or (f & (f - 1)):
            raise ConfigError(f"downsample_factor must be a power of two, got {f}")
        if self.base_width % self.norm_groups:
            raise ConfigError("base_width must be divisible by norm_groups")

    @property
    def n_levels(self) -> int:
        return self.downsample_factor.bit_length() - 1


@dataclass
class LatentDistribution:
    """Diagonal Gaussian over the latent: mean and log-variance tensors."""

    mean: ad.Tensor
    logvar: ad.Tensor


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else None

    def __call__(self, x: ad.Tensor) -> ad.Tensor:
        h = self.conv1(ad.silu(self.norm1(x)))
        h = self.conv2(ad.silu(self.norm2(h)))
        return ad.add(h, self.skip(x) if self.skip is not None else x)


class ConvVae(nn.Module):
    """Encoder/decoder pair; spatial downsampling by config.downsample_factor."""

    def __init__(self, config: VaeConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        g = config.norm_groups
        widths = [w * (2**i) for i in range(config.n_levels + 1)]

        self.enc_stem = nn.Conv2d(config.in_channels, widths[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList([ResBlock(c, c, g) for c in widths])
        self.enc_downs = nn.ModuleList(
            [nn.Downsample(widths[i], widths[i + 1]) for i in range(config.n_levels)]
        )
        self.enc_norm = nn.GroupNorm(g, widths[-1])
        self.enc_head = nn.Conv2d(widths[-1], 2 * config.latent_channels, 3, padding=1)

        self.dec_stem = nn.Conv2d(config.latent_channels, widths[-1], 3, padding=1)
        self.dec_blocks = nn.ModuleList([ResBlock(c, c, g) for c in reversed(widths)])
        self.dec_ups = nn.ModuleList(
            [nn.Conv2d(widths[i + 1], widths[i], 3, padding=1)
             for i in reversed(range(config.n_levels))]
        )
        self.dec_norm = nn.GroupNorm(g, widths[0])
        self.dec_head = nn.Conv2d(widths[0], config.in_channels, 3, padding=1)

    def encode(self, x: ad.Tensor) -> LatentDistribution:
        n, c, h, w = x.shape
        f = self.config.downsample_factor
        if c != self.config.in_channels:
            raise DimensionError(f"encode: expected {self.config.in_channels} channels, got {c}")
        if h % f or w % f:
            raise DimensionError(f"encode: spatial dims {h}x{w} not divisible by factor {f}")
        h_ = self.enc_blocks[0](self.enc_stem(x))
        for down, block in zip(self.enc_downs, self.enc_blocks[1:]):
            h_ = block(down(h_))
        h_ = self.enc_head(ad.silu(self.enc_norm(h_)))
        cz = self.config.latent_channels
        mean = ad.slice_channels(h_, 0, cz)
        logvar = ad.clamp(ad.slice_channels(h_, cz, 2 * cz), *LOGVAR_CLAMP)
        return LatentDistribution(mean, logvar)

    def decode(self, z: ad.Tensor) -> ad.Tensor:
        if z.shape[1] != self.config.latent_channels:
            raise DimensionError(
                f"decode: expected {self.config.latent_channels} latent channels, got {z.shape[1]}"
            )
        h_ = self.dec_blocks[0](self.dec_stem(z))
        for up, block in zip(self.dec_ups, self.dec_blocks[1:]):
            h_ = block(up(ad.upsample_nearest2x(h_)))
        return ad.tanh(self.dec_head(ad.silu(self.dec_norm(h_))))


def build_vae(config: VaeConfig, seed: int, dtype=np.float32) -> ConvVae:
    model = ConvVae(config)
    nn.initialize_parameters(model, "vae", seed, dtype)
    return model


def reparameterize(dist: LatentDistribution, noise: ad.Tensor) -> ad.Tensor:
    """z = mean + exp(logvar / 2) * noise."""
    if noise.shape != dist.mean.shape:
        raise DimensionError(f"noise shape {noise.shape} != mean shape {dist.mean.shape}")
    return ad.add(dist.mean, ad.mul(ad.exp(ad.affine(dist.logvar, 0.5)), noise))


def kl_divergence(dist: LatentDistribution) -> ad.Tensor:
    """KL(q || N(0, I)): 0.5 * sum(mean^2 + exp(logvar) - 1 - logvar), batch-mean."""
    mean, logvar = dist.mean, dist.logvar
    inner = ad.sub(ad.sub(ad.add(ad.mul(mean, mean), ad.exp(logvar)),
                          ad.Tensor(np.ones(1, dtype=mean.dtype))), logvar)
    n_batch = mean.shape[0]
    return ad.affine(ad.sum_all(inner), 0.5 / n_batch)


def vae_loss(x: ad.Tensor, xhat: ad.Tensor, dist: LatentDistribution,
             kl_weight: float) -> tuple[ad.Tensor, float, float]:
    """Reconstruction MSE + kl_weight * KL; returns (loss, mse, kl) scalars."""
    recon = ad.mse_loss(xhat, x)
    kl = kl_divergence(dist)
    loss = ad.add(recon, ad.affine(kl, kl_weight))
    return loss, recon.item(), kl.item()


def copy_weights(src: nn.Module, dst: nn.Module) -> None:
    """Exact weight copy, verified by hashing both payloads."""
    state = src.state_dict()
    dst.load_state_dict(state)
    if weights_hash(src) != weights_hash(dst):
        raise ConfigError("weight copy failed hash verification")


def weights_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def encode_mean(model: ConvVae, images: np.ndarray, batch: int = 32) -> np.ndarray:
    """Posterior means for a stack of images [N,3,H,W], computed tape-free."""
    outs = []
    for i in range(0, len(images), batch):
        x = ad.Tensor(images[i : i + batch])
        outs.append(model.encode(x).mean.data)
    return np.concatenate(outs, axis=0)


def decode_batch(model: ConvVae, latents: np.ndarray, batch: int = 32) -> np.ndarray:
    outs = []
    for i in range(0, len(latents), batch):
        outs.append(model.decode(ad.Tensor(latents[i : i + batch])).data)
    return np.concatenate(outs, axis=0)


def latent_scale(latent_means: np.ndarray) -> float:
    """Global std of latents over the training set; stored in the checkpoint
    so diffusion can operate at unit scale."""
    return float(np.std(latent_means.astype(np.float64)))


def train_vae(model: ConvVae, images: np.ndarray, steps: int, batch_size: int,
              lr: float, seed: int, sample_posterior: bool = True,
              log_every: int = 0, log_fn=print) -> list[tuple[int, float]]:
    """Plain Adam training on reconstruction + KL. Returns the loss log."""
    n = len(images)
    cfg = model.config
    history: list[tuple[int, float]] = []
    for step in range(steps):
        idx = rng.stream(seed, f"vae/batch/{step}").integers(0, n, size=batch_size)
        x = ad.Tensor(images[idx])
        with ad.Tape() as tape:
            dist = model.encode(x)
            if sample_posterior:
                noise = rng.stream(seed, f"vae/noise/{step}").standard_normal(
                    dist.mean.shape
                ).astype(x.dtype)
                z = reparameterize(dist, ad.Tensor(noise))
            else:
                z = dist.mean
            xhat = model.decode(z)
            loss, recon, kl = vae_loss(x, xhat, dist, cfg.kl_weight)
        ad.backward(loss, tape)
        nn.adam_step(model.parameters(), lr=lr)
        model.zero_grad()
        history.append((step, loss.item()))
        if log_every and (step + 1) % log_every == 0:
            recent = float(np.mean([l for _, l in history[-log_every:]]))
            log_fn(f"vae step {step + 1}/{steps} loss {recent:.6f} (mse {recon:.6f} kl {kl:.3f})")
    return history
