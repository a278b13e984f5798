"""Noise schedule, forward process, training objectives, and DDIM sampling.

Timestep convention: integer levels t in [0, T) index the schedule arrays,
and the sampler's terminal step "to 0" uses alpha_bar = 1 (the clean sample),
so a full DDIM pass ends on the denoised estimate itself.

Both the epsilon- and v-prediction objectives are supported; v is the
default. All stochastic draws go through labeled streams keyed by the global
step, which makes training resumable bit-exactly and ensemble members
independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from . import nn
from . import rng
from .errors import ConfigError, UsageError


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule; alpha_bar is the running product of (1 - beta)."""
    if T < 1:
        raise ConfigError(f"schedule length must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


@dataclass
class DiffusionConfig:
    train_T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    objective: str = "v"  # "epsilon" | "v"
    ddim_steps: int = 50
    ensemble_size: int = 10
    latent_clip: float = 3.0  # |x0_hat| bound during sampling; <= 0 disables

    def __post_init__(self):
        if self.objective not in ("epsilon", "v"):
            raise ConfigError(f"objective must be 'epsilon' or 'v', got '{self.objective}'")
        if not (1 <= self.ddim_steps <= self.train_T):
            raise ConfigError("need 1 <= ddim_steps <= train_T")
        if self.ensemble_size < 1:
            raise ConfigError("ensemble_size must be >= 1")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.train_T, self.beta_start, self.beta_end)


def _gather(schedule_values: np.ndarray, t, like: np.ndarray) -> np.ndarray:
    """Schedule value(s) at t, shaped [N,1,1,1] for broadcasting, in like's dtype."""
    vals = schedule_values[np.asarray(t)]
    return np.asarray(vals, dtype=like.dtype).reshape((-1,) + (1,) * (like.ndim - 1))


def _check_t(t, T: int) -> None:
    ts = np.asarray(t)
    if (ts < 0).any() or (ts >= T).any():
        raise UsageError(f"timestep {ts} outside [0, {T})")


def forward_noise(d0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal: d_t = sqrt(ab_t) d0 + sqrt(1 - ab_t) eps."""
    _check_t(t, schedule.T)
    if eps.shape != d0.shape:
        raise UsageError(f"noise shape {eps.shape} != sample shape {d0.shape}")
    ab = _gather(schedule.alpha_bar, t, d0)
    return np.sqrt(ab) * d0 + np.sqrt(1.0 - ab) * eps


def v_target(d0: np.ndarray, eps: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    """v = sqrt(ab_t) eps - sqrt(1 - ab_t) d0."""
    ab = _gather(schedule.alpha_bar, t, d0)
    return np.sqrt(ab) * eps - np.sqrt(1.0 - ab) * d0


def d0_from_v(d_t: np.ndarray, v: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    """Invert the v parameterization: d0 = sqrt(ab_t) d_t - sqrt(1 - ab_t) v."""
    ab = _gather(schedule.alpha_bar, t, d_t)
    return np.sqrt(ab) * d_t - np.sqrt(1.0 - ab) * v


def eps_from_v(d_t: np.ndarray, v: np.ndarray, t, schedule: NoiseSchedule) -> np.ndarray:
    ab = _gather(schedule.alpha_bar, t, d_t)
    return np.sqrt(1.0 - ab) * d_t + np.sqrt(ab) * v


def objective_target(objective: str, d0: np.ndarray, eps: np.ndarray, t,
                     schedule: NoiseSchedule) -> np.ndarray:
    if objective == "epsilon":
        return eps
    return v_target(d0, eps, t, schedule)


def training_loss(model, depth_latent: np.ndarray, cond_latent: np.ndarray, t,
                  eps: np.ndarray, schedule: NoiseSchedule, objective: str) -> ad.Tensor:
    """MSE between the model output and the objective target on the noised,
    concatenated input."""
    d_t = forward_noise(depth_latent, t, eps, schedule)
    target = objective_target(objective, depth_latent, eps, t, schedule)
    z = ad.concat_channels(ad.Tensor(d_t), ad.Tensor(cond_latent))
    out = model(z, t)
    return ad.mse_loss(out, ad.Tensor(target.astype(out.dtype)))


# ---------------------------------------------------------------------------
# DDIM


def ddim_timesteps(T: int, steps: int) -> list[int]:
    """Strictly decreasing integer grid from T-1 down to 0 (the clean target),
    uniformly spaced, deduplicated after rounding."""
    grid = np.unique(np.round(np.linspace(0, T - 1, steps + 1)).astype(int))
    return [int(v) for v in grid[::-1]]


def ddim_step(d_t: np.ndarray, model_out: np.ndarray, t: int, t_prev: int,
              schedule: NoiseSchedule, objective: str, latent_clip: float = 0.0) -> np.ndarray:
    """One deterministic DDIM update from level t to t_prev (eta = 0)."""
    if not (t > t_prev >= 0):
        raise UsageError(f"ddim_step needs t > t_prev >= 0, got t={t}, t_prev={t_prev}")
    _check_t(t, schedule.T)
    ab_t = float(schedule.alpha_bar[t])
    ab_p = 1.0 if t_prev == 0 else float(schedule.alpha_bar[t_prev])

    if objective == "epsilon":
        x0 = (d_t - np.sqrt(1.0 - ab_t) * model_out) / np.sqrt(ab_t)
    elif objective == "v":
        x0 = np.sqrt(ab_t) * d_t - np.sqrt(1.0 - ab_t) * model_out
    else:
        raise ConfigError(f"unknown objective '{objective}'")

    if latent_clip > 0.0:
        x0 = np.clip(x0, -latent_clip, latent_clip)
    eps_hat = (d_t - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t)
    return np.sqrt(ab_p) * x0 + np.sqrt(1.0 - ab_p) * eps_hat


def ddim_sample(cond_latent: np.ndarray, model: Callable, schedule: NoiseSchedule,
                config: DiffusionConfig, seed: int) -> np.ndarray:
    """Run the full DDIM chain from seeded Gaussian noise; returns the clean
    depth latent with the same shape as cond_latent."""
    single = cond_latent.ndim == 3
    cond = cond_latent[None] if single else cond_latent
    gen = rng.stream(seed, "ddim/init")
    z = gen.standard_normal(cond.shape).astype(cond.dtype)
    grid = ddim_timesteps(schedule.T, config.ddim_steps)
    cond_t = ad.Tensor(cond)
    for t, t_prev in zip(grid[:-1], grid[1:]):
        out = model(ad.concat_channels(ad.Tensor(z), cond_t), t)
        z = ddim_step(z, out.data, t, t_prev, schedule, config.objective, config.latent_clip)
    return z[0] if single else z


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    steps: int = 4000          # effective optimizer steps
    micro_batch: int = 2
    accum_steps: int = 16      # effective batch = micro_batch * accum_steps
    lr: float = 5e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    hflip: bool = True
    log_every: int = 100
    checkpoint_every: int = 1000


@dataclass
class LatentDataset:
    """Precomputed, unit-scaled latents for both flip orientations.

    Flipping must happen in image space before encoding (latents of a flipped
    image are not flipped latents), so both orientations are encoded once up
    front and training picks per draw.
    """

    cond: np.ndarray          # [N, C, h, w]
    cond_flipped: np.ndarray
    depth: np.ndarray
    depth_flipped: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.cond, self.cond_flipped, self.depth, self.depth_flipped)}
        if len(shapes) != 1:
            raise ConfigError(f"latent arrays disagree in shape: {sorted(shapes)}")

    def __len__(self) -> int:
        return len(self.cond)


def train_unet(model, data: LatentDataset, schedule: NoiseSchedule, objective: str,
               cfg: TrainConfig, seed: int, start_step: int = 0,
               on_checkpoint: Optional[Callable] = None,
               log_fn: Callable = print) -> list[tuple[int, float]]:
    """Gradient-accumulated Adam training; resumable at any effective step.

    Every random draw is keyed on the global micro-step index, so resuming
    from (params, moments, step) reproduces the uninterrupted trajectory.
    """
    import time

    n = len(data)
    history: list[tuple[int, float]] = []
    window_start = time.perf_counter()
    for step in range(start_step, cfg.steps):
        step_loss = 0.0
        for k in range(cfg.accum_steps):
            gstep = step * cfg.accum_steps + k
            idx = rng.stream(seed, f"train/idx/{gstep}").integers(0, n, size=cfg.micro_batch)
            flips = (rng.stream(seed, f"train/flip/{gstep}").random(cfg.micro_batch) < 0.5
                     if cfg.hflip else np.zeros(cfg.micro_batch, dtype=bool))
            cond = np.where(flips[:, None, None, None], data.cond_flipped[idx], data.cond[idx])
            depth = np.where(flips[:, None, None, None], data.depth_flipped[idx], data.depth[idx])
            t = rng.stream(seed, f"train/t/{gstep}").integers(0, schedule.T, size=cfg.micro_batch)
            eps = rng.stream(seed, f"train/eps/{gstep}").standard_normal(depth.shape).astype(depth.dtype)
            with ad.Tape() as tape:
                loss = training_loss(model, depth, cond, t, eps, schedule, objective)
                scaled = ad.affine(loss, 1.0 / cfg.accum_steps)
            ad.backward(scaled, tape)
            step_loss += scaled.item()
        nn.adam_step(model.parameters(), lr=cfg.lr, beta1=cfg.adam_beta1, beta2=cfg.adam_beta2)
        model.zero_grad()
        history.append((step, step_loss))

        done = step + 1
        if cfg.log_every and done % cfg.log_every == 0:
            recent = float(np.mean([l for _, l in history[-cfg.log_every:]]))
            elapsed = time.perf_counter() - window_start
            rate = cfg.log_every / elapsed if elapsed > 0 else float("inf")
            log_fn(f"unet step {done}/{cfg.steps} loss {recent:.6f} ({rate:.2f} steps/s)")
            window_start = time.perf_counter()
        if on_checkpoint and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            on_checkpoint(done, model, history)
    return history
