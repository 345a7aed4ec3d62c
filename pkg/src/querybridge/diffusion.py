"""Toy conditional DDPM image decoder.

Epsilon-prediction U-Net at 32x32 with cross-attention onto a variable-length
condition set, a linear beta schedule, classifier-free guidance via a learned
null condition, and ancestral sampling. Images travel through the pipeline in
[0, 1]; diffusion math runs in [-1, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import DimensionMismatchError
from .queries import ConditionSet


@dataclass(frozen=True)
class DiffusionConfig:
    image_size: int = 32
    channels: int = 3
    timesteps: int = 100
    beta_schedule: str = "linear"
    # beta_max sized so alpha_bar\_T ~ 2e-3 at T=100; sampling then starts
    # from a noise level training has actually seen
    beta_min: float = 1e-4
    beta_max: float = 0.12
    cond_dim: int = 192
    cfg_dropout_prob: float = 0.1
    guidance_scale: float = 3.0
    base_channels: int = 32

    def __post_init__(self):
        if self.beta_schedule != "linear":
            raise ValueError(f"unsupported beta schedule {self.beta_schedule!r}")
        if not (0.0 < self.beta_min <= self.beta_max < 1.0):
            raise ValueError("need 0 < beta_min <= beta_max < 1")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if not 0.0 <= self.cfg_dropout_prob <= 1.0:
            raise ValueError("cfg_dropout_prob must lie in [0, 1]")
        if self.guidance_scale < 0.0:
            raise ValueError("guidance_scale must be >= 0")
        if self.base_channels % 8 != 0:
            raise ValueError("base_channels must be a multiple of 8")
        if self.image_size % 4 != 0:
            raise ValueError("image_size must be a multiple of 4")


class NoiseSchedule:
    """Linear-beta DDPM forward process; index 0 is the clean image.

    alpha_bar is derived as 1 - one_minus_alpha_bar so that the pair sums to
    exactly 1.0 at every t in float64.
    """

    def __init__(self, config: DiffusionConfig):
        t = config.timesteps
        betas = torch.linspace(config.beta_min, config.beta_max, t, dtype=torch.float64)
        self.betas = torch.cat([torch.zeros(1, dtype=torch.float64), betas])
        alpha_bar = torch.cumprod(1.0 - self.betas, dim=0)
        self.one_minus_alpha_bar = 1.0 - alpha_bar
        self.alpha_bar = 1.0 - self.one_minus_alpha_bar
        self.alphas = 1.0 - self.betas
        if not torch.all(self.alpha_bar[1:] < self.alpha_bar[:-1]):
            raise ValueError("alpha_bar must be strictly decreasing")
        self.timesteps = t

    def add_noise(self, x0: Tensor, t: Tensor | int, eps: Tensor) -> Tensor:
        """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, with t in [1, T]."""
        if isinstance(t, int):
            t = torch.tensor([t])
        if torch.any(t < 1) or torch.any(t > self.timesteps):
            raise ValueError(f"t must lie in [1, {self.timesteps}]")
        shape = (-1,) + (1,) * (x0.dim() - 1)
        ab = self.alpha_bar[t].view(shape).to(x0.dtype)
        omab = self.one_minus_alpha_bar[t].view(shape).to(x0.dtype)
        return ab.sqrt() * x0 + omab.sqrt() * eps


@dataclass
class NoisySample:
    x_t: Tensor
    t: int
    eps: Tensor


def sinusoidal_embedding(t: Tensor, dim: int) -> Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double().unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    return emb


class ResBlock(nn.Module):
    """Residual block with AdaGN conditioning: the embedding drives a
    per-channel scale and shift after the second normalization."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(8, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time_proj(temb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Image tokens attend onto the condition rows."""

    def __init__(self, channels: int, cond_dim: int, num_heads: int = 4):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        self.norm = nn.GroupNorm(8, channels)
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(cond_dim, channels)
        self.v = nn.Linear(cond_dim, channels)
        self.out = nn.Linear(channels, channels)

    def forward(self, x: Tensor, cond: Tensor) -> Tensor:
        b, c, h, w = x.shape
        tokens = self.norm(x).reshape(b, c, h * w).transpose(1, 2)
        q = self.q(tokens).view(b, h * w, self.num_heads, self.head_dim).transpose(1, 2)
        k = self.k(cond).view(b, -1, self.num_heads, self.head_dim).transpose(1, 2)
        v = self.v(cond).view(b, -1, self.num_heads, self.head_dim).transpose(1, 2)
        logits = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        attn = F.softmax(logits, dim=-1)
        y = (attn @ v).transpose(1, 2).reshape(b, h * w, c)
        y = self.out(y).transpose(1, 2).reshape(b, c, h, w)
        return x + y


class ConditionalDenoiser(nn.Module):
    """Small U-Net epsilon predictor with cross-attention conditioning.

    Holds the learned null condition used for classifier-free guidance, so a
    trained checkpoint carries everything sampling needs.
    """

    def __init__(self, config: DiffusionConfig, seed: int = 0):
        super().__init__()
        self.config = config
        base = config.base_channels
        time_dim = base * 2
        self.time_mlp = nn.Sequential(
            nn.Linear(base, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.time_base = base
        # pooled conditions join the time embedding so every ResBlock is
        # conditioned globally; cross-attention handles per-row detail
        self.cond_pool = nn.Linear(config.cond_dim, time_dim)
        ch = config.channels
        self.in_conv = nn.Conv2d(ch, base, 3, padding=1)
        self.down1 = ResBlock(base, base, time_dim)
        self.down2 = ResBlock(base, base * 2, time_dim)
        self.mid1 = ResBlock(base * 2, base * 2, time_dim)
        self.mid_attn = CrossAttention(base * 2, config.cond_dim)
        self.mid2 = ResBlock(base * 2, base * 2, time_dim)
        self.up2 = ResBlock(base * 4, base * 2, time_dim)
        self.up2_attn = CrossAttention(base * 2, config.cond_dim)
        self.up1 = ResBlock(base * 3, base, time_dim)
        self.out_norm = nn.GroupNorm(8, base)
        self.out_conv = nn.Conv2d(base, ch, 3, padding=1)
        self.null_condition = nn.Parameter(torch.zeros(1, config.cond_dim))
        self._reset_parameters(seed)

    def _reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for p in self.parameters():
                if p.dim() > 1:
                    fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.dim() == 4 else 1)
                    std = 1.0 / math.sqrt(fan_in)
                    p.uniform_(-std, std, generator=g)
                else:
                    p.zero_()
            # GroupNorm scales start at one
            for m in self.modules():
                if isinstance(m, nn.GroupNorm):
                    m.weight.fill_(1.0)
            # blocks open as identities: the closing conv of every res block,
            # every attention out-projection and the output conv start at zero
            for m in self.modules():
                if isinstance(m, ResBlock):
                    m.conv2.weight.zero_()
                if isinstance(m, CrossAttention):
                    m.out.weight.zero_()
            self.out_conv.weight.zero_()
            self.null_condition.normal_(0.0, 0.02, generator=g)

    def null_conditions(self, batch: int, dtype=None) -> Tensor:
        null = self.null_condition
        if dtype is not None:
            null = null.to(dtype)
        return null.unsqueeze(0).expand(batch, -1, -1)

    def forward(self, x_t: Tensor, t: Tensor, cond: Tensor) -> Tensor:
        if cond.shape[-1] != self.config.cond_dim:
            raise DimensionMismatchError(
                f"condition dim {cond.shape[-1]} != cond_dim {self.config.cond_dim}"
            )
        temb = sinusoidal_embedding(t, self.time_base).to(x_t.dtype)
        temb = self.time_mlp(temb) + self.cond_pool(cond.mean(dim=-2))
        h0 = self.in_conv(x_t)
        h1 = self.down1(h0, temb)                      # [b, base, 32, 32]
        h2 = self.down2(F.avg_pool2d(h1, 2), temb)     # [b, 2base, 16, 16]
        m = F.avg_pool2d(h2, 2)                        # [b, 2base, 8, 8]
        m = self.mid1(m, temb)
        m = self.mid_attn(m, cond)
        m = self.mid2(m, temb)
        u2 = F.interpolate(m, scale_factor=2, mode="nearest")
        u2 = self.up2(torch.cat([u2, h2], dim=1), temb)
        u2 = self.up2_attn(u2, cond)
        u1 = F.interpolate(u2, scale_factor=2, mode="nearest")
        u1 = self.up1(torch.cat([u1, h1], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(u1)))


def to_model_space(images: Tensor) -> Tensor:
    return images * 2.0 - 1.0


def to_image_space(x: Tensor) -> Tensor:
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def denoise_loss(
    model,
    schedule: NoiseSchedule,
    x0: Tensor,
    conditions: ConditionSet,
    t: Tensor | int,
    eps: Tensor,
) -> Tensor:
    """MSE between predicted and true noise at step t; x0 given in [0, 1]."""
    if isinstance(t, int):
        t = torch.full((x0.shape[0],), t, dtype=torch.long)
    if torch.any(t < 1) or torch.any(t > schedule.timesteps):
        raise ValueError(f"t must lie in [1, {schedule.timesteps}]")
    x_t = schedule.add_noise(to_model_space(x0), t, eps)
    eps_hat = model(x_t, t, conditions.vectors)
    if eps_hat.shape != eps.shape:
        raise DimensionMismatchError(
            f"prediction shape {tuple(eps_hat.shape)} != noise shape {tuple(eps.shape)}"
        )
    return F.mse_loss(eps_hat, eps)


def guided_eps(
    model,
    x_t: Tensor,
    t: Tensor,
    cond: Tensor,
    guidance_scale: float,
) -> Tensor:
    """Classifier-free guidance: eps_u + g * (eps_c - eps_u).

    guidance_scale == 0 skips the unconditional branch entirely and returns
    the pure conditional prediction.
    """
    eps_c = model(x_t, t, cond)
    if guidance_scale == 0.0:
        return eps_c
    null = model.null_conditions(x_t.shape[0], dtype=cond.dtype)
    eps_u = model(x_t, t, null)
    return eps_u + guidance_scale * (eps_c - eps_u)


def sample(
    model,
    schedule: NoiseSchedule,
    conditions: ConditionSet,
    seed: int,
    guidance_scale: float | None = None,
    config: DiffusionConfig | None = None,
) -> Tensor:
    """Ancestral DDPM sampling; deterministic given the seed. Returns [0,1] images."""
    cfg = config if config is not None else model.config
    if guidance_scale is None:
        guidance_scale = cfg.guidance_scale
    vectors = conditions.vectors
    if vectors.dim() == 2:
        vectors = vectors.unsqueeze(0)
    b = vectors.shape[0]
    g = torch.Generator().manual_seed(seed)
    shape = (b, cfg.channels, cfg.image_size, cfg.image_size)
    x = torch.randn(shape, generator=g, dtype=vectors.dtype)
    with torch.no_grad():
        for step in range(schedule.timesteps, 0, -1):
            t = torch.full((b,), step, dtype=torch.long)
            eps_hat = guided_eps(model, x, t, vectors, guidance_scale)
            beta = schedule.betas[step].to(x.dtype)
            alpha = schedule.alphas[step].to(x.dtype)
            omab = schedule.one_minus_alpha_bar[step].to(x.dtype)
            mean = (x - beta / omab.sqrt() * eps_hat) / alpha.sqrt()
            if step > 1:
                omab_prev = schedule.one_minus_alpha_bar[step - 1].to(x.dtype)
                var = beta * omab_prev / omab
                noise = torch.randn(shape, generator=g, dtype=x.dtype)
                x = mean + var.sqrt() * noise
            else:
                x = mean
    return to_image_space(x)


def reconstruct(pipeline, image: Tensor, seed: int = 0, guidance_scale: float = 0.0) -> Tensor:
    """Re-generate an input image from its own extracted conditions."""
    conditions = pipeline.conditions_for_images(image.unsqueeze(0))
    out = pipeline.decode(conditions, seed=seed, guidance_scale=guidance_scale)
    return out.squeeze(0)
