"""Diffusion transition model over latent-state sequences.

Forward noising with a variance-preserving schedule, a factorized
spatial/temporal U-Net denoiser conditioned on latent actions via
cross-attention and on a repeated-last-state context via zero-initialized
multi-scale scale/shift fusion, classifier-free guidance combination, and a
deterministic DDIM sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


# ---------------------------------------------------------------------------
# Noise schedule and forward process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray        # (T,), strictly increasing in (0, 1)
    alpha_bar: np.ndarray    # (T,), cumulative products of (1 - beta)

    @property
    def t_diff(self) -> int:
        return len(self.betas)

    def alpha_bar_at(self, tau) -> torch.Tensor:
        """alpha_bar for 1-based timestep(s) tau, as a float32 tensor."""
        tau = torch.as_tensor(tau)
        if ((tau < 1) | (tau > self.t_diff)).any():
            raise ValueError(f"tau must lie in [1, {self.t_diff}]")
        table = torch.from_numpy(self.alpha_bar).float()
        return table[tau.long() - 1]


def make_schedule(t_diff: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear-beta schedule; alpha_bar is the running product of (1 - beta)."""
    if t_diff < 1:
        raise ValueError(f"t_diff must be >= 1, got {t_diff}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, "
                         f"got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, t_diff, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas=betas, alpha_bar=alpha_bar)


def add_noise(s: torch.Tensor, tau, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Variance-preserving forward noising of the whole state sequence.

    s_noisy = sqrt(alpha_bar) * s + sqrt(1 - alpha_bar) * eps. Noise is applied
    to every slot, including the known reference state(s).
    """
    if eps.shape != s.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != state shape {tuple(s.shape)}")
    ab = schedule.alpha_bar_at(tau).to(s.dtype)
    while ab.dim() < s.dim():
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * s + torch.sqrt(1.0 - ab) * eps


def build_state_context(observed: torch.Tensor, total_len: int) -> torch.Tensor:
    """Observed latent prefix + repeats of the last observed latent.

    observed: (..., n_obs, C, h, w) with n_obs >= 1. Returns (..., total_len, C, h, w)
    whose entries past the prefix are all copies of observed[..., -1].
    """
    if observed.dim() < 4 or observed.shape[-4] < 1:
        raise ValueError("need at least one observed latent")
    n_obs = observed.shape[-4]
    if total_len < n_obs:
        raise ValueError(f"total_len {total_len} shorter than observed prefix {n_obs}")
    if total_len == n_obs:
        return observed.clone()
    last = observed.narrow(-4, n_obs - 1, 1)
    reps = [1] * observed.dim()
    reps[-4] = total_len - n_obs
    return torch.cat([observed, last.repeat(*reps)], dim=-4)


def fuse_context(h: torch.Tensor, w: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Scale/shift residual fusion: h <- w * h + b + h.

    w and b must broadcast against h (resolution-matched per block)."""
    w = torch.as_tensor(w, dtype=h.dtype)
    b = torch.as_tensor(b, dtype=h.dtype)
    try:
        torch.broadcast_shapes(h.shape, w.shape, b.shape)
    except RuntimeError as e:
        raise ValueError(f"scale/shift do not match hidden-state resolution: {e}") from e
    return w * h + b + h


def cfg_combine(eps_cond: torch.Tensor, eps_uncond: torch.Tensor, g: float) -> torch.Tensor:
    """Classifier-free guidance: eps_uncond + g * (eps_cond - eps_uncond).

    Exact (bit-for-bit) at g = 1 and g = 0.
    """
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional/unconditional shapes differ")
    if g == 1.0:
        return eps_cond
    if g == 0.0:
        return eps_uncond
    return eps_uncond + g * (eps_cond - eps_uncond)


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    base_width: int = 64
    channel_mult: tuple = (1, 2)       # one entry per resolution level
    temporal_heads: int = 2
    d_a: int = 64                      # latent-action token width (cross-attn kv)
    cross_attention: bool = True
    context_mode: str = "fusion"       # "fusion" (zero-init scale/shift) or "concat"
    p_drop: float = 0.1                # context dropout probability during training
    guidance_scale: float = 2.0

    def __post_init__(self):
        if self.base_width <= 0 or any(m <= 0 for m in self.channel_mult):
            raise ValueError("widths must be positive")
        if not (0.0 <= self.p_drop < 1.0):
            raise ValueError(f"p_drop must be in [0, 1), got {self.p_drop}")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.context_mode not in ("fusion", "concat"):
            raise ValueError(f"unknown context_mode {self.context_mode!r}")


def _norm(ch):
    return nn.GroupNorm(min(8, ch), ch)


def sinusoidal_embedding(pos: torch.Tensor, dim: int) -> torch.Tensor:
    """Transformer-style sinusoidal embedding of positions (float tensor)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=pos.dtype, device=pos.device) / half)
    args = pos[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    """Per-frame spatial residual block with timestep-embedding injection."""

    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.norm1 = _norm(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, c_out)
        self.norm2 = _norm(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        # x: (B*L, C, H, W); emb: (B*L, emb_dim)
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class TemporalBlock(nn.Module):
    """Temporal self-attention over the sequence axis, plus optional
    cross-attention from temporal tokens to the latent-action tokens."""

    def __init__(self, ch, heads, d_a, cross):
        super().__init__()
        self.ch = ch
        self.norm_self = nn.LayerNorm(ch)
        self.attn_self = nn.MultiheadAttention(ch, heads, batch_first=True)
        self.cross = cross
        if cross:
            self.norm_cross = nn.LayerNorm(ch)
            self.kv_proj = nn.Linear(d_a, ch)
            self.attn_cross = nn.MultiheadAttention(ch, heads, batch_first=True)
        self.norm_mlp = nn.LayerNorm(ch)
        self.mlp = nn.Sequential(nn.Linear(ch, 2 * ch), nn.SiLU(), nn.Linear(2 * ch, ch))

    def forward(self, x, h_hat=None):
        # x: (B, L, C, H, W). Tokens are per spatial site across time.
        B, L, C, H, W = x.shape
        tok = x.permute(0, 3, 4, 1, 2).reshape(B * H * W, L, C)
        pos = torch.arange(L, dtype=tok.dtype, device=tok.device)
        tok = tok + sinusoidal_embedding(pos, C)

        t = self.norm_self(tok)
        tok = tok + self.attn_self(t, t, t, need_weights=False)[0]

        if self.cross and h_hat is not None:
            n_tok = h_hat.shape[1]
            kv = self.kv_proj(h_hat.to(tok.dtype))
            # Action token j conditions frame slot L - n_tok + j: align by index.
            kv_pos = torch.arange(L - n_tok, L, dtype=tok.dtype, device=tok.device)
            kv = kv + sinusoidal_embedding(kv_pos, C)
            kv = kv.repeat_interleave(H * W, dim=0)
            q = self.norm_cross(tok)
            tok = tok + self.attn_cross(q, kv, kv, need_weights=False)[0]

        tok = tok + self.mlp(self.norm_mlp(tok))
        return tok.reshape(B, H, W, L, C).permute(0, 3, 4, 1, 2)


class ContextFusionBlock(nn.Module):
    """Zero-initialized conv producing per-pixel scale and shift from the
    block-resolution state context. At init it is exactly the identity."""

    def __init__(self, block_ch, latent_ch):
        super().__init__()
        self.proj = nn.Conv2d(latent_ch, 2 * block_ch, 3, padding=1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, h, ctx, keep=None):
        # h: (B*L, C, H, W); ctx: (B*L, latent_ch, H, W); keep: (B*L, 1, 1, 1) or None
        if ctx.shape[-2:] != h.shape[-2:]:
            raise ValueError(f"context resolution {tuple(ctx.shape[-2:])} does not match "
                             f"block resolution {tuple(h.shape[-2:])}")
        w, b = self.proj(ctx).chunk(2, dim=1)
        residual = w * h + b
        if keep is not None:
            residual = residual * keep
        return h + residual


class Denoiser(nn.Module):
    """Spatiotemporal U-Net predicting the injected noise of a latent sequence.

    forward(x, tau, context, h_hat, ctx_keep):
        x:        (B, L, C, h, w) noisy latent sequence
        tau:      (B,) or scalar 1-based diffusion timestep
        context:  (B, L, C, h, w) state context, or None for the unconditional branch
        h_hat:    (B, n_tok, d_a) latent action tokens, or None
        ctx_keep: (B,) 0/1 float mask for per-sample context dropout, or None
    """

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        c = config
        chs = [c.base_width * m for m in c.channel_mult]
        emb_dim = 4 * c.base_width
        self.time_mlp = nn.Sequential(
            nn.Linear(c.base_width, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))

        in_ch = c.latent_channels * (2 if c.context_mode == "concat" else 1)
        self.conv_in = nn.Conv2d(in_ch, chs[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_tmp = nn.ModuleList()
        self.down_fuse = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chs[0]
        for i, ch in enumerate(chs):
            self.down_res.append(ResBlock(prev, ch, emb_dim))
            self.down_tmp.append(TemporalBlock(ch, c.temporal_heads, c.d_a, c.cross_attention))
            self.down_fuse.append(self._make_fusion(ch))
            self.downsample.append(
                nn.Conv2d(ch, ch, 3, stride=2, padding=1) if i < len(chs) - 1 else nn.Identity())
            prev = ch

        self.mid_res = ResBlock(chs[-1], chs[-1], emb_dim)
        self.mid_tmp = TemporalBlock(chs[-1], c.temporal_heads, c.d_a, c.cross_attention)
        self.mid_fuse = self._make_fusion(chs[-1])

        self.up_res = nn.ModuleList()
        self.up_tmp = nn.ModuleList()
        self.up_fuse = nn.ModuleList()
        self.upsample = nn.ModuleList()
        prev = chs[-1]
        for i in reversed(range(len(chs))):
            self.up_res.append(ResBlock(prev + chs[i], chs[i], emb_dim))
            self.up_tmp.append(TemporalBlock(chs[i], c.temporal_heads, c.d_a, c.cross_attention))
            self.up_fuse.append(self._make_fusion(chs[i]))
            self.upsample.append(
                nn.Conv2d(chs[i], chs[i], 3, padding=1) if i > 0 else nn.Identity())
            prev = chs[i]

        self.norm_out = _norm(chs[0])
        self.conv_out = nn.Conv2d(chs[0], c.latent_channels, 3, padding=1)

    def _make_fusion(self, ch):
        if self.config.context_mode == "fusion":
            return ContextFusionBlock(ch, self.config.latent_channels)
        return None

    def _ctx_at(self, context, level):
        if context is None:
            return None
        if level == 0:
            return context
        return F.avg_pool2d(context, kernel_size=2 ** level)

    def forward(self, x, tau, context=None, h_hat=None, ctx_keep=None):
        if x.dim() != 5:
            raise ValueError(f"expected (B, L, C, h, w) input, got shape {tuple(x.shape)}")
        B, L, C, H, W = x.shape
        if C != self.config.latent_channels:
            raise ValueError(f"expected {self.config.latent_channels} latent channels, got {C}")
        if context is not None and context.shape != x.shape:
            raise ValueError(f"context shape {tuple(context.shape)} != input shape {tuple(x.shape)}")

        tau = torch.as_tensor(tau, device=x.device, dtype=x.dtype).reshape(-1)
        if tau.numel() == 1:
            tau = tau.expand(B)
        emb = self.time_mlp(sinusoidal_embedding(tau, self.config.base_width).to(x.dtype))
        emb_flat = emb.repeat_interleave(L, dim=0)

        keep_flat = None
        if ctx_keep is not None:
            keep_flat = ctx_keep.to(x.dtype).reshape(B, 1).repeat_interleave(L, dim=0)[:, :, None, None]

        ctx_flat = context.reshape(B * L, C, H, W) if context is not None else None
        h = x.reshape(B * L, C, H, W)
        if self.config.context_mode == "concat":
            cat = ctx_flat if ctx_flat is not None else torch.zeros_like(h)
            if keep_flat is not None:
                cat = cat * keep_flat
            h = torch.cat([h, cat], dim=1)
        h = self.conv_in(h)

        def fuse(block, h, level):
            if block is None or ctx_flat is None:
                return h
            return block(h, self._ctx_at(ctx_flat, level), keep_flat)

        skips = []
        for i in range(len(self.down_res)):
            h = self.down_res[i](h, emb_flat)
            h = self.down_tmp[i](h.reshape(B, L, *h.shape[1:]), h_hat).reshape(-1, *h.shape[1:])
            h = fuse(self.down_fuse[i], h, i)
            skips.append(h)
            h = self.downsample[i](h)

        top = len(self.down_res) - 1
        h = self.mid_res(h, emb_flat)
        h = self.mid_tmp(h.reshape(B, L, *h.shape[1:]), h_hat).reshape(-1, *h.shape[1:])
        h = fuse(self.mid_fuse, h, top)

        for j, i in enumerate(reversed(range(len(self.down_res)))):
            h = torch.cat([h, skips[i]], dim=1)
            h = self.up_res[j](h, emb_flat)
            h = self.up_tmp[j](h.reshape(B, L, *h.shape[1:]), h_hat).reshape(-1, *h.shape[1:])
            h = fuse(self.up_fuse[j], h, i)
            if i > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[j](h)

        h = self.conv_out(F.silu(self.norm_out(h)))
        return h.reshape(B, L, C, H, W)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 20
    guidance_scale: float = 2.0
    seed: Optional[int] = None
    strict_seed: bool = True    # reproducibility mode: refuse unseeded sampling
    x0_clip: Optional[float] = 5.0   # clamp on the implied clean latent per step

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.x0_clip is not None and self.x0_clip <= 0:
            raise ValueError("x0_clip must be positive or None")


def ddim_timesteps(t_diff: int, steps: int) -> list:
    """Descending 1-based timestep subset for DDIM."""
    taus = np.unique(np.linspace(1, t_diff, min(steps, t_diff)).round().astype(int))
    return list(taus[::-1])


@torch.no_grad()
def ddim_sample(model, schedule: NoiseSchedule, shape, config: SamplerConfig,
                context=None, h_hat=None) -> torch.Tensor:
    """Deterministic (eta=0) DDIM reverse process from pure noise.

    model is any callable (x, tau, context, h_hat) -> predicted noise. With
    guidance != 1 and a context present, each step evaluates the conditional
    and the context-dropped branches and combines them with cfg_combine.
    """
    if config.seed is None:
        if config.strict_seed:
            raise ValueError("sampler seed is required in reproducibility mode")
        generator = None
    else:
        generator = torch.Generator().manual_seed(config.seed)
    x = torch.randn(*shape, generator=generator)
    taus = ddim_timesteps(schedule.t_diff, config.steps)
    g = config.guidance_scale
    for idx, tau in enumerate(taus):
        tau_t = torch.full((shape[0],), tau, dtype=torch.float32)
        eps_cond = model(x, tau_t, context, h_hat)
        if context is not None and g != 1.0:
            eps_uncond = model(x, tau_t, None, h_hat)
            eps = cfg_combine(eps_cond, eps_uncond, g)
        else:
            eps = eps_cond
        ab = float(schedule.alpha_bar[tau - 1])
        ab_prev = float(schedule.alpha_bar[taus[idx + 1] - 1]) if idx + 1 < len(taus) else 1.0
        x0 = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        if config.x0_clip is not None:
            # latents are standardized, so the clean signal is bounded; clamping
            # the implied x0 keeps early high-noise prediction errors from
            # compounding through the trajectory
            x0 = x0.clamp(-config.x0_clip, config.x0_clip)
        x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    return x


def sample_future(denoiser, schedule: NoiseSchedule, ref_latents: torch.Tensor,
                  h_hat, horizon: int, config: SamplerConfig) -> torch.Tensor:
    """Predict `horizon` future latents given reference latents (B, r, C, h, w).

    The full (r + horizon)-slot sequence is denoised from noise, conditioned
    on the repeated-last-reference context; the reconstructed reference slots
    are discarded from the output.
    """
    if ref_latents.dim() != 5:
        raise ValueError("ref_latents must be (B, r, C, h, w)")
    B, r = ref_latents.shape[:2]
    total = r + horizon
    context = build_state_context(ref_latents, total)
    shape = (B, total, *ref_latents.shape[2:])

    def model(x, tau, ctx, ha):
        return denoiser(x, tau, context=ctx, h_hat=ha)

    out = ddim_sample(model, schedule, shape, config, context=context, h_hat=h_hat)
    return out[:, r:]
