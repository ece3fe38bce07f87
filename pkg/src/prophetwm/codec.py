"""Latent-state codec: convolutional autoencoder with optional small KL term.

Encodes frames into compact spatial latents and decodes them back. Pretrained
on microworld frames, then frozen for world-model training; a checksum over
parameters lets the trainer assert the freeze. Latents are standardized by a
global mean/scale so diffusion operates on roughly unit-variance data.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CODEC_SCHEMA_VERSION = 1

# Held-out reconstruction quality bar recorded for evaluation runs (dB).
TARGET_PSNR_DB = 28.0


class CheckpointError(RuntimeError):
    """Checkpoint file missing, corrupt, or of the wrong schema."""


@dataclass(frozen=True)
class CodecConfig:
    frame_size: int = 64
    in_channels: int = 3
    latent_channels: int = 4
    downsample: int = 8            # power of 2
    base_width: int = 32
    kl_weight: float = 1e-6        # 0 for a plain autoencoder
    epochs: int = 8
    batch_size: int = 32
    lr: float = 2e-3

    def __post_init__(self):
        if self.downsample < 1 or (self.downsample & (self.downsample - 1)) != 0:
            raise ValueError(f"downsample must be a power of 2, got {self.downsample}")
        if self.base_width <= 0 or self.latent_channels <= 0:
            raise ValueError("channel widths must be positive")
        if self.frame_size % self.downsample != 0:
            raise ValueError("frame_size must be divisible by downsample")

    @property
    def levels(self):
        return int(math.log2(self.downsample))

    @property
    def latent_size(self):
        return self.frame_size // self.downsample


class Codec(nn.Module):
    """Conv autoencoder. encode() returns the posterior mean, standardized."""

    def __init__(self, config: CodecConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        # Channel ladder: w, 2w, 4w, ... capped at 4w. chs[i] is the width
        # after i stride-2 downsamplings.
        chs = [min(w * 2 ** i, 4 * w) for i in range(config.levels + 1)]

        enc = [nn.Conv2d(config.in_channels, chs[0], 3, padding=1), nn.SiLU()]
        for i in range(config.levels):
            enc += [nn.Conv2d(chs[i], chs[i + 1], 3, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(chs[-1], 2 * config.latent_channels, 3, padding=1)]
        self.encoder = nn.Sequential(*enc)

        dec = [nn.Conv2d(config.latent_channels, chs[-1], 3, padding=1), nn.SiLU()]
        for i in reversed(range(config.levels)):
            dec += [nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(chs[i + 1], chs[i], 3, padding=1), nn.SiLU()]
        dec += [nn.Conv2d(chs[0], config.in_channels, 3, padding=1)]
        self.decoder = nn.Sequential(*dec)

        self.register_buffer("norm_mean", torch.zeros(()))
        self.register_buffer("norm_scale", torch.ones(()))

    def _check_frame_shape(self, x):
        s = self.config.frame_size
        if x.shape[-3:] != (self.config.in_channels, s, s):
            raise ValueError(
                f"observation shape {tuple(x.shape[-3:])} does not match "
                f"trained config ({self.config.in_channels}, {s}, {s})")

    def posterior(self, x):
        """Raw (mu, logvar), before standardization."""
        self._check_frame_shape(x)
        mu, logvar = self.encoder(x).chunk(2, dim=-3)
        return mu, logvar.clamp(-20, 10)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Deterministic inference encoding: standardized posterior mean."""
        mu, _ = self.posterior(x)
        return (mu - self.norm_mean) / self.norm_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        s = self.config.latent_size
        if z.shape[-3:] != (self.config.latent_channels, s, s):
            raise ValueError(
                f"latent shape {tuple(z.shape[-3:])} does not match config "
                f"({self.config.latent_channels}, {s}, {s})")
        raw = z * self.norm_scale + self.norm_mean
        return torch.sigmoid(self.decoder(raw))


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) float array in [0,1] -> (N, 3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(frames.transpose(0, 3, 1, 2))).float()


def tensor_to_frames(x: torch.Tensor) -> np.ndarray:
    return x.detach().clamp(0, 1).permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)


@torch.no_grad()
def encode_frames(codec: Codec, frames: np.ndarray, batch_size: int = 64) -> torch.Tensor:
    """Encode (N, H, W, 3) frames to (N, C, h, w) standardized latents."""
    codec.eval()
    outs = []
    for i in range(0, len(frames), batch_size):
        outs.append(codec.encode(frames_to_tensor(frames[i:i + batch_size])))
    return torch.cat(outs)


@torch.no_grad()
def decode_latents(codec: Codec, latents: torch.Tensor, batch_size: int = 64) -> np.ndarray:
    codec.eval()
    outs = []
    for i in range(0, len(latents), batch_size):
        outs.append(tensor_to_frames(codec.decode(latents[i:i + batch_size])))
    return np.concatenate(outs)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for arrays in [0, 1]."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * math.log10(mse)


def pretrain_codec(frames: np.ndarray, config: CodecConfig, seed: int = 0,
                   min_frames: int = 1000):
    """Train a codec on microworld frames.

    Returns (codec, stats) where stats carries per-epoch mean losses and the
    fitted latent normalization. The codec's norm buffers are set so that
    encode() output is approximately zero-mean / unit-variance.
    """
    if len(frames) < min_frames:
        raise ValueError(f"need >= {min_frames} frames to pretrain, got {len(frames)}")
    torch.manual_seed(seed)
    codec = Codec(config)
    opt = torch.optim.Adam(codec.parameters(), lr=config.lr)
    rng = np.random.default_rng(seed)
    x_all = frames_to_tensor(frames)
    n = len(x_all)
    epoch_losses = []
    codec.train()
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        total, count = 0.0, 0
        for i in range(0, n, config.batch_size):
            x = x_all[perm[i:i + config.batch_size]]
            mu, logvar = codec.posterior(x)
            if config.kl_weight > 0:
                z = mu + torch.exp(0.5 * logvar) * torch.randn_like(mu)
                kl = 0.5 * (mu ** 2 + logvar.exp() - 1 - logvar).mean()
            else:
                z, kl = mu, torch.zeros(())
            recon = torch.sigmoid(codec.decoder(z))
            loss = F.mse_loss(recon, x) + config.kl_weight * kl
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(x)
            count += len(x)
        epoch_losses.append(total / count)

    codec.eval()
    with torch.no_grad():
        mus = []
        for i in range(0, n, config.batch_size):
            mus.append(codec.posterior(x_all[i:i + config.batch_size])[0])
        mus = torch.cat(mus)
        codec.norm_mean.fill_(mus.mean().item())
        codec.norm_scale.fill_(max(mus.std().item(), 1e-6))
    stats = {
        "epoch_losses": epoch_losses,
        "norm_mean": codec.norm_mean.item(),
        "norm_scale": codec.norm_scale.item(),
        "n_frames": n,
    }
    return codec, stats


def codec_checksum(codec: Codec) -> str:
    """SHA-256 over all parameters and buffers, in state-dict order."""
    h = hashlib.sha256()
    for key, tensor in codec.state_dict().items():
        h.update(key.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def save_codec(codec: Codec, path) -> None:
    torch.save({
        "schema_version": CODEC_SCHEMA_VERSION,
        "config": asdict(codec.config),
        "state_dict": codec.state_dict(),
        "checksum": codec_checksum(codec),
    }, path)


def load_codec(path) -> Codec:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise CheckpointError(f"unreadable codec checkpoint at {path}: {e}") from e
    if blob.get("schema_version") != CODEC_SCHEMA_VERSION:
        raise CheckpointError(
            f"codec checkpoint version mismatch: expected {CODEC_SCHEMA_VERSION}, "
            f"got {blob.get('schema_version')}")
    codec = Codec(CodecConfig(**blob["config"]))
    codec.load_state_dict(blob["state_dict"])
    if codec_checksum(codec) != blob["checksum"]:
        raise CheckpointError(f"codec checkpoint checksum mismatch at {path}")
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec
