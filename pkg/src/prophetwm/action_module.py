"""Lightweight action model.

From the current observation's latent and a short window of known future
actions, produces per-step latent action tokens for the full prediction
horizon in a single forward pass, and decodes the unknown tail into
low-level (speed, steering) predictions supervised with an L1 loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class ActionModuleConfig:
    d_a: int = 64                 # latent action token width
    eta: int = 2                  # number of known future actions
    horizon: int = 9              # total prediction horizon (tokens produced)
    latent_channels: int = 4      # channels of the codec latent fed to project_visual
    embed_width: int = 64
    temporal_width: int = 128
    future_width: int = 256
    decoder_width: int = 64

    def __post_init__(self):
        if not (1 <= self.eta < self.horizon):
            raise ValueError(f"need 1 <= eta < horizon, got eta={self.eta}, horizon={self.horizon}")
        for name in ("d_a", "embed_width", "temporal_width", "future_width", "decoder_width"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _mlp(d_in, d_hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.SiLU(), nn.Linear(d_hidden, d_out))


class ActionModule(nn.Module):
    """Embedding layer + temporal MLP + visual transform + future MLP + decoder head.

    All tensors are batched: known actions (B, eta, 2), latents (B, C, h, w).
    Actions are consumed and produced in normalized units; the stored
    per-channel stats convert to and from physical (m/s, rad) units.
    """

    def __init__(self, config: ActionModuleConfig):
        super().__init__()
        self.config = config
        c = config
        self.embed = nn.Linear(2, c.embed_width)
        # Temporal MLP over the flattened known-action window.
        self.temporal = _mlp(c.eta * c.embed_width, c.temporal_width, c.eta * c.d_a)
        self.visual_proj = nn.Linear(c.latent_channels, c.d_a)
        self.future = _mlp(c.eta * c.d_a + c.d_a, c.future_width, (c.horizon - c.eta) * c.d_a)
        self.head = _mlp(c.d_a, c.decoder_width, 2)
        self.register_buffer("action_mean", torch.zeros(2))
        self.register_buffer("action_std", torch.ones(2))

    def set_action_stats(self, mean, std):
        mean = torch.as_tensor(mean, dtype=torch.float32)
        std = torch.as_tensor(std, dtype=torch.float32)
        if not (torch.isfinite(mean).all() and torch.isfinite(std).all() and (std > 0).all()):
            raise ValueError("action stats must be finite with std > 0")
        self.action_mean.copy_(mean.to(self.action_mean.dtype))
        self.action_std.copy_(std.to(self.action_std.dtype))

    def normalize(self, actions: torch.Tensor) -> torch.Tensor:
        return (actions - self.action_mean) / self.action_std

    def denormalize(self, actions: torch.Tensor) -> torch.Tensor:
        return actions * self.action_std + self.action_mean

    def embed_known_actions(self, known_norm: torch.Tensor) -> torch.Tensor:
        """(B, eta, 2) normalized actions -> current latent action h (B, eta, d_a)."""
        c = self.config
        if known_norm.shape[-2:] != (c.eta, 2):
            raise ValueError(f"expected known action window ({c.eta}, 2), "
                             f"got {tuple(known_norm.shape[-2:])}")
        e = self.embed(known_norm)                       # (B, eta, embed_width)
        h = self.temporal(e.flatten(-2))                 # order-sensitive across the window
        return h.reshape(*known_norm.shape[:-2], c.eta, c.d_a)

    def project_visual(self, latent: torch.Tensor) -> torch.Tensor:
        """(B, C, h, w) codec latent -> (B, d_a) visual token via mean-pool + linear."""
        if latent.shape[-3] != self.config.latent_channels:
            raise ValueError(f"expected {self.config.latent_channels} latent channels, "
                             f"got {latent.shape[-3]}")
        pooled = latent.mean(dim=(-2, -1))
        return self.visual_proj(pooled)

    def predict_latent_actions(self, h: torch.Tensor, visual_token: torch.Tensor):
        """Predict future tokens h_tilde and return (h_tilde, h_hat = [h, h_tilde])."""
        c = self.config
        feats = torch.cat([h.flatten(-2), visual_token], dim=-1)
        h_tilde = self.future(feats).reshape(*h.shape[:-2], c.horizon - c.eta, c.d_a)
        h_hat = torch.cat([h, h_tilde], dim=-2)
        return h_tilde, h_hat

    def decode_actions(self, h_tilde: torch.Tensor) -> torch.Tensor:
        """Future tokens -> normalized (speed, steering) predictions, (B, horizon-eta, 2)."""
        return self.head(h_tilde)

    def decode_actions_physical(self, h_tilde: torch.Tensor) -> torch.Tensor:
        """Physical-unit predictions with speed clamped >= 0."""
        out = self.denormalize(self.decode_actions(h_tilde))
        speed = out[..., 0:1].clamp(min=0.0)
        return torch.cat([speed, out[..., 1:2]], dim=-1)

    def forward(self, latent: torch.Tensor, known_norm: torch.Tensor):
        """Full pass: returns (h_hat (B, horizon, d_a), pred_norm (B, horizon-eta, 2))."""
        h = self.embed_known_actions(known_norm)
        vis = self.project_visual(latent)
        h_tilde, h_hat = self.predict_latent_actions(h, vis)
        return h_hat, self.decode_actions(h_tilde)


def action_loss(pred_norm: torch.Tensor, gt_norm: torch.Tensor, beta_a: float = 1.0) -> torch.Tensor:
    """L1 loss in normalized units: beta_a * mean |pred - gt| over steps and channels."""
    if pred_norm.shape != gt_norm.shape:
        raise ValueError(f"prediction/target shape mismatch: "
                         f"{tuple(pred_norm.shape)} vs {tuple(gt_norm.shape)}")
    return beta_a * (pred_norm - gt_norm).abs().mean()


def compute_action_stats(actions: np.ndarray):
    """Per-channel mean/std over a (..., 2) array of physical actions."""
    flat = np.asarray(actions, dtype=np.float64).reshape(-1, 2)
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-6)
    return mean, std
