"""Autoregressive long-horizon prediction.

Repeatedly calls the world model, feeding the last predicted latents back as
the next call's references and the last predicted actions as the next known
window. With r reference frames and a per-call horizon of k new frames,
n rollouts produce r + n*k frames total.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from .codec import decode_latents, encode_frames
from .transition import SamplerConfig, sample_future
from .trainer import WorldModel


@dataclass(frozen=True)
class RolloutConfig:
    n_rollouts: int = 16
    guidance_scale: float = 2.0
    sample_steps: int = 20
    seed: int = 0
    reencode: bool = False   # feed decoded+re-encoded frames back instead of raw latents

    def __post_init__(self):
        if self.n_rollouts < 0:
            raise ValueError("n_rollouts must be >= 0")
        if self.sample_steps < 1:
            raise ValueError("sample_steps must be >= 1")


@dataclass
class RolloutResult:
    frames: np.ndarray        # (r + n*k, H, W, 3)
    actions: np.ndarray       # (eta + n*(ΔT-eta), 2), physical units
    boundaries: list          # frame index at the start of each call's output


def _validate_inputs(wm: WorldModel, init_frames: np.ndarray, init_actions: np.ndarray):
    cfg = wm.train_config
    if init_frames.shape[0] != cfg.ref_frames:
        raise ValueError(
            f"got {init_frames.shape[0]} initial frames but the checkpoint was "
            f"trained with ref_frames={cfg.ref_frames}")
    if init_actions.shape != (cfg.eta, 2):
        raise ValueError(
            f"initial known actions must have shape ({cfg.eta}, 2), "
            f"got {tuple(init_actions.shape)}")


def rollout(wm: WorldModel, init_frames: np.ndarray, init_actions: np.ndarray,
            config: RolloutConfig, overrides: Optional[list] = None) -> RolloutResult:
    """Roll the model out config.n_rollouts times.

    init_frames: (r, H, W, 3) observations; init_actions: (eta, 2) physical.
    overrides, if given, is a list of n_rollouts (eta, 2) arrays replacing the
    known-action window of each call (counterfactual control).
    """
    _validate_inputs(wm, init_frames, init_actions)
    cfg = wm.train_config
    eta, dT, r = cfg.eta, cfg.horizon, cfg.ref_frames
    if overrides is not None:
        if len(overrides) < config.n_rollouts:
            raise ValueError(f"need {config.n_rollouts} override windows, got {len(overrides)}")
        for i, ov in enumerate(overrides):
            ov = np.asarray(ov)
            if ov.shape != (eta, 2):
                raise ValueError(f"override {i} must have shape ({eta}, 2), got {ov.shape}")

    frames = [np.asarray(init_frames, dtype=np.float32)]
    actions = [np.asarray(init_actions, dtype=np.float64)]
    boundaries = [r]

    ref_latents = encode_frames(wm.codec, init_frames).unsqueeze(0)
    known = torch.from_numpy(np.asarray(init_actions)).float().unsqueeze(0)

    wm.action.eval()
    wm.denoiser.eval()
    for call in range(config.n_rollouts):
        if overrides is not None:
            known = torch.from_numpy(np.asarray(overrides[call])).float().unsqueeze(0)
        with torch.no_grad():
            known_norm = wm.action.normalize(known)
            h = wm.action.embed_known_actions(known_norm)
            vis = wm.action.project_visual(ref_latents[:, -1])
            h_tilde, h_hat = wm.action.predict_latent_actions(h, vis)
            pred_actions = wm.action.decode_actions_physical(h_tilde)[0]
        sampler = SamplerConfig(steps=config.sample_steps,
                                guidance_scale=config.guidance_scale,
                                seed=config.seed + call)
        new_latents = sample_future(wm.denoiser, wm.schedule, ref_latents, h_hat,
                                    horizon=dT, config=sampler)
        frames.append(decode_latents(wm.codec, new_latents[0]))
        actions.append(pred_actions.numpy().astype(np.float64))
        boundaries.append(boundaries[-1] + dT)

        if config.reencode:
            ref_latents = encode_frames(wm.codec, frames[-1][-r:]).unsqueeze(0)
        else:
            ref_latents = new_latents[:, -r:]
        known = pred_actions[-eta:].unsqueeze(0)

    return RolloutResult(frames=np.concatenate(frames),
                         actions=np.concatenate(actions),
                         boundaries=boundaries[:-1])


def counterfactual_rollout(wm: WorldModel, init_frames: np.ndarray,
                           action_overrides, config: RolloutConfig) -> RolloutResult:
    """Rollout where each call's known-action window is forced to an override.

    action_overrides: one (eta, 2) window reused for every call, or a list of
    n_rollouts windows.
    """
    eta = wm.train_config.eta
    ov = np.asarray(action_overrides, dtype=np.float64)
    if ov.ndim == 2:
        overrides = [ov] * config.n_rollouts
    else:
        overrides = [np.asarray(o, dtype=np.float64) for o in action_overrides]
    first = overrides[0] if overrides else np.zeros((eta, 2))
    return rollout(wm, init_frames, first, config, overrides=overrides)


def decode_rollout(wm: WorldModel, latents: torch.Tensor) -> np.ndarray:
    """Decode a (N, C, h, w) latent sequence to (N, H, W, 3) frames in [0, 1]."""
    return decode_latents(wm.codec, latents)


def save_rollout(result: RolloutResult, out_dir, config: RolloutConfig,
                 montage: bool = False) -> None:
    """Write frames as zero-padded PNGs, actions as CSV, and a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(len(result.frames))))
    for i, frame in enumerate(result.frames):
        img = Image.fromarray((np.clip(frame, 0, 1) * 255).round().astype(np.uint8))
        img.save(out_dir / f"frame_{i:0{width}d}.png")
    with open(out_dir / "actions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["k", "speed_mps", "steering_rad"])
        for k, (speed, steering) in enumerate(result.actions):
            writer.writerow([k, repr(float(speed)), repr(float(steering))])
    (out_dir / "manifest.json").write_text(json.dumps({
        "n_frames": int(len(result.frames)),
        "n_actions": int(len(result.actions)),
        "boundaries": [int(b) for b in result.boundaries],
        "config": asdict(config),
    }, indent=2))
    if montage:
        strip = np.concatenate(list(result.frames), axis=1)
        Image.fromarray((np.clip(strip, 0, 1) * 255).round().astype(np.uint8)).save(
            out_dir / "montage.png")
