"""Joint training of the action module and the diffusion transition model.

Supports three regimes: "joint" (overall loss L_a + L_v through all
parameters), "frozen" (action module pretrained on L_a alone, then frozen
while the transition model trains), and "none" (no latent actions: the
denoiser sees a null ĥ and only L_v is optimized).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .action_module import ActionModule, ActionModuleConfig, action_loss, compute_action_stats
from .codec import Codec, CheckpointError, codec_checksum, encode_frames
from .transition import (Denoiser, DenoiserConfig, NoiseSchedule, add_noise,
                         build_state_context, make_schedule)

WORLD_SCHEMA_VERSION = 1

REGIMES = ("joint", "frozen", "none")


@dataclass(frozen=True)
class TrainConfig:
    beta_a: float = 1.0
    beta_v: float = 1.0
    lr: float = 1e-4
    lr_action: float = 1e-3           # separate rate for the (small) action module
    schedule: str = "cosine"          # "cosine" or "constant"
    batch_size: int = 16
    steps: int = 2000
    eta: int = 2                      # known future actions per window
    horizon: int = 9                  # ΔT: predicted steps per model call
    ref_frames: int = 1
    p_drop: float = 0.1               # context dropout probability
    seed: int = 0
    regime: str = "joint"
    t_diff: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    grad_clip: float = 1.0
    weight_decay: float = 1e-4
    log_interval: int = 10
    ckpt_interval: int = 1000
    action_pretrain_steps: int = 300  # used by the "frozen" regime

    def __post_init__(self):
        if self.beta_a < 0 or self.beta_v < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lr <= 0 or self.lr_action <= 0:
            raise ValueError("learning rates must be > 0")
        if self.steps <= 0:
            raise ValueError("steps must be > 0")
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if not (1 <= self.eta < self.horizon):
            raise ValueError("need 1 <= eta < horizon")
        if self.ref_frames < 1:
            raise ValueError("ref_frames must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown LR schedule {self.schedule!r}")

    @property
    def seq_len(self):
        return self.ref_frames + self.horizon


class LatentDataset:
    """Episodes pre-encoded by the frozen codec.

    latents: (N, T, C, h, w) float32 tensor; actions: (N, T-1, 2) float64.
    Episodes shorter than the training window are skipped with a warning.
    """

    def __init__(self, episodes, codec: Codec, min_len: int):
        kept = []
        for i, ep in enumerate(episodes):
            if len(ep) < min_len:
                warnings.warn(f"episode {i} has {len(ep)} frames < window {min_len}; skipped")
                continue
            kept.append(ep)
        if not kept:
            raise ValueError("no episode is long enough for the training window")
        t_min = min(len(ep) for ep in kept)
        self.latents = torch.stack([encode_frames(codec, ep.frames[:t_min]) for ep in kept])
        self.actions = np.stack([ep.actions[:t_min - 1] for ep in kept])
        if not np.isfinite(self.actions).all():
            raise ValueError("dataset contains non-finite actions")
        self.action_mean, self.action_std = compute_action_stats(self.actions)
        self.codec_checksum = codec_checksum(codec)

    @property
    def n_episodes(self):
        return self.latents.shape[0]

    @property
    def n_frames(self):
        return self.latents.shape[1]


@dataclass
class TrainBatch:
    ref_latents: torch.Tensor      # (B, r, C, h, w)
    target_latents: torch.Tensor   # (B, ΔT, C, h, w)
    known_actions: torch.Tensor    # (B, η, 2), physical units
    future_actions: torch.Tensor   # (B, ΔT-η, 2), physical units
    tau: torch.Tensor              # (B,), 1-based diffusion timesteps
    eps: torch.Tensor              # (B, r+ΔT, C, h, w)
    ctx_keep: torch.Tensor         # (B,), 1 keeps the context, 0 drops it


def make_batch(dataset: LatentDataset, cfg: TrainConfig, rng: np.random.Generator) -> TrainBatch:
    """Sample training windows uniformly. All randomness comes from rng."""
    r, dT, eta, B = cfg.ref_frames, cfg.horizon, cfg.eta, cfg.batch_size
    t = dataset.n_frames
    if t < r + dT:
        raise ValueError(f"episodes of length {t} too short for window {r + dT}")
    ep_idx = rng.integers(0, dataset.n_episodes, size=B)
    start = rng.integers(0, t - (r + dT) + 1, size=B)

    refs, targets, known, future = [], [], [], []
    for e, s in zip(ep_idx, start):
        refs.append(dataset.latents[e, s:s + r])
        targets.append(dataset.latents[e, s + r:s + r + dT])
        t_cur = s + r - 1
        known.append(dataset.actions[e, t_cur:t_cur + eta])
        future.append(dataset.actions[e, t_cur + eta:t_cur + dT])
    tau = rng.integers(1, cfg.t_diff + 1, size=B)
    eps = rng.standard_normal((B, r + dT, *dataset.latents.shape[2:]))
    keep = (rng.random(B) >= cfg.p_drop).astype(np.float32)
    return TrainBatch(
        ref_latents=torch.stack(refs),
        target_latents=torch.stack(targets),
        known_actions=torch.from_numpy(np.stack(known)).float(),
        future_actions=torch.from_numpy(np.stack(future)).float(),
        tau=torch.from_numpy(tau),
        eps=torch.from_numpy(eps).float(),
        ctx_keep=torch.from_numpy(keep),
    )


class WorldModel:
    """Bundle of frozen codec + action module + denoiser + noise schedule."""

    def __init__(self, codec: Codec, action: ActionModule, denoiser: Denoiser,
                 schedule: NoiseSchedule, train_config: TrainConfig):
        self.codec = codec
        self.action = action
        self.denoiser = denoiser
        self.schedule = schedule
        self.train_config = train_config

    def save(self, path, extra=None):
        blob = {
            "schema_version": WORLD_SCHEMA_VERSION,
            "train_config": asdict(self.train_config),
            "action_config": asdict(self.action.config),
            "denoiser_config": asdict(self.denoiser.config),
            "action_state": self.action.state_dict(),
            "denoiser_state": self.denoiser.state_dict(),
            "codec_checksum": codec_checksum(self.codec),
        }
        if extra:
            blob.update(extra)
        torch.save(blob, path)

    @classmethod
    def load(cls, path, codec: Codec, expect_codec_match: bool = True) -> "WorldModel":
        try:
            blob = torch.load(path, map_location="cpu", weights_only=False)
        except FileNotFoundError:
            raise
        except Exception as e:
            raise CheckpointError(f"unreadable world checkpoint at {path}: {e}") from e
        if blob.get("schema_version") != WORLD_SCHEMA_VERSION:
            raise CheckpointError(
                f"world checkpoint version mismatch: expected {WORLD_SCHEMA_VERSION}, "
                f"got {blob.get('schema_version')}")
        if expect_codec_match and blob["codec_checksum"] != codec_checksum(codec):
            raise CheckpointError(
                "codec checksum mismatch: this world checkpoint was trained with a "
                "different codec")
        tc_fields = {k: v for k, v in blob["train_config"].items()}
        cfg = TrainConfig(**tc_fields)
        action = ActionModule(ActionModuleConfig(**blob["action_config"]))
        action.load_state_dict(blob["action_state"])
        dn_cfg = dict(blob["denoiser_config"])
        dn_cfg["channel_mult"] = tuple(dn_cfg["channel_mult"])
        denoiser = Denoiser(DenoiserConfig(**dn_cfg))
        denoiser.load_state_dict(blob["denoiser_state"])
        schedule = make_schedule(cfg.t_diff, cfg.beta_start, cfg.beta_end)
        wm = cls(codec, action, denoiser, schedule, cfg)
        wm.action.eval()
        wm.denoiser.eval()
        return wm


def build_world_model(codec: Codec, cfg: TrainConfig, action_config: ActionModuleConfig,
                      denoiser_config: DenoiserConfig, dataset: LatentDataset = None) -> WorldModel:
    torch.manual_seed(cfg.seed)
    action = ActionModule(action_config)
    denoiser = Denoiser(denoiser_config)
    if dataset is not None:
        action.set_action_stats(dataset.action_mean, dataset.action_std)
    schedule = make_schedule(cfg.t_diff, cfg.beta_start, cfg.beta_end)
    return WorldModel(codec, action, denoiser, schedule, cfg)


def training_step(wm: WorldModel, batch: TrainBatch, cfg: TrainConfig,
                  optimizer: torch.optim.Optimizer, step: int = -1):
    """One optimization step. Returns dict with l_a, l_v, l_total floats."""
    action, denoiser = wm.action, wm.denoiser
    known_norm = action.normalize(batch.known_actions)
    future_norm = action.normalize(batch.future_actions)
    s_t = batch.ref_latents[:, -1]

    if cfg.regime == "none":
        h_hat = None
        l_a = torch.zeros(())
    elif cfg.regime == "frozen":
        with torch.no_grad():
            h_hat, pred_norm = action(s_t, known_norm)
            l_a = action_loss(pred_norm, future_norm, cfg.beta_a)
    else:
        h_hat, pred_norm = action(s_t, known_norm)
        l_a = action_loss(pred_norm, future_norm, cfg.beta_a)

    seq = torch.cat([batch.ref_latents, batch.target_latents], dim=1)
    noisy = add_noise(seq, batch.tau, batch.eps, wm.schedule)
    context = build_state_context(batch.ref_latents, cfg.seq_len)
    pred_eps = denoiser(noisy, batch.tau, context=context, h_hat=h_hat,
                        ctx_keep=batch.ctx_keep)
    l_v = cfg.beta_v * F.mse_loss(pred_eps, batch.eps)
    l_total = l_a + l_v

    if not torch.isfinite(l_total):
        raise RuntimeError(
            f"non-finite loss at step {step}: l_a={l_a.item()}, l_v={l_v.item()}, "
            f"tau={batch.tau.tolist()}")

    optimizer.zero_grad()
    l_total.backward()
    params = [p for group in optimizer.param_groups for p in group["params"]]
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
    optimizer.step()
    return {"l_a": l_a.detach().item(), "l_v": l_v.detach().item(),
            "l_total": l_total.detach().item()}


def pretrain_action_module(wm: WorldModel, dataset: LatentDataset, cfg: TrainConfig,
                           steps: int, rng: np.random.Generator):
    """Train the action module alone on L_a (stage 1 of the frozen regime)."""
    opt = torch.optim.AdamW(wm.action.parameters(), lr=1e-3, weight_decay=cfg.weight_decay)
    wm.action.train()
    for _ in range(steps):
        batch = make_batch(dataset, cfg, rng)
        known_norm = wm.action.normalize(batch.known_actions)
        future_norm = wm.action.normalize(batch.future_actions)
        _, pred_norm = wm.action(batch.ref_latents[:, -1], known_norm)
        loss = action_loss(pred_norm, future_norm, cfg.beta_a)
        opt.zero_grad()
        loss.backward()
        opt.step()
    wm.action.eval()


def _param_groups(wm: WorldModel, cfg: TrainConfig):
    groups = [{"params": list(wm.denoiser.parameters())}]
    if cfg.regime == "joint":
        groups.append({"params": list(wm.action.parameters()), "lr": cfg.lr_action})
    return groups


def _make_scheduler(opt, cfg: TrainConfig):
    if cfg.schedule == "cosine":
        return torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps)
    return torch.optim.lr_scheduler.LambdaLR(opt, lambda _: 1.0)


@dataclass
class TrainResult:
    checkpoint_path: Path
    metrics_path: Path
    history: list


def train(dataset: LatentDataset, cfg: TrainConfig, action_config: ActionModuleConfig,
          denoiser_config: DenoiserConfig, codec: Codec, out_dir,
          resume_from=None) -> TrainResult:
    """Run the optimization loop, writing a run directory.

    Layout: config.json (resolved config snapshot + seed), metrics.csv
    (step, l_a, l_v, lr), checkpoints ckpt_<step>.pt and latest.pt.
    Reproducible given (config, seed, build); resumable from any checkpoint.
    """
    if dataset.codec_checksum != codec_checksum(codec):
        raise CheckpointError("dataset was encoded with a different codec")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    wm = build_world_model(codec, cfg, action_config, denoiser_config, dataset)

    rng = np.random.default_rng(cfg.seed + 1)
    if cfg.regime == "frozen" and resume_from is None:
        pretrain_action_module(wm, dataset, cfg, cfg.action_pretrain_steps,
                               np.random.default_rng(cfg.seed + 2))

    opt = torch.optim.AdamW(_param_groups(wm, cfg), lr=cfg.lr,
                            weight_decay=cfg.weight_decay)
    sched = _make_scheduler(opt, cfg)
    start_step = 0
    metrics_path = out_dir / "metrics.csv"

    if resume_from is not None:
        blob = torch.load(resume_from, map_location="cpu", weights_only=False)
        wm.action.load_state_dict(blob["action_state"])
        wm.denoiser.load_state_dict(blob["denoiser_state"])
        opt.load_state_dict(blob["optimizer_state"])
        sched.load_state_dict(blob["scheduler_state"])
        rng.bit_generator.state = blob["rng_state"]
        start_step = blob["step"]
    else:
        (out_dir / "config.json").write_text(json.dumps({
            "train": asdict(cfg),
            "action": asdict(action_config),
            "denoiser": asdict(denoiser_config),
            "seed": cfg.seed,
        }, indent=2, default=str))
        metrics_path.write_text("step,l_a,l_v,lr\n")

    def save_ckpt(path, step):
        wm.save(path, extra={
            "step": step,
            "optimizer_state": opt.state_dict(),
            "scheduler_state": sched.state_dict(),
            "rng_state": rng.bit_generator.state,
        })

    wm.action.train()
    wm.denoiser.train()
    history = []
    with open(metrics_path, "a") as log:
        for step in range(start_step, cfg.steps):
            batch = make_batch(dataset, cfg, rng)
            losses = training_step(wm, batch, cfg, opt, step=step)
            sched.step()
            history.append(losses)
            if (step + 1) % cfg.log_interval == 0:
                lr = opt.param_groups[0]["lr"]
                log.write(f"{step + 1},{losses['l_a']:.6f},{losses['l_v']:.6f},{lr:.8g}\n")
            if cfg.ckpt_interval > 0 and (step + 1) % cfg.ckpt_interval == 0:
                save_ckpt(out_dir / f"ckpt_{step + 1}.pt", step + 1)
                save_ckpt(out_dir / "latest.pt", step + 1)

    wm.action.eval()
    wm.denoiser.eval()
    final = out_dir / "latest.pt"
    save_ckpt(final, cfg.steps)
    return TrainResult(checkpoint_path=final, metrics_path=metrics_path, history=history)
