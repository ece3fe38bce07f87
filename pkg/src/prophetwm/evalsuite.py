"""Metrics and numerical verification.

Action L1 reports, a latent Fréchet distance (LFD) over frozen-codec clip
features as a desk-scale video-quality score, a finite-difference gradient
check harness, and the ablation runner producing comparison tables.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace, asdict
from pathlib import Path

import numpy as np
import torch

from .action_module import action_loss
from .codec import Codec, encode_frames
from .trainer import (LatentDataset, TrainConfig, WorldModel, make_batch, train)
from .transition import SamplerConfig, build_state_context, sample_future

LFD_REGULARIZATION = 1e-6


# ---------------------------------------------------------------------------
# Action L1
# ---------------------------------------------------------------------------

@dataclass
class ActionEvalReport:
    l1_speed: float
    l1_steering: float
    l1_average: float
    l1_speed_norm: float
    l1_steering_norm: float
    l1_average_norm: float
    episode_count: int


def action_l1(pred: np.ndarray, gt: np.ndarray, stats=None,
              episode_count: int = None) -> ActionEvalReport:
    """Per-channel mean absolute error; average is the unweighted channel mean.

    pred/gt: (..., 2) arrays in physical units. stats, if given, is
    (mean, std) per channel and adds normalized-unit numbers to the report.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction/target misalignment: {pred.shape} vs {gt.shape}")
    err = np.abs(pred - gt).reshape(-1, 2).mean(axis=0)
    if stats is not None:
        _, std = stats
        err_norm = err / np.asarray(std, dtype=np.float64)
    else:
        err_norm = np.array([np.nan, np.nan])
    return ActionEvalReport(
        l1_speed=float(err[0]), l1_steering=float(err[1]),
        l1_average=float(err.mean()),
        l1_speed_norm=float(err_norm[0]), l1_steering_norm=float(err_norm[1]),
        l1_average_norm=float(err_norm.mean()),
        episode_count=episode_count if episode_count is not None else len(pred),
    )


def copy_last_baseline(known: np.ndarray, horizon: int) -> np.ndarray:
    """Repeat the last known action for `horizon` steps. (..., eta, 2) -> (..., horizon, 2)."""
    known = np.asarray(known)
    last = known[..., -1:, :]
    reps = [1] * known.ndim
    reps[-2] = horizon
    return np.tile(last, reps)


# ---------------------------------------------------------------------------
# Latent Fréchet distance
# ---------------------------------------------------------------------------

def _sqrtm_psd(mat: np.ndarray) -> np.ndarray:
    """Matrix square root of a symmetric PSD matrix via eigendecomposition,
    clipping negative eigenvalues at zero."""
    sym = (mat + mat.T) / 2.0
    vals, vecs = np.linalg.eigh(sym)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_from_moments(mu1, sigma1, mu2, sigma2, eps_reg: float = LFD_REGULARIZATION) -> float:
    """Gaussian Fréchet distance: |mu1-mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})."""
    mu1, mu2 = np.asarray(mu1, float), np.asarray(mu2, float)
    sigma1 = np.asarray(sigma1, float) + eps_reg * np.eye(len(mu1))
    sigma2 = np.asarray(sigma2, float) + eps_reg * np.eye(len(mu2))
    a = _sqrtm_psd(sigma1)
    inner = _sqrtm_psd(a @ sigma2 @ a)
    val = float(np.sum((mu1 - mu2) ** 2) + np.trace(sigma1 + sigma2 - 2.0 * inner))
    return max(val, 0.0)


def frechet_from_features(feats1: np.ndarray, feats2: np.ndarray,
                          eps_reg: float = LFD_REGULARIZATION) -> float:
    """Fit Gaussians (population moments) to two feature sets and compare."""
    f1 = np.asarray(feats1, dtype=np.float64)
    f2 = np.asarray(feats2, dtype=np.float64)
    if f1.ndim != 2 or f2.ndim != 2 or f1.shape[1] != f2.shape[1]:
        raise ValueError("feature sets must be 2-D with equal feature dimension")
    if len(f1) < 2 or len(f2) < 2:
        raise ValueError("need at least 2 samples per side")
    mu1, mu2 = f1.mean(axis=0), f2.mean(axis=0)
    s1 = np.cov(f1, rowvar=False, bias=True)
    s2 = np.cov(f2, rowvar=False, bias=True)
    return frechet_from_moments(mu1, s1, mu2, s2, eps_reg)


def clip_features(clips: np.ndarray, codec: Codec) -> np.ndarray:
    """Per-clip feature: time-pooled latent mean and std, concatenated.

    clips: (N, T, H, W, 3) frames in [0, 1]. Returns (N, 2*C*h*w).
    """
    clips = np.asarray(clips, dtype=np.float32)
    feats = []
    for clip in clips:
        lat = encode_frames(codec, clip).numpy()          # (T, C, h, w)
        feats.append(np.concatenate([lat.mean(axis=0).ravel(), lat.std(axis=0).ravel()]))
    return np.stack(feats)


@dataclass
class VideoEvalReport:
    lfd: float
    psnr: float
    clip_count: int
    regularization: float = LFD_REGULARIZATION


def latent_frechet(real_clips: np.ndarray, generated_clips: np.ndarray,
                   codec: Codec, psnr_value: float = float("nan")) -> VideoEvalReport:
    """LFD between real and generated clip sets, via frozen-codec features."""
    f_real = clip_features(real_clips, codec)
    f_gen = clip_features(generated_clips, codec)
    lfd = frechet_from_features(f_real, f_gen)
    return VideoEvalReport(lfd=lfd, psnr=psnr_value,
                           clip_count=min(len(real_clips), len(generated_clips)))


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------

@dataclass
class GradCheckEntry:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float
    passed: bool


@dataclass
class GradCheckReport:
    entries: list
    tolerance: float

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self):
        return max(e.rel_error for e in self.entries)


def gradcheck(loss_fn, module: torch.nn.Module, tolerance: float = 1e-4,
              step: float = 1e-5, samples_per_param: int = 3,
              seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    loss_fn() must be a deterministic scalar function of the module's
    parameters. The module must already be in double precision.
    """
    rng = np.random.default_rng(seed)
    for p in module.parameters():
        if p.dtype != torch.float64:
            raise ValueError("gradcheck requires double precision parameters")
    module.zero_grad()
    loss = loss_fn()
    loss.backward()
    entries = []
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.grad is None:
                continue
            flat = p.view(-1)
            gflat = p.grad.view(-1)
            n = flat.numel()
            idxs = rng.choice(n, size=min(samples_per_param, n), replace=False)
            for idx in idxs:
                orig = flat[idx].item()
                flat[idx] = orig + step
                up = loss_fn().item()
                flat[idx] = orig - step
                down = loss_fn().item()
                flat[idx] = orig
                numeric = (up - down) / (2 * step)
                analytic = gflat[idx].item()
                # the floor keeps finite-difference noise on genuinely zero
                # gradients from registering as a large relative error
                denom = max(abs(analytic), abs(numeric), 1e-6)
                rel = abs(analytic - numeric) / denom
                entries.append(GradCheckEntry(name, int(idx), analytic, numeric,
                                              rel, rel < tolerance))
    module.zero_grad()
    return GradCheckReport(entries=entries, tolerance=tolerance)


# ---------------------------------------------------------------------------
# Ablation runner
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    arm: str
    seed: int
    lfd: float
    action_l1: float
    final_l_v: float


def generate_eval_clips(wm: WorldModel, dataset: LatentDataset, n_clips: int,
                        seed: int, sample_steps: int = 10,
                        guidance_scale: float = 1.0, n_rounds: int = 1):
    """Sample future-latent clips from held-out windows; returns
    (real_feats, gen_feats) feature arrays ready for the Fréchet distance.

    With n_rounds > 1 the model is rolled out autoregressively: each round
    feeds its last r generated latents back as the next references and (for
    regimes with an action module) its last predicted actions as the next
    known window, so compounding errors count against the score."""
    cfg = wm.train_config
    r, dT, eta = cfg.ref_frames, cfg.horizon, cfg.eta
    span = r + n_rounds * dT
    if dataset.n_frames < span:
        raise ValueError(f"episodes of length {dataset.n_frames} too short for "
                         f"{n_rounds} rollout rounds (need {span} frames)")
    rng = np.random.default_rng(seed)
    real_feats, gen_feats = [], []
    wm.denoiser.eval()
    wm.action.eval()
    for i in range(n_clips):
        e = int(rng.integers(0, dataset.n_episodes))
        s = int(rng.integers(0, dataset.n_frames - span + 1))
        real = dataset.latents[e, s + r:s + span].numpy()
        refs = dataset.latents[e, s:s + r].unsqueeze(0)
        known = torch.from_numpy(
            dataset.actions[e, s + r - 1:s + r - 1 + eta]).float().unsqueeze(0)
        chunks = []
        for call in range(n_rounds):
            with torch.no_grad():
                if cfg.regime == "none":
                    h_hat, pred = None, None
                else:
                    known_norm = wm.action.normalize(known)
                    h = wm.action.embed_known_actions(known_norm)
                    vis = wm.action.project_visual(refs[:, -1])
                    h_tilde, h_hat = wm.action.predict_latent_actions(h, vis)
                    pred = wm.action.decode_actions_physical(h_tilde)[0]
                sampler = SamplerConfig(steps=sample_steps,
                                        guidance_scale=guidance_scale,
                                        seed=seed * 10007 + i * 31 + call)
                gen = sample_future(wm.denoiser, wm.schedule, refs, h_hat,
                                    horizon=dT, config=sampler)
            chunks.append(gen[0])
            refs = gen[:, -r:]
            if pred is not None:
                known = pred[-eta:].unsqueeze(0)
        fake = torch.cat(chunks).numpy()
        real_feats.append(np.concatenate([real.mean(0).ravel(), real.std(0).ravel()]))
        gen_feats.append(np.concatenate([fake.mean(0).ravel(), fake.std(0).ravel()]))
    return np.stack(real_feats), np.stack(gen_feats)


def eval_world_model(wm: WorldModel, dataset: LatentDataset, n_clips: int = 32,
                     seed: int = 0, sample_steps: int = 10,
                     guidance_scale: float = 1.0, n_rounds: int = 1) -> dict:
    """LFD + action L1 of a trained model on (held-out) data."""
    real_feats, gen_feats = generate_eval_clips(wm, dataset, n_clips, seed,
                                                sample_steps=sample_steps,
                                                guidance_scale=guidance_scale,
                                                n_rounds=n_rounds)
    lfd = frechet_from_features(real_feats, gen_feats)
    cfg = wm.train_config
    rng = np.random.default_rng(seed + 1)
    batch = make_batch(dataset, replace(cfg, batch_size=min(64, 4 * n_clips)), rng)
    if cfg.regime == "none":
        l1 = float("nan")
    else:
        with torch.no_grad():
            known_norm = wm.action.normalize(batch.known_actions)
            _, pred_norm = wm.action(batch.ref_latents[:, -1], known_norm)
            pred = wm.action.denormalize(pred_norm).numpy()
        l1 = action_l1(pred, batch.future_actions.numpy()).l1_average
    return {"lfd": lfd, "action_l1": l1}


def ablation_run(arms: dict, seeds, dataset: LatentDataset, eval_dataset: LatentDataset,
                 codec, action_config, denoiser_configs: dict, out_dir,
                 n_eval_clips: int = 24, sample_steps: int = 10,
                 guidance_scale: float = 1.0, eval_rounds: int = 1) -> list:
    """Train every (arm, seed) pair at a matched budget and tabulate results.

    arms: {name: TrainConfig}; denoiser_configs: {name: DenoiserConfig}.
    All arms must share the same step budget; otherwise the comparison is
    rejected. Writes ablation.csv under out_dir and returns the rows.
    """
    budgets = {cfg.steps for cfg in arms.values()}
    if len(budgets) != 1:
        raise ValueError(f"arms have mismatched step budgets: {sorted(budgets)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, base_cfg in arms.items():
        for seed in seeds:
            cfg = replace(base_cfg, seed=seed)
            run_dir = out_dir / f"{name}_seed{seed}"
            result = train(dataset, cfg, action_config, denoiser_configs[name],
                           codec, run_dir)
            wm = WorldModel.load(result.checkpoint_path, codec)
            metrics = eval_world_model(wm, eval_dataset, n_clips=n_eval_clips,
                                       seed=seed, sample_steps=sample_steps,
                                       guidance_scale=guidance_scale,
                                       n_rounds=eval_rounds)
            tail = [h["l_v"] for h in result.history[-50:]]
            rows.append(AblationRow(arm=name, seed=seed, lfd=metrics["lfd"],
                                    action_l1=metrics["action_l1"],
                                    final_l_v=float(np.mean(tail))))
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "seed", "lfd", "action_l1", "final_l_v"])
        for row in rows:
            writer.writerow([row.arm, row.seed, f"{row.lfd:.6f}",
                             f"{row.action_l1:.6f}", f"{row.final_l_v:.6f}"])
    return rows
