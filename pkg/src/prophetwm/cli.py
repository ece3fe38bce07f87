"""Command-line entry point.

Subcommands: datagen, pretrain-codec, train, rollout, eval, ablate.
Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
A YAML config file (sections: world, codec, action, transition, train,
rollout, eval) overrides built-in defaults; unknown keys are rejected.
The PROPHETWM_DATA environment variable overrides the default data root.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import yaml

from . import microworld
from .microworld import SceneConfig, WorldConfig, generate_episode, load_episode, save_episode
from .codec import CheckpointError, CodecConfig, load_codec, pretrain_codec, save_codec
from .action_module import ActionModuleConfig
from .transition import DenoiserConfig
from .trainer import LatentDataset, TrainConfig, WorldModel, train
from .rollout import RolloutConfig, counterfactual_rollout, rollout, save_rollout
from . import evalsuite

RUN_CONFIG_SCHEMA_VERSION = 1
STORE_SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Bad run configuration (unknown key, invalid value, bad schema)."""


@dataclass(frozen=True)
class EvalConfig:
    n_clips: int = 32
    sample_steps: int = 10
    guidance_scale: float = 1.0
    n_rounds: int = 1          # autoregressive rollout rounds per eval clip
    batch_episodes: int = 16


@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    action: ActionModuleConfig = field(default_factory=ActionModuleConfig)
    transition: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0


_SECTION_TYPES = {
    "world": WorldConfig,
    "codec": CodecConfig,
    "action": ActionModuleConfig,
    "transition": DenoiserConfig,
    "train": TrainConfig,
    "rollout": RolloutConfig,
    "eval": EvalConfig,
}


def _build_section(cls, data, section):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{section}': {sorted(unknown)}")
    kwargs = dict(data)
    if cls is WorldConfig and "scene" in kwargs:
        kwargs["scene"] = _build_section(SceneConfig, kwargs["scene"], "world.scene")
    if cls is DenoiserConfig and "channel_mult" in kwargs:
        kwargs["channel_mult"] = tuple(kwargs["channel_mult"])
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid section '{section}': {e}") from e


def load_run_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    raw = yaml.safe_load(Path(path).read_text()) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    version = raw.pop("schema_version", RUN_CONFIG_SCHEMA_VERSION)
    if version != RUN_CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"config schema version {version} not supported "
                          f"(expected {RUN_CONFIG_SCHEMA_VERSION})")
    seed = raw.pop("seed", 0)
    unknown = set(raw) - set(_SECTION_TYPES)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    sections = {name: _build_section(cls, raw.get(name, {}), name)
                for name, cls in _SECTION_TYPES.items()}
    return RunConfig(seed=seed, **sections)


def data_root(args) -> Path:
    if getattr(args, "data", None):
        return Path(args.data)
    env = os.environ.get("PROPHETWM_DATA")
    if env:
        return Path(env)
    return Path("data")


def _archive_config(out_dir: Path, config: RunConfig, command: str, seed: int):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved_config.json").write_text(json.dumps(
        {"command": command, "seed": seed, "config": asdict(config)},
        indent=2, default=str))


# ---------------------------------------------------------------------------
# Episode store
# ---------------------------------------------------------------------------

def generate_store(config: WorldConfig, n_episodes: int, master_seed: int, out_dir) -> dict:
    """n_episodes episodes with sequential seeds derived from the master seed."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    total_frames = 0
    names = []
    digest = hashlib.sha256()
    for i in range(n_episodes):
        ep = generate_episode(config, master_seed + i)
        name = f"ep_{i:05d}"
        save_episode(ep, out_dir / name)
        names.append(name)
        total_frames += len(ep)
        digest.update(ep.frames.tobytes())
        digest.update(ep.actions.tobytes())
    manifest = {
        "schema_version": STORE_SCHEMA_VERSION,
        "master_seed": int(master_seed),
        "n_episodes": int(n_episodes),
        "total_frames": int(total_frames),
        "dt": float(config.dt),
        "episodes": names,
        "checksum": digest.hexdigest(),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def load_store(path):
    """Load all episodes of a store, recounting frames against the manifest."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no episode store manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    episodes = [load_episode(path / name) for name in manifest["episodes"]]
    found = sum(len(ep) for ep in episodes)
    if found != manifest["total_frames"]:
        raise microworld.EpisodeFormatError(
            f"store frame recount mismatch in {path}: manifest says "
            f"{manifest['total_frames']}, found {found}")
    return episodes, manifest


def store_checksum(path) -> str:
    episodes, _ = load_store(path)
    digest = hashlib.sha256()
    for ep in episodes:
        digest.update(ep.frames.tobytes())
        digest.update(ep.actions.tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_datagen(args) -> int:
    config = load_run_config(args.config)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"error: output directory {out} is not empty (use --force)", file=sys.stderr)
        return 1
    seed = args.seed if args.seed is not None else config.seed
    manifest = generate_store(config.world, args.n_episodes, seed, out)
    _archive_config(out, config, "datagen", seed)
    print(f"wrote {manifest['n_episodes']} episodes ({manifest['total_frames']} frames) "
          f"to {out} [checksum {manifest['checksum'][:12]}]")
    return 0


def cmd_pretrain_codec(args) -> int:
    config = load_run_config(args.config)
    episodes, _ = load_store(data_root(args))
    frames = np.concatenate([ep.frames for ep in episodes])
    seed = args.seed if args.seed is not None else config.seed
    codec, stats = pretrain_codec(frames, config.codec, seed=seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_codec(codec, out)
    (out.with_suffix(".stats.json")).write_text(json.dumps(stats, indent=2))
    print(f"codec saved to {out} (final epoch loss {stats['epoch_losses'][-1]:.6f})")
    return 0


def _load_prereq_codec(path):
    if not Path(path).exists():
        print(f"error: missing codec checkpoint: {path}", file=sys.stderr)
        return None
    return load_codec(path)


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    codec = _load_prereq_codec(args.codec)
    if codec is None:
        return 1
    store_dir = data_root(args)
    if not (store_dir / "manifest.json").exists():
        print(f"error: missing episode store: {store_dir}", file=sys.stderr)
        return 1
    episodes, _ = load_store(store_dir)

    cfg = config.train
    if args.steps is not None:
        cfg = replace(cfg, steps=args.steps)
    if args.regime is not None:
        cfg = replace(cfg, regime={"joint": "joint", "frozen": "frozen", "none": "none"}[args.regime])
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    action_cfg = replace(config.action, eta=cfg.eta, horizon=cfg.horizon,
                         latent_channels=config.codec.latent_channels)
    denoiser_cfg = replace(config.transition, latent_channels=config.codec.latent_channels,
                           d_a=action_cfg.d_a, p_drop=cfg.p_drop)

    dataset = LatentDataset(episodes, codec, min_len=cfg.seq_len + 1)
    out = Path(args.out)
    _archive_config(out, config, "train", cfg.seed)
    resume = args.resume if args.resume else None
    result = train(dataset, cfg, action_cfg, denoiser_cfg, codec, out, resume_from=resume)
    print(f"training finished; checkpoint at {result.checkpoint_path}")
    return 0


def cmd_rollout(args) -> int:
    config = load_run_config(args.config)
    codec = _load_prereq_codec(args.codec)
    if codec is None:
        return 1
    if not Path(args.checkpoint).exists():
        print(f"error: missing world checkpoint: {args.checkpoint}", file=sys.stderr)
        return 1
    wm = WorldModel.load(args.checkpoint, codec)
    episodes, _ = load_store(data_root(args))
    ep = episodes[args.episode_index]
    r, eta = wm.train_config.ref_frames, wm.train_config.eta

    roll_cfg = config.rollout
    if args.n_rollouts is not None:
        roll_cfg = replace(roll_cfg, n_rollouts=args.n_rollouts)
    if args.guidance is not None:
        roll_cfg = replace(roll_cfg, guidance_scale=args.guidance)
    if args.seed is not None:
        roll_cfg = replace(roll_cfg, seed=args.seed)

    init_frames = ep.frames[:r]
    init_actions = ep.actions[r - 1:r - 1 + eta]
    if args.override_speed is not None or args.override_steering is not None:
        speed = args.override_speed if args.override_speed is not None else 0.0
        steering = args.override_steering if args.override_steering is not None else 0.0
        window = np.tile([[speed, steering]], (eta, 1))
        result = counterfactual_rollout(wm, init_frames, window, roll_cfg)
    else:
        result = rollout(wm, init_frames, init_actions, roll_cfg)
    out = Path(args.out)
    save_rollout(result, out, roll_cfg, montage=args.montage)
    _archive_config(out, config, "rollout", roll_cfg.seed)
    print(f"rollout wrote {len(result.frames)} frames and {len(result.actions)} actions to {out}")
    return 0


def cmd_eval(args) -> int:
    config = load_run_config(args.config)
    codec = _load_prereq_codec(args.codec)
    if codec is None:
        return 1
    episodes, _ = load_store(data_root(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.use_gt_actions:
        gt = np.concatenate([ep.actions for ep in episodes])
        report = evalsuite.action_l1(gt, gt, episode_count=len(episodes))
        (out / "action_report.json").write_text(json.dumps(asdict(report), indent=2))
        print(f"action L1 (gt-as-prediction): speed={report.l1_speed:.6f} "
              f"steering={report.l1_steering:.6f} avg={report.l1_average:.6f}")
        return 0

    if not Path(args.checkpoint).exists():
        print(f"error: missing world checkpoint: {args.checkpoint}", file=sys.stderr)
        return 1
    wm = WorldModel.load(args.checkpoint, codec)
    dataset = LatentDataset(episodes, codec, min_len=wm.train_config.seq_len + 1)
    seed = args.seed if args.seed is not None else config.seed
    metrics = evalsuite.eval_world_model(wm, dataset, n_clips=config.eval.n_clips,
                                         seed=seed, sample_steps=config.eval.sample_steps,
                                         guidance_scale=config.eval.guidance_scale,
                                         n_rounds=config.eval.n_rounds)
    (out / "eval_report.json").write_text(json.dumps(metrics, indent=2))
    print(f"LFD={metrics['lfd']:.4f} action_L1={metrics['action_l1']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config = load_run_config(args.config)
    codec = _load_prereq_codec(args.codec)
    if codec is None:
        return 1
    episodes, _ = load_store(data_root(args))
    base = config.train
    if args.steps is not None:
        base = replace(base, steps=args.steps)
    seeds = [int(s) for s in args.seeds.split(",")]
    action_cfg = replace(config.action, eta=base.eta, horizon=base.horizon,
                         latent_channels=config.codec.latent_channels)
    dn = replace(config.transition, latent_channels=config.codec.latent_channels,
                 d_a=action_cfg.d_a, p_drop=base.p_drop)

    if args.kind == "regimes":
        arms = {r: replace(base, regime=r) for r in ("joint", "frozen", "none")}
        dn_cfgs = {name: dn for name in arms}
    elif args.kind == "ref-frames":
        arms = {f"r{r}": replace(base, ref_frames=r) for r in (1, 2, 4)}
        dn_cfgs = {name: dn for name in arms}
    else:  # fusion-vs-concat
        arms = {"fusion": base, "concat": base}
        dn_cfgs = {"fusion": replace(dn, context_mode="fusion"),
                   "concat": replace(dn, context_mode="concat")}

    min_len = max(cfg.seq_len for cfg in arms.values()) + 1
    dataset = LatentDataset(episodes, codec, min_len=min_len)
    rows = evalsuite.ablation_run(arms, seeds, dataset, dataset, codec, action_cfg,
                                  dn_cfgs, args.out,
                                  n_eval_clips=config.eval.n_clips,
                                  sample_steps=config.eval.sample_steps,
                                  guidance_scale=config.eval.guidance_scale,
                                  eval_rounds=config.eval.n_rounds)
    for row in rows:
        print(f"{row.arm} seed={row.seed} LFD={row.lfd:.4f} "
              f"L1={row.action_l1:.4f} L_v={row.final_l_v:.4f}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prophetwm",
                                     description="Desk-scale joint video-action driving world model")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", default=None, help="YAML run config")
        p.add_argument("--seed", type=int, default=None)
        if data:
            p.add_argument("--data", default=None,
                           help="episode store (default: $PROPHETWM_DATA or ./data)")

    p = sub.add_parser("datagen", help="generate a microworld episode store")
    common(p, data=False)
    p.add_argument("--out", required=True)
    p.add_argument("--n-episodes", type=int, default=100)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("pretrain-codec", help="pretrain the frame codec")
    common(p)
    p.add_argument("--out", required=True, help="codec checkpoint path")
    p.set_defaults(func=cmd_pretrain_codec)

    p = sub.add_parser("train", help="train the world model")
    common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--regime", choices=["joint", "frozen", "none"], default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rollout", help="autoregressive long-horizon prediction")
    common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-rollouts", type=int, default=None)
    p.add_argument("--guidance", type=float, default=None)
    p.add_argument("--episode-index", type=int, default=0)
    p.add_argument("--override-speed", type=float, default=None)
    p.add_argument("--override-steering", type=float, default=None)
    p.add_argument("--montage", action="store_true")
    p.set_defaults(func=cmd_rollout)

    p = sub.add_parser("eval", help="action L1 and latent Fréchet distance")
    common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--checkpoint", default="")
    p.add_argument("--out", required=True)
    p.add_argument("--use-gt-actions", action="store_true",
                   help="score ground truth as the prediction (identity check)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="reproduce ablation tables")
    common(p)
    p.add_argument("--codec", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["regimes", "ref-frames", "fusion-vs-concat"],
                   default="regimes")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, microworld.EpisodeFormatError,
            ValueError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
