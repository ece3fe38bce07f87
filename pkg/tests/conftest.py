"""Shared fixtures: a small microworld corpus, a pretrained codec, and
trained world-model runs reused across rollout/eval/acceptance tests.

Everything here is CPU-sized: 32x32 frames, 4x4x4 latents, short horizons.
"""

import numpy as np
import pytest
import torch

from prophetwm import microworld as mw
from prophetwm.action_module import ActionModuleConfig
from prophetwm.codec import CodecConfig, pretrain_codec
from prophetwm.trainer import LatentDataset, TrainConfig, build_world_model
from prophetwm.transition import DenoiserConfig

torch.set_num_threads(4)


@pytest.fixture(scope="session")
def world_config():
    return mw.WorldConfig(scene=mw.SceneConfig(width=32, height=32), episode_len=40)


@pytest.fixture(scope="session")
def train_episodes(world_config):
    return [mw.generate_episode(world_config, seed) for seed in range(60)]


@pytest.fixture(scope="session")
def eval_episodes(world_config):
    return [mw.generate_episode(world_config, 5000 + seed) for seed in range(16)]


@pytest.fixture(scope="session")
def tiny_codec_and_stats(train_episodes):
    frames = np.concatenate([ep.frames for ep in train_episodes[:30]])
    config = CodecConfig(frame_size=32, downsample=8, base_width=32, epochs=4)
    codec, stats = pretrain_codec(frames, config, seed=0)
    codec.eval()
    for p in codec.parameters():
        p.requires_grad_(False)
    return codec, stats


@pytest.fixture(scope="session")
def tiny_codec(tiny_codec_and_stats):
    return tiny_codec_and_stats[0]


@pytest.fixture(scope="session")
def quality_codec(train_episodes):
    # less aggressive downsampling and a longer schedule, for the
    # reconstruction-quality checks
    frames = np.concatenate([ep.frames for ep in train_episodes[:30]])
    config = CodecConfig(frame_size=32, downsample=2, base_width=32, epochs=18)
    codec, _ = pretrain_codec(frames, config, seed=0)
    codec.eval()
    return codec


@pytest.fixture(scope="session")
def base_train_config():
    return TrainConfig(steps=400, batch_size=16, eta=2, horizon=5, ref_frames=1,
                       lr=3e-4, t_diff=1000, log_interval=10, ckpt_interval=0)


@pytest.fixture(scope="session")
def action_config():
    return ActionModuleConfig(d_a=32, eta=2, horizon=5)


@pytest.fixture(scope="session")
def denoiser_config():
    return DenoiserConfig(latent_channels=4, base_width=32, channel_mult=(1, 2), d_a=32)


@pytest.fixture(scope="session")
def latent_dataset(train_episodes, tiny_codec, base_train_config):
    return LatentDataset(train_episodes, tiny_codec, min_len=base_train_config.seq_len + 1)


@pytest.fixture(scope="session")
def eval_dataset(eval_episodes, tiny_codec, base_train_config, latent_dataset):
    ds = LatentDataset(eval_episodes, tiny_codec, min_len=base_train_config.seq_len + 1)
    # Evaluation uses the training-split normalization, as the model does.
    ds.action_mean = latent_dataset.action_mean
    ds.action_std = latent_dataset.action_std
    return ds


@pytest.fixture(scope="session")
def untrained_world_model(tiny_codec, base_train_config, action_config,
                          denoiser_config, latent_dataset):
    return build_world_model(tiny_codec, base_train_config, action_config,
                             denoiser_config, latent_dataset)
