"""Small configurations and fixtures shared by the test modules."""

import torch

from controldino.augment import ToyVAE
from controldino.config import RunConfig
from controldino.services.dataset import synthetic_clip

TINY = {
    "backbone.num_blocks": 2,
    "backbone.width": 32,
    "backbone.heads": 2,
    "backbone.text_dim": 8,
    "control.blocks": 2,
    "control.width": 16,
    "control.heads": 2,
    "adapter.channels": (16, 16),
    "encoder.feature_dim": 16,
    "train.warmup_steps": 2,
    "train.total_steps": 20,
    "train.batch_size": 2,
    "sample.steps": 2,
    "sample.block_frames": 5,
}

TINY_CFG_TEXT = "\n".join(
    f"{k}={','.join(str(x) for x in v) if isinstance(v, tuple) else v}" for k, v in TINY.items()
) + "\n"


def tiny_run(**overrides) -> RunConfig:
    values = dict(TINY)
    values.update({k.replace("__", "."): v for k, v in overrides.items()})
    return RunConfig().override(values)


def tiny_clip(frames: int = 5, seed: int = 0) -> torch.Tensor:
    return synthetic_clip(frames, 32, 32, seed=seed)


def tiny_vae(run: RunConfig) -> ToyVAE:
    return ToyVAE(run.backbone.latent_channels, seed=run.backbone.seed)
