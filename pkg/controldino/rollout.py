"""Single-clip inference and autoregressive long-video rollout.

Long videos are generated block by block; every block after the first is
conditioned on the last frame generated by the block before it, so
consecutive blocks share their boundary frame.
"""

import logging
from dataclasses import dataclass, field, replace

import torch

from .augment import ToyVAE
from .backbone import ToyTextEncoder
from .control import INFERENCE_SCALE, Conditioning, ControlDinoModel
from .diffusion import NoiseSchedule, latent_frame_count, sample
from .errors import ContractError
from .features import FeatureGrid
from .services.frames import quantize

logger = logging.getLogger(__name__)

RECONDITION_LAST_FRAME = "last_frame"


def build_prompt(base: str, style_keyword: str = "") -> str:
    if not base or not base.strip():
        raise ContractError("prompt must be non-empty")
    return f"{base}, {style_keyword}" if style_keyword else base


@dataclass
class SampleConfig:
    steps: int = 50
    guidance: float = 1.0
    seed: int = 0
    drop_first_frame: bool = False
    block_frames: int = 49
    prompt: str = "a video"

    def __post_init__(self):
        if self.steps < 1:
            raise ContractError("sample.steps must be >= 1")


@dataclass
class RolloutPlan:
    block_frames: int = 49
    num_blocks: int = 1
    recondition: str = RECONDITION_LAST_FRAME
    prompt: str = ""
    style_keyword: str = ""
    loop: bool = False

    def __post_init__(self):
        if self.block_frames < 1 or (self.block_frames - 1) % 4:
            raise ContractError(f"block_frames={self.block_frames} must satisfy ≡ 1 (mod 4)")
        if self.num_blocks < 1:
            raise ContractError("num_blocks must be >= 1")
        if self.recondition != RECONDITION_LAST_FRAME:
            raise ContractError(f"unsupported recondition mode {self.recondition!r}")

    @property
    def total_frames(self) -> int:
        return 1 + self.num_blocks * (self.block_frames - 1)


@dataclass
class RolloutResult:
    video: torch.Tensor
    first_frames: list = field(default_factory=list)  # conditioning frame each block saw


def infer_clip(model: ControlDinoModel, vae: ToyVAE, features: FeatureGrid | None, first_frame: torch.Tensor | None,
               prompt: str, sample_cfg: SampleConfig, mask: torch.Tensor | None = None,
               scale: float = INFERENCE_SCALE, frames: int | None = None, grid=None) -> torch.Tensor:
    """Generate one clip (T, 3, H, W) on the 8-bit grid.

    `features` may be None for an unconditioned run; `frames` and `grid` then
    give the clip length and latent (h, w). With a first frame, output frame 0
    is that frame exactly.
    """
    if features is not None:
        frames, grid = features.frames, features.grid
    if frames is None or grid is None:
        raise ContractError("clip length and grid are required without features")
    latent_frames = latent_frame_count(frames)
    cfg = model.backbone.cfg
    shape = (latent_frames, cfg.latent_channels, *grid)

    ff_latent = None
    if first_frame is not None and not sample_cfg.drop_first_frame:
        size = tuple(g * vae.spatial for g in grid)
        if tuple(first_frame.shape[-2:]) != size:
            raise ContractError(f"first frame is {tuple(first_frame.shape[-2:])}, clip frames are {size}")
        ff_latent = vae.encode(first_frame[None])

    text_emb = ToyTextEncoder(cfg.text_dim)(prompt)
    cond = Conditioning(
        features=None if features is None else features.data,
        text_emb=text_emb,
        first_frame=ff_latent,
        mask=mask,
        scale=scale,
    )
    uncond = Conditioning(first_frame=ff_latent, scale=scale)

    def denoiser(z, t, c):
        return model(z, t, uncond if c is None else c)

    g = torch.Generator().manual_seed(sample_cfg.seed)
    z_T = torch.randn(shape, generator=g)
    was_training = model.training
    model.eval()
    try:
        z0 = sample(denoiser, z_T, cond, sample_cfg.steps, NoiseSchedule(sample_cfg.steps), sample_cfg.guidance)
    finally:
        model.train(was_training)

    video = quantize(vae.decode(z0))
    if ff_latent is not None:
        video[0] = quantize(first_frame)
    return video


def rollout(model: ControlDinoModel, vae: ToyVAE, feature_blocks: list, first_frame: torch.Tensor | None,
            plan: RolloutPlan, sample_cfg: SampleConfig, scale: float = INFERENCE_SCALE) -> RolloutResult:
    """Run `plan.num_blocks` blocks; block k > 0 starts from block k-1's last frame."""
    if not feature_blocks:
        raise ContractError("no feature blocks")
    if not plan.loop and len(feature_blocks) < plan.num_blocks:
        raise ContractError(f"feature block {len(feature_blocks)} missing "
                            f"({plan.num_blocks} blocks planned, {len(feature_blocks)} available)")
    prompt = build_prompt(plan.prompt, plan.style_keyword)

    pieces, first_frames = [], []
    cond_frame = first_frame
    for k in range(plan.num_blocks):
        features = feature_blocks[k % len(feature_blocks)]
        if features.frames != plan.block_frames:
            raise ContractError(f"feature block {k} has {features.frames} frames, plan expects {plan.block_frames}")
        block_cfg = replace(sample_cfg, seed=sample_cfg.seed + k, drop_first_frame=sample_cfg.drop_first_frame and k == 0)
        first_frames.append(cond_frame)
        clip = infer_clip(model, vae, features, cond_frame, prompt, block_cfg, scale=scale)
        pieces.append(clip if k == 0 else clip[1:])
        cond_frame = clip[-1]
        logger.info("rollout block %d/%d done", k + 1, plan.num_blocks)
    video = torch.cat(pieces)
    if len(video) != plan.total_frames:
        raise ContractError(f"rollout produced {len(video)} frames, expected {plan.total_frames}")
    return RolloutResult(video, first_frames)
